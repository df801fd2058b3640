// Command-line surface for the list-mode PET motion-correction toolkit.
// Exit codes: 0 ok, 2 configuration error, 3 stage failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "umcpet/config.hpp"
#include "umcpet/gating.hpp"
#include "umcpet/io.hpp"
#include "umcpet/metrics.hpp"
#include "umcpet/pipeline.hpp"

namespace fs = std::filesystem;
using namespace umcpet;

namespace {

struct GlobalOpts {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
  bool strict = false;
};

PipelineConfig load_config(const GlobalOpts& g) {
  if (g.config_path.empty()) throw Error(Error::Kind::Config, "--config is required");
  PipelineConfig cfg = load_pipeline_config(g.config_path);
  if (g.seed_set) cfg.seed = g.seed;
  return cfg;
}

void apply_run_options(const GlobalOpts& g) {
  auto& opts = run_options();
  opts.threads = g.threads > 0 ? g.threads : static_cast<int>(std::thread::hardware_concurrency());
  if (opts.threads < 1) opts.threads = 1;
  opts.strict_determinism = g.strict;
}

std::string frame_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%04d.vol", i);
  return buf;
}

std::string field_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "field_%04d.dfm", i);
  return buf;
}

PciSeries read_frames_dir(const std::string& dir, double dt_s) {
  PciSeries series;
  series.dt_s = dt_s;
  for (int i = 0;; ++i) {
    const std::string path = dir + "/" + frame_name(i);
    if (!fs::exists(path)) break;
    series.frames.push_back(read_volume(path));
  }
  if (series.frames.empty()) throw Error(Error::Kind::Config, "no frame_NNNN.vol files in " + dir);
  return series;
}

int cmd_simulate(const GlobalOpts& g, const std::string& out_path, double duration_override) {
  PipelineConfig cfg = load_config(g);
  if (duration_override > 0.0) cfg.duration_s = duration_override;
  cfg.validate();
  SimOptions sim;
  sim.half_life_s = cfg.half_life_s;
  sim.randoms_rate_per_s = cfg.randoms_rate_per_s;
  const EventStream stream = simulate(cfg.phantom, cfg.scanner, cfg.duration_s, cfg.seed, sim);
  write_stream(stream, out_path);
  std::cout << "wrote " << stream.count() << " events to " << out_path << "\n";
  return 0;
}

int cmd_pci(const GlobalOpts& g, const std::string& events_path, const std::string& out_dir) {
  PipelineConfig cfg = load_config(g);
  const EventStream stream = read_stream(events_path, cfg.scanner.hash());
  fs::create_directories(out_dir);
  const Volume q = sensitivity_static(cfg.scanner, cfg.grid, cfg.recon.sens_lors);
  write_volume(q, out_dir + "/sensitivity_pci.vol", "sensitivity");
  const PciSeries series = pci_series(stream, cfg.pci_dt_s, cfg.scanner, cfg.grid, q);
  for (int i = 0; i < series.n_frames(); ++i) {
    char t[32];
    std::snprintf(t, sizeof(t), "%.6f", series.frame_mid(i));
    write_volume(series.frames[static_cast<std::size_t>(i)], out_dir + "/" + frame_name(i), "pci",
                 {{"frame_time_s", t}});
  }
  write_text_file(out_dir + "/cod.csv", cod_trace_csv(cod_trace(series)));
  std::cout << "wrote " << series.n_frames() << " PCI frames to " << out_dir << "\n";
  return 0;
}

int cmd_gate(const GlobalOpts& g, const std::string& events_path, const std::string& out_dir) {
  PipelineConfig cfg = load_config(g);
  const EventStream stream = read_stream(events_path, cfg.scanner.hash());
  fs::create_directories(out_dir);

  const SurrogateTrace trace = surrogate(cfg.phantom, stream.duration_s, cfg.gating.surrogate_rate_hz,
                                         cfg.gating.surrogate_noise, cfg.seed);
  write_text_file(out_dir + "/surrogate.csv", surrogate_csv(trace));

  const Volume q = sensitivity_static(cfg.scanner, cfg.grid, cfg.recon.sens_lors);
  const PciSeries series = pci_series(stream, cfg.pci_dt_s, cfg.scanner, cfg.grid, q);
  const CodTrace cod = cod_trace(series);
  write_text_file(out_dir + "/cod.csv", cod_trace_csv(cod));

  const auto segments = detect_body_motion(cod, cfg.gating.body_motion_threshold_mm, cfg.gating.min_dwell_s);
  const StableSegment& best = longest_segment(segments);
  const std::vector<std::pair<double, double>> accept{{best.t_begin_s, best.t_end_s}};
  const GateSet gates = amplitude_gates(trace, stream, cfg.gating.n_gates, accept);

  const Volume q_nmc =
      sensitivity_nmc(cfg.scanner, cfg.grid, nullptr, cfg.half_life_s, stream.duration_s, cfg.recon.sens_lors);
  json gate_info;
  gate_info["n_gates"] = gates.n_gates;
  gate_info["amplitude_edges"] = gates.amplitude_edges;
  gate_info["body_motion_free_window_s"] = {best.t_begin_s, best.t_end_s};
  for (int gi = 0; gi < gates.n_gates; ++gi) {
    EventStream sub;
    sub.geometry_hash = stream.geometry_hash;
    sub.half_life_s = stream.half_life_s;
    sub.duration_s = stream.duration_s;
    for (std::size_t k : gates.event_index[static_cast<std::size_t>(gi)]) sub.events.push_back(stream.events[k]);
    gate_info["gate_event_counts"].push_back(sub.count());
    const CorrectionFactors f = compute_correction_factors(sub, cfg.scanner);
    const Volume recon = osem(sub, f, nullptr, q_nmc, cfg.scanner, cfg.recon);
    write_volume(recon, out_dir + "/gated_" + std::to_string(gi) + ".vol", "activity");
  }

  const auto pairs = extract_training_pairs(gates, trace, series, 0.10, cfg.seed);
  json pairs_json = json::array();
  for (const auto& p : pairs) pairs_json.push_back({{"frame", p.frame}, {"gate", p.gate}});
  gate_info["training_pairs"] = pairs_json;
  write_text_file(out_dir + "/gates.json", gate_info.dump(2) + "\n");
  std::cout << "wrote " << gates.n_gates << " gated reconstructions and " << pairs.size()
            << " training pairs to " << out_dir << "\n";
  return 0;
}

int cmd_register(const GlobalOpts& g, const std::string& frames_dir, const std::string& out_dir,
                 bool denoise_first) {
  PipelineConfig cfg = load_config(g);
  PciSeries series = read_frames_dir(frames_dir, cfg.pci_dt_s);
  if (denoise_first) {
    const SurrogateTrace trace = surrogate(cfg.phantom, series.n_frames() * series.dt_s,
                                           cfg.gating.surrogate_rate_hz, cfg.gating.surrogate_noise, cfg.seed);
    GaussianDenoiser d(cfg.denoiser.fwhm_mm);
    series = denoise_series(d, series, trace);
  }
  fs::create_directories(out_dir);
  const int reference = select_reference(series);
  const MotionSeries motion = estimate_motion(series, reference, cfg.registration);
  for (int i = 0; i < motion.n_frames(); ++i)
    write_field(motion.fields[static_cast<std::size_t>(i)], out_dir + "/" + field_name(i));
  json info;
  info["reference_frame"] = reference;
  info["n_fields"] = motion.n_frames();
  info["dt_s"] = motion.dt_s;
  write_text_file(out_dir + "/registration.json", info.dump(2) + "\n");
  std::cout << "registered " << (motion.n_frames() - 1) << " frame pairs (reference " << reference
            << ") into " << out_dir << "\n";
  return 0;
}

int cmd_recon(const GlobalOpts& g, const std::string& events_path, const std::string& out_path,
              const std::string& motion_dir, bool nmc) {
  PipelineConfig cfg = load_config(g);
  const EventStream stream = read_stream(events_path, cfg.scanner.hash());

  const Volume mu = mu_volume(cfg.phantom, 0.0, cfg.grid);
  const double randoms_per_lor_bin =
      cfg.randoms_rate_per_s / (static_cast<double>(cfg.scanner.n_crystals()) *
                                (cfg.scanner.n_crystals() - 1) / 2.0 * cfg.scanner.n_tof_bins);
  const CorrectionFactors factors =
      compute_correction_factors(stream, cfg.scanner, &mu, randoms_per_lor_bin, 0.0);

  ReconConfig rc = cfg.recon;
  rc.config_hash = pipeline_config_hash(cfg);

  Volume result;
  if (nmc || motion_dir.empty()) {
    const Volume q =
        sensitivity_nmc(cfg.scanner, cfg.grid, &mu, cfg.half_life_s, stream.duration_s, cfg.recon.sens_lors);
    result = osem(stream, factors, nullptr, q, cfg.scanner, rc);
  } else {
    MotionSeries motion;
    motion.dt_s = cfg.pci_dt_s;
    const json info = cfg_detail::parse_json_file(motion_dir + "/registration.json");
    motion.reference = info.at("reference_frame").get<int>();
    const int n = info.at("n_fields").get<int>();
    for (int i = 0; i < n; ++i) motion.fields.push_back(read_field(motion_dir + "/" + field_name(i)));
    const Volume q =
        sensitivity_mc(cfg.scanner, cfg.grid, motion, stream.duration_s, rc, &mu, cfg.half_life_s);
    result = osem(stream, factors, &motion, q, cfg.scanner, rc);
  }
  write_volume(result, out_path, "activity", {{"config_hash", rc.config_hash}});
  std::cout << "wrote reconstruction to " << out_path << "\n";
  return 0;
}

int cmd_slrecon(const GlobalOpts& g, const std::string& events_path, const std::string& apply_path,
                const std::string& out_arg, const std::string& model_cmd) {
  PipelineConfig cfg = load_config(g);
  if (!apply_path.empty()) {
    const Volume input = read_volume(apply_path);
    Volume output;
    if (model_cmd.empty()) {
      output = short_to_long_baseline(input, cfg.slrecon);
    } else {
      const std::string work = fs::path(out_arg).parent_path().string();
      output = short_to_long_external(input, model_cmd, work.empty() ? "." : work);
    }
    write_volume(output, out_arg, "activity");
    std::cout << "wrote " << out_arg << "\n";
    return 0;
  }
  if (events_path.empty())
    throw Error(Error::Kind::Config, "slrecon: provide --events (pair mode) or --apply (volume mode)");
  const EventStream stream = read_stream(events_path, cfg.scanner.hash());
  fs::create_directories(out_arg);
  const Volume mu = mu_volume(cfg.phantom, 0.0, cfg.grid);
  const Volume q =
      sensitivity_nmc(cfg.scanner, cfg.grid, &mu, cfg.half_life_s, stream.duration_s, cfg.recon.sens_lors);
  const CorrectionFactors factors = compute_correction_factors(stream, cfg.scanner, &mu);
  const SlPair pair = make_sl_pair(stream, cfg.scanner, q, factors, cfg.recon, cfg.slrecon);
  const Volume predicted = short_to_long_baseline(pair.short_recon, cfg.slrecon);
  write_volume(pair.short_recon, out_arg + "/short.vol", "activity");
  write_volume(pair.long_recon, out_arg + "/long.vol", "activity");
  write_volume(predicted, out_arg + "/predicted.vol", "activity");
  json info;
  info["window_s"] = {pair.window_begin_s, pair.window_end_s};
  info["nrmse_short_vs_long"] = nrmse(pair.short_recon, pair.long_recon);
  info["nrmse_predicted_vs_long"] = nrmse(predicted, pair.long_recon);
  write_text_file(out_arg + "/slrecon.json", info.dump(2) + "\n");
  std::cout << "wrote SL pair + prediction to " << out_arg << "\n";
  return 0;
}

int cmd_eval(const GlobalOpts&, const std::string& volume_path, const std::string& mask_from,
             const std::string& report_path) {
  const Volume v = read_volume(volume_path);
  std::vector<std::uint8_t> mask;
  if (!mask_from.empty()) {
    const Volume m = read_volume(mask_from);
    if (m.grid != v.grid) throw Error(Error::Kind::Config, "eval: mask volume grid mismatch");
    mask = threshold_mask(m, 0.05);
  } else {
    mask = threshold_mask(v, 0.05);
  }
  json rep;
  rep["volume"] = volume_path;
  rep["mean_normalized_gradient"] = mean_normalized_gradient(v, mask);
  const std::string text = rep.dump(2) + "\n";
  if (report_path.empty())
    std::cout << text;
  else
    write_text_file(report_path, text);
  return 0;
}

int cmd_pipeline(const GlobalOpts& g, const std::string& out_dir) {
  PipelineConfig cfg = load_config(g);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  const PipelineResult result = run_pipeline(cfg);
  std::cout << "pipeline finished; report at " << cfg.output_dir << "/report.json\n";
  std::cout << result.report["metrics"].dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"umcpet: list-mode TOF-PET simulation, universal motion correction and reconstruction"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config_path, "pipeline configuration file (JSON)");
  auto* seed_opt = app.add_option("--seed", g.seed, "override the config seed");
  app.add_option("--threads", g.threads, "worker threads (default: hardware concurrency)");
  app.add_flag("--strict-determinism", g.strict, "sequential chunk execution");

  std::string out_path = "events.flm", out_dir = "out", events_path, frames_dir, motion_dir;
  std::string apply_path, model_cmd, volume_path, mask_from, report_path;
  double duration_override = 0.0;
  bool nmc = false, denoise_first = false;

  auto* sc_sim = app.add_subcommand("simulate", "simulate a list-mode acquisition");
  sc_sim->add_option("--out", out_path, "output event file")->capture_default_str();
  sc_sim->add_option("--duration", duration_override, "override acquisition duration (s)");

  auto* sc_pci = app.add_subcommand("pci", "back-project ultra-short frames");
  sc_pci->add_option("--events", events_path, "input event file")->required();
  sc_pci->add_option("--out-dir", out_dir, "output directory")->capture_default_str();

  auto* sc_gate = app.add_subcommand("gate", "amplitude gating and gated reconstructions");
  sc_gate->add_option("--events", events_path, "input event file")->required();
  sc_gate->add_option("--out-dir", out_dir, "output directory")->capture_default_str();

  auto* sc_reg = app.add_subcommand("register", "estimate quasi-continuous motion from frames");
  sc_reg->add_option("--frames-dir", frames_dir, "directory with frame_NNNN.vol")->required();
  sc_reg->add_option("--out-dir", out_dir, "output directory")->capture_default_str();
  sc_reg->add_flag("--denoise", denoise_first, "smooth frames before registration");

  auto* sc_recon = app.add_subcommand("recon", "list-mode TOF-OSEM reconstruction");
  sc_recon->add_option("--events", events_path, "input event file")->required();
  sc_recon->add_option("--out", out_path, "output volume")->required();
  sc_recon->add_option("--motion-dir", motion_dir, "motion fields from `register`");
  sc_recon->add_flag("--nmc", nmc, "no motion correction");

  auto* sc_sl = app.add_subcommand("slrecon", "short-to-long acquisition mapping");
  sc_sl->add_option("--events", events_path, "long event file (pair mode)");
  sc_sl->add_option("--apply", apply_path, "volume to map (apply mode)");
  sc_sl->add_option("--out", out_dir, "output directory (pair mode) or volume (apply mode)")
      ->capture_default_str();
  sc_sl->add_option("--model", model_cmd, "external model command (apply mode)");

  auto* sc_eval = app.add_subcommand("eval", "evaluation metrics");
  sc_eval->add_option("--volume", volume_path, "volume to evaluate")->required();
  sc_eval->add_option("--mask-from", mask_from, "volume defining the 5%-of-max mask");
  sc_eval->add_option("--report", report_path, "write metrics JSON here (default stdout)");

  auto* sc_pipe = app.add_subcommand("pipeline", "end-to-end run with report");
  sc_pipe->add_option("--out-dir", out_dir, "override the config output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // command-line problems are configuration errors
  }

  g.seed_set = seed_opt->count() > 0;
  apply_run_options(g);

  try {
    if (sc_sim->parsed()) return cmd_simulate(g, out_path, duration_override);
    if (sc_pci->parsed()) return cmd_pci(g, events_path, out_dir);
    if (sc_gate->parsed()) return cmd_gate(g, events_path, out_dir);
    if (sc_reg->parsed()) return cmd_register(g, frames_dir, out_dir, denoise_first);
    if (sc_recon->parsed()) return cmd_recon(g, events_path, out_path, motion_dir, nmc);
    if (sc_sl->parsed()) return cmd_slrecon(g, events_path, apply_path, out_dir, model_cmd);
    if (sc_eval->parsed()) return cmd_eval(g, volume_path, mask_from, report_path);
    if (sc_pipe->parsed()) return cmd_pipeline(g, sc_pipe->count("--out-dir") ? out_dir : "");
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == Error::Kind::Config ? 2 : 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
