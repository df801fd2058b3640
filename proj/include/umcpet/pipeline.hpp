#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "umcpet/config.hpp"
#include "umcpet/gating.hpp"
#include "umcpet/io.hpp"
#include "umcpet/listmode.hpp"
#include "umcpet/metrics.hpp"
#include "umcpet/pci.hpp"
#include "umcpet/phantom.hpp"
#include "umcpet/recon.hpp"
#include "umcpet/registration.hpp"
#include "umcpet/slrecon.hpp"

namespace umcpet {

// In-memory products of a pipeline run, for callers that want more than the
// report (tests, mostly).
struct PipelineResult {
  json report;
  EventStream events;
  PciSeries pci;
  PciSeries dpci;
  int reference = 0;
  MotionSeries motion;
  Volume recon_nmc;
  Volume recon_umc;
  Volume recon_sl;
  DeltaCodResult dcod;
};

namespace pipeline_detail {

struct StageGuard {
  const char* name;
  template <typename Fn>
  auto run(Fn&& fn) -> decltype(fn()) {
    try {
      return fn();
    } catch (const Error& e) {
      if (e.kind() == Error::Kind::Config) throw;
      throw Error(Error::Kind::Stage, std::string("stage '") + name + "' failed: " + e.what());
    } catch (const std::exception& e) {
      throw Error(Error::Kind::Stage, std::string("stage '") + name + "' failed: " + e.what());
    }
  }
};

}  // namespace pipeline_detail

// Runs simulate -> PCI -> denoise -> reference selection -> motion
// estimation -> motion-aware sensitivity -> MC-OSEM -> SL-Recon, plus the
// no-motion-correction baseline, writing volumes, traces and a deterministic
// machine-readable report under cfg.output_dir. Any stage failure aborts
// with a stage-tagged error; outputs written so far are retained.
inline PipelineResult run_pipeline(const PipelineConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();
  fs::create_directories(cfg.output_dir);
  const std::string out = cfg.output_dir;
  const std::string config_hash = pipeline_config_hash(cfg);

  PipelineResult r;
  json& report = r.report;
  report["report_version"] = 1;
  report["tool_version"] = kVersion;
  report["config_hash"] = config_hash;
  report["seed"] = cfg.seed;
  report["mode"] = cfg.nmc_only ? "nmc_only" : "full";

  using pipeline_detail::StageGuard;

  // --- simulate --------------------------------------------------------------
  StageGuard{"simulate"}.run([&] {
    SimOptions sim;
    sim.half_life_s = cfg.half_life_s;
    sim.randoms_rate_per_s = cfg.randoms_rate_per_s;
    r.events = simulate(cfg.phantom, cfg.scanner, cfg.duration_s, cfg.seed, sim);
    write_stream(r.events, out + "/events.flm");
    report["counts"]["events"] = r.events.count();
    return 0;
  });

  // --- PCI series ------------------------------------------------------------
  Volume q_pci;
  StageGuard{"pci"}.run([&] {
    q_pci = sensitivity_static(cfg.scanner, cfg.grid, cfg.recon.sens_lors);
    write_volume(q_pci, out + "/sensitivity_pci.vol", "sensitivity");
    r.pci = pci_series(r.events, cfg.pci_dt_s, cfg.scanner, cfg.grid, q_pci);
    report["counts"]["pci_frames"] = r.pci.n_frames();
    const CodTrace trace = cod_trace(r.pci);
    write_text_file(out + "/cod.csv", cod_trace_csv(trace));
    return 0;
  });

  // --- surrogate + denoise -----------------------------------------------------
  SurrogateTrace trace;
  StageGuard{"denoise"}.run([&] {
    trace = surrogate(cfg.phantom, cfg.duration_s, cfg.gating.surrogate_rate_hz, cfg.gating.surrogate_noise,
                      cfg.seed);
    write_text_file(out + "/surrogate.csv", surrogate_csv(trace));

    if (cfg.denoiser.kind == "none") {
      r.dpci = r.pci;
    } else if (cfg.denoiser.kind == "gaussian") {
      GaussianDenoiser d(cfg.denoiser.fwhm_mm);
      r.dpci = denoise_series(d, r.pci, trace);
    } else {  // gate_match: gated OSEM targets from the body-motion-free data
      const CodTrace cod = cod_trace(r.pci);
      const auto segments =
          detect_body_motion(cod, cfg.gating.body_motion_threshold_mm, cfg.gating.min_dwell_s);
      const StableSegment& best = longest_segment(segments);
      const std::vector<std::pair<double, double>> accept{{best.t_begin_s, best.t_end_s}};
      const GateSet gates = amplitude_gates(trace, r.events, cfg.gating.n_gates, accept);
      const Volume q_nmc = sensitivity_nmc(cfg.scanner, cfg.grid, nullptr, cfg.half_life_s, cfg.duration_s,
                                           cfg.recon.sens_lors);
      std::vector<Volume> gated;
      for (int g = 0; g < gates.n_gates; ++g) {
        EventStream sub;
        sub.geometry_hash = r.events.geometry_hash;
        sub.half_life_s = r.events.half_life_s;
        sub.duration_s = r.events.duration_s;
        for (std::size_t k : gates.event_index[static_cast<std::size_t>(g)])
          sub.events.push_back(r.events.events[k]);
        const CorrectionFactors f = compute_correction_factors(sub, cfg.scanner);
        gated.push_back(osem(sub, f, nullptr, q_nmc, cfg.scanner, cfg.recon));
        write_volume(gated.back(), out + "/gated_" + std::to_string(g) + ".vol", "activity");
      }
      GateMatchDenoiser d(gates, std::move(gated));
      r.dpci = denoise_series(d, r.pci, trace);
    }
    return 0;
  });

  // --- reference + motion ------------------------------------------------------
  StageGuard{"register"}.run([&] {
    r.reference = select_reference(r.dpci);
    report["reference_frame"] = r.reference;
    if (cfg.nmc_only) {
      r.motion = MotionSeries::identity(cfg.grid, r.dpci.n_frames(), cfg.pci_dt_s, r.reference);
    } else {
      r.motion = estimate_motion(r.dpci, r.reference, cfg.registration);
      write_field(r.motion.fields[static_cast<std::size_t>(r.reference) == 0 ? (r.motion.fields.size() > 1 ? 1 : 0) : 0],
                  out + "/motion_sample.dfm");
    }
    return 0;
  });

  // --- delta-COD ---------------------------------------------------------------
  StageGuard{"delta_cod"}.run([&] {
    r.dcod = delta_cod(r.dpci, r.motion, r.reference);
    report["metrics"]["dcod_before_mean_mm"] = r.dcod.before_mean;
    report["metrics"]["dcod_before_std_mm"] = r.dcod.before_std;
    report["metrics"]["dcod_after_mean_mm"] = r.dcod.after_mean;
    report["metrics"]["dcod_after_std_mm"] = r.dcod.after_std;
    report["metrics"]["dcod_wilcoxon_p"] = r.dcod.wilcoxon_p;
    std::ostringstream os;
    os << "time_s,before_mm,after_mm\n";
    char line[120];
    for (std::size_t i = 0; i < r.dcod.times_s.size(); ++i) {
      std::snprintf(line, sizeof(line), "%.6f,%.6f,%.6f\n", r.dcod.times_s[i], r.dcod.before_mm[i],
                    r.dcod.after_mm[i]);
      os << line;
    }
    write_text_file(out + "/dcod.csv", os.str());
    return 0;
  });

  // --- reconstructions -----------------------------------------------------------
  Volume mu;
  StageGuard{"recon"}.run([&] {
    const double t_ref = r.dpci.frame_mid(r.reference);
    mu = mu_volume(cfg.phantom, t_ref, cfg.grid);
    write_volume(mu, out + "/mu.vol", "mm^-1");
    const double randoms_per_lor_bin =
        cfg.randoms_rate_per_s /
        (static_cast<double>(cfg.scanner.n_crystals()) * (cfg.scanner.n_crystals() - 1) / 2.0 *
         cfg.scanner.n_tof_bins);
    const CorrectionFactors factors =
        compute_correction_factors(r.events, cfg.scanner, &mu, randoms_per_lor_bin, 0.0);

    ReconConfig rc = cfg.recon;
    rc.config_hash = config_hash;

    const Volume q_nmc =
        sensitivity_nmc(cfg.scanner, cfg.grid, &mu, cfg.half_life_s, cfg.duration_s, cfg.recon.sens_lors);
    OsemDiagnostics diag_nmc;
    r.recon_nmc = osem(r.events, factors, nullptr, q_nmc, cfg.scanner, rc, &diag_nmc);
    write_volume(r.recon_nmc, out + "/recon_nmc.vol", "activity", {{"config_hash", config_hash}});
    report["counts"]["nmc_events_used"] = diag_nmc.events_used;
    report["counts"]["nmc_events_skipped"] = diag_nmc.events_skipped_zero_denominator;

    if (!cfg.nmc_only) {
      const Volume q_mc = sensitivity_mc(cfg.scanner, cfg.grid, r.motion, cfg.duration_s, rc, &mu,
                                         cfg.half_life_s);
      OsemDiagnostics diag_mc;
      r.recon_umc = osem(r.events, factors, &r.motion, q_mc, cfg.scanner, rc, &diag_mc);
      write_volume(r.recon_umc, out + "/recon_umc.vol", "activity", {{"config_hash", config_hash}});
      report["counts"]["umc_events_used"] = diag_mc.events_used;
      report["counts"]["umc_events_skipped"] = diag_mc.events_skipped_zero_denominator;
    }
    return 0;
  });

  // --- SL-Recon -------------------------------------------------------------------
  if (cfg.slrecon_enabled) {
    StageGuard{"slrecon"}.run([&] {
      const Volume& src = cfg.nmc_only ? r.recon_nmc : r.recon_umc;
      r.recon_sl = short_to_long_baseline(src, cfg.slrecon);
      write_volume(r.recon_sl, out + "/recon_sl.vol", "activity", {{"config_hash", config_hash}});
      return 0;
    });
  }

  // --- sharpness metrics ------------------------------------------------------------
  StageGuard{"metrics"}.run([&] {
    const Volume& mask_source = cfg.slrecon_enabled ? r.recon_sl : (cfg.nmc_only ? r.recon_nmc : r.recon_umc);
    const auto mask = threshold_mask(mask_source, 0.05);
    report["metrics"]["mng_nmc"] = mean_normalized_gradient(r.recon_nmc, mask);
    if (!cfg.nmc_only) report["metrics"]["mng_umc"] = mean_normalized_gradient(r.recon_umc, mask);
    if (cfg.slrecon_enabled) report["metrics"]["mng_sl"] = mean_normalized_gradient(r.recon_sl, mask);
    return 0;
  });

  report["outputs"]["events"] = "events.flm";
  report["outputs"]["recon_nmc"] = "recon_nmc.vol";
  if (!cfg.nmc_only) report["outputs"]["recon_umc"] = "recon_umc.vol";
  if (cfg.slrecon_enabled) report["outputs"]["recon_sl"] = "recon_sl.vol";

  write_text_file(out + "/report.json", report.dump(2) + "\n");
  return r;
}

}  // namespace umcpet
