#pragma once

#include <array>
#include <fstream>
#include <string>

#include <json.hpp>

#include "umcpet/common.hpp"
#include "umcpet/geometry.hpp"
#include "umcpet/grid.hpp"
#include "umcpet/phantom.hpp"
#include "umcpet/recon.hpp"
#include "umcpet/registration.hpp"
#include "umcpet/slrecon.hpp"

namespace umcpet {

using json = nlohmann::json;

inline constexpr int kConfigSchemaVersion = 1;

namespace cfg_detail {

inline json parse_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(Error::Kind::Config, "cannot open config file: " + path);
  json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw Error(Error::Kind::Config, "invalid JSON in " + path + ": " + e.what());
  }
  return j;
}

inline Vec3 vec3_of(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3)
    throw Error(Error::Kind::Config, std::string(what) + " must be a 3-element array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline json vec3_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const std::exception& e) {
    throw Error(Error::Kind::Config, std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace cfg_detail

// --- Phantom schema (versioned) ----------------------------------------------

inline PhantomSpec phantom_from_json(const json& j) {
  if (cfg_detail::get_or<int>(j, "schema_version", 1) != 1)
    throw Error(Error::Kind::Config, "phantom: unsupported schema_version");
  PhantomSpec spec;
  spec.total_duration_s = cfg_detail::get_or<double>(j, "total_duration_s", 120.0);
  if (j.contains("components"))
    for (const auto& c : j.at("components")) {
      EllipsoidComponent comp;
      comp.center_mm = cfg_detail::vec3_of(c.at("center_mm"), "component center_mm");
      comp.semi_axes_mm = cfg_detail::vec3_of(c.at("semi_axes_mm"), "component semi_axes_mm");
      comp.activity_per_s_mm3 = cfg_detail::get_or<double>(c, "activity_per_s_mm3", 0.0);
      comp.mu_per_mm = cfg_detail::get_or<double>(c, "mu_per_mm", 0.0);
      spec.components.push_back(comp);
    }
  if (j.contains("motion")) {
    const auto& m = j.at("motion");
    if (m.contains("respiratory")) {
      const auto& r = m.at("respiratory");
      if (r.contains("amplitude_mm"))
        spec.motion.respiratory.amplitude_mm = cfg_detail::vec3_of(r.at("amplitude_mm"), "respiratory amplitude");
      spec.motion.respiratory.period_s = cfg_detail::get_or<double>(r, "period_s", 4.0);
      spec.motion.respiratory.baseline_drift_mm_per_s = cfg_detail::get_or<double>(r, "baseline_drift_mm_per_s", 0.0);
    }
    if (m.contains("body_steps"))
      for (const auto& s : m.at("body_steps")) {
        BodyStep step;
        step.time_s = s.at("time_s").get<double>();
        step.displacement_mm = cfg_detail::vec3_of(s.at("displacement_mm"), "body step displacement");
        spec.motion.body_steps.push_back(step);
      }
    if (m.contains("bowel"))
      for (const auto& b : m.at("bowel")) {
        BowelMotion bowel;
        bowel.center_mm = cfg_detail::vec3_of(b.at("center_mm"), "bowel center");
        bowel.sigma_mm = cfg_detail::get_or<double>(b, "sigma_mm", 20.0);
        bowel.amplitude_mm = cfg_detail::vec3_of(b.at("amplitude_mm"), "bowel amplitude");
        bowel.period_s = cfg_detail::get_or<double>(b, "period_s", 10.0);
        spec.motion.bowel.push_back(bowel);
      }
  }
  spec.validate();
  return spec;
}

inline json phantom_to_json(const PhantomSpec& spec) {
  json j;
  j["schema_version"] = 1;
  j["total_duration_s"] = spec.total_duration_s;
  j["components"] = json::array();
  for (const auto& c : spec.components)
    j["components"].push_back({{"center_mm", cfg_detail::vec3_json(c.center_mm)},
                               {"semi_axes_mm", cfg_detail::vec3_json(c.semi_axes_mm)},
                               {"activity_per_s_mm3", c.activity_per_s_mm3},
                               {"mu_per_mm", c.mu_per_mm}});
  json m;
  m["respiratory"] = {{"amplitude_mm", cfg_detail::vec3_json(spec.motion.respiratory.amplitude_mm)},
                      {"period_s", spec.motion.respiratory.period_s},
                      {"baseline_drift_mm_per_s", spec.motion.respiratory.baseline_drift_mm_per_s}};
  m["body_steps"] = json::array();
  for (const auto& s : spec.motion.body_steps)
    m["body_steps"].push_back({{"time_s", s.time_s}, {"displacement_mm", cfg_detail::vec3_json(s.displacement_mm)}});
  m["bowel"] = json::array();
  for (const auto& b : spec.motion.bowel)
    m["bowel"].push_back({{"center_mm", cfg_detail::vec3_json(b.center_mm)},
                          {"sigma_mm", b.sigma_mm},
                          {"amplitude_mm", cfg_detail::vec3_json(b.amplitude_mm)},
                          {"period_s", b.period_s}});
  j["motion"] = m;
  return j;
}

inline PhantomSpec load_phantom(const std::string& path) {
  return phantom_from_json(cfg_detail::parse_json_file(path));
}

// --- Scanner / grid ------------------------------------------------------------

inline ScannerGeometry scanner_from_json(const json& j) {
  ScannerGeometry g;
  g.ring_radius_mm = cfg_detail::get_or<double>(j, "ring_radius_mm", g.ring_radius_mm);
  g.n_rings = cfg_detail::get_or<int>(j, "n_rings", g.n_rings);
  g.crystals_per_ring = cfg_detail::get_or<int>(j, "crystals_per_ring", g.crystals_per_ring);
  g.axial_pitch_mm = cfg_detail::get_or<double>(j, "axial_pitch_mm", g.axial_pitch_mm);
  g.n_tof_bins = cfg_detail::get_or<int>(j, "n_tof_bins", g.n_tof_bins);
  g.tof_bin_width_mm = cfg_detail::get_or<double>(j, "tof_bin_width_mm", g.tof_bin_width_mm);
  g.tof_kernel_sigma_mm = cfg_detail::get_or<double>(j, "tof_kernel_sigma_mm", g.tof_kernel_sigma_mm);
  g.validate();
  return g;
}

inline VoxelGrid grid_from_json(const json& j) {
  if (!j.contains("dims") || !j.contains("voxel_size_mm"))
    throw Error(Error::Kind::Config, "grid: dims and voxel_size_mm are required");
  const auto& d = j.at("dims");
  if (!d.is_array() || d.size() != 3) throw Error(Error::Kind::Config, "grid: dims must be a 3-array");
  std::array<int, 3> dims{d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
  const Vec3 vs = cfg_detail::vec3_of(j.at("voxel_size_mm"), "grid voxel_size_mm");
  VoxelGrid g = make_centered_grid(dims, vs);
  if (j.contains("origin_mm")) g.origin = cfg_detail::vec3_of(j.at("origin_mm"), "grid origin_mm");
  g.validate();
  return g;
}

// --- Pipeline config -----------------------------------------------------------

struct GatingConfig {
  int n_gates = 5;
  double body_motion_threshold_mm = 3.0;
  double min_dwell_s = 5.0;
  double surrogate_rate_hz = 40.0;
  double surrogate_noise = 0.0;
};

struct DenoiserConfig {
  std::string kind = "gaussian";  // gaussian | gate_match | none
  double fwhm_mm = 12.0;
};

struct PipelineConfig {
  PhantomSpec phantom;
  ScannerGeometry scanner;
  VoxelGrid grid;
  double duration_s = 120.0;
  double half_life_s = 6586.0;
  double randoms_rate_per_s = 0.0;
  double pci_dt_s = 0.5;
  GatingConfig gating;
  DenoiserConfig denoiser;
  RegConfig registration;
  ReconConfig recon;
  bool slrecon_enabled = true;
  SlReconConfig slrecon;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  bool nmc_only = false;

  void validate() const {
    phantom.validate();
    scanner.validate();
    grid.validate();
    registration.validate();
    recon.validate();
    if (!(duration_s > 0.0)) throw Error(Error::Kind::Config, "pipeline: duration must be > 0");
    if (duration_s > phantom.total_duration_s)
      throw Error(Error::Kind::Config, "pipeline: duration exceeds phantom duration");
    if (!(pci_dt_s > 0.0)) throw Error(Error::Kind::Config, "pipeline: PCI dt must be > 0");
    if (denoiser.kind != "gaussian" && denoiser.kind != "gate_match" && denoiser.kind != "none")
      throw Error(Error::Kind::Config, "pipeline: unknown denoiser kind '" + denoiser.kind + "'");
  }
};

inline PipelineConfig pipeline_config_from_json(const json& j, const std::string& base_dir = ".") {
  if (cfg_detail::get_or<int>(j, "schema_version", 1) != 1)
    throw Error(Error::Kind::Config, "pipeline: unsupported schema_version");
  PipelineConfig c;
  if (j.contains("phantom_path")) {
    std::string p = j.at("phantom_path").get<std::string>();
    if (!p.empty() && p.front() != '/') p = base_dir + "/" + p;
    c.phantom = load_phantom(p);
  } else if (j.contains("phantom")) {
    c.phantom = phantom_from_json(j.at("phantom"));
  } else {
    throw Error(Error::Kind::Config, "pipeline: phantom or phantom_path is required");
  }
  if (j.contains("scanner")) c.scanner = scanner_from_json(j.at("scanner"));
  if (!j.contains("grid")) throw Error(Error::Kind::Config, "pipeline: grid is required");
  c.grid = grid_from_json(j.at("grid"));

  if (j.contains("acquisition")) {
    const auto& a = j.at("acquisition");
    c.duration_s = cfg_detail::get_or<double>(a, "duration_s", c.duration_s);
    c.half_life_s = cfg_detail::get_or<double>(a, "half_life_s", c.half_life_s);
    c.randoms_rate_per_s = cfg_detail::get_or<double>(a, "randoms_rate_per_s", c.randoms_rate_per_s);
  }
  if (j.contains("pci")) c.pci_dt_s = cfg_detail::get_or<double>(j.at("pci"), "dt_s", c.pci_dt_s);
  if (j.contains("gating")) {
    const auto& g = j.at("gating");
    c.gating.n_gates = cfg_detail::get_or<int>(g, "n_gates", c.gating.n_gates);
    c.gating.body_motion_threshold_mm =
        cfg_detail::get_or<double>(g, "body_motion_threshold_mm", c.gating.body_motion_threshold_mm);
    c.gating.min_dwell_s = cfg_detail::get_or<double>(g, "min_dwell_s", c.gating.min_dwell_s);
    c.gating.surrogate_rate_hz = cfg_detail::get_or<double>(g, "surrogate_rate_hz", c.gating.surrogate_rate_hz);
    c.gating.surrogate_noise = cfg_detail::get_or<double>(g, "surrogate_noise", c.gating.surrogate_noise);
  }
  if (j.contains("denoiser")) {
    const auto& d = j.at("denoiser");
    c.denoiser.kind = cfg_detail::get_or<std::string>(d, "kind", c.denoiser.kind);
    c.denoiser.fwhm_mm = cfg_detail::get_or<double>(d, "fwhm_mm", c.denoiser.fwhm_mm);
  }
  if (j.contains("registration")) {
    const auto& r = j.at("registration");
    c.registration.beta = cfg_detail::get_or<double>(r, "beta", c.registration.beta);
    c.registration.pyramid_levels = cfg_detail::get_or<int>(r, "pyramid_levels", c.registration.pyramid_levels);
    c.registration.max_iterations = cfg_detail::get_or<int>(r, "max_iterations", c.registration.max_iterations);
    c.registration.tolerance = cfg_detail::get_or<double>(r, "tolerance", c.registration.tolerance);
  }
  if (j.contains("recon")) {
    const auto& r = j.at("recon");
    c.recon.n_iterations = cfg_detail::get_or<int>(r, "n_iterations", c.recon.n_iterations);
    c.recon.n_subsets = cfg_detail::get_or<int>(r, "n_subsets", c.recon.n_subsets);
    c.recon.epsilon = cfg_detail::get_or<double>(r, "epsilon", c.recon.epsilon);
    c.recon.sens_time_bins = cfg_detail::get_or<int>(r, "sens_time_bins", c.recon.sens_time_bins);
    c.recon.sens_lors.sample_target =
        cfg_detail::get_or<std::size_t>(r, "sens_sample_target", c.recon.sens_lors.sample_target);
    c.recon.sens_lors.exhaustive_pair_cap =
        cfg_detail::get_or<std::size_t>(r, "sens_exhaustive_cap", c.recon.sens_lors.exhaustive_pair_cap);
  }
  if (j.contains("slrecon")) {
    const auto& s = j.at("slrecon");
    c.slrecon_enabled = cfg_detail::get_or<bool>(s, "enabled", c.slrecon_enabled);
    c.slrecon.baseline_fwhm_mm = cfg_detail::get_or<double>(s, "baseline_fwhm_mm", c.slrecon.baseline_fwhm_mm);
    c.slrecon.baseline_range_scale =
        cfg_detail::get_or<double>(s, "baseline_range_scale", c.slrecon.baseline_range_scale);
    c.slrecon.long_duration_s = cfg_detail::get_or<double>(s, "long_duration_s", c.slrecon.long_duration_s);
    c.slrecon.short_duration_s = cfg_detail::get_or<double>(s, "short_duration_s", c.slrecon.short_duration_s);
  }
  c.seed = cfg_detail::get_or<std::uint64_t>(j, "seed", c.seed);
  c.output_dir = cfg_detail::get_or<std::string>(j, "output_dir", c.output_dir);
  c.nmc_only = cfg_detail::get_or<bool>(j, "nmc_only", c.nmc_only);
  c.validate();
  return c;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  std::string dir = ".";
  const auto slash = path.find_last_of('/');
  if (slash != std::string::npos) dir = path.substr(0, slash);
  return pipeline_config_from_json(cfg_detail::parse_json_file(path), dir);
}

// Canonical fingerprint of the effective configuration (sorted-key dump).
inline json pipeline_config_to_json(const PipelineConfig& c) {
  json j;
  j["schema_version"] = 1;
  j["phantom"] = phantom_to_json(c.phantom);
  j["scanner"] = {{"ring_radius_mm", c.scanner.ring_radius_mm},
                  {"n_rings", c.scanner.n_rings},
                  {"crystals_per_ring", c.scanner.crystals_per_ring},
                  {"axial_pitch_mm", c.scanner.axial_pitch_mm},
                  {"n_tof_bins", c.scanner.n_tof_bins},
                  {"tof_bin_width_mm", c.scanner.tof_bin_width_mm},
                  {"tof_kernel_sigma_mm", c.scanner.tof_kernel_sigma_mm}};
  j["grid"] = {{"dims", {c.grid.dims[0], c.grid.dims[1], c.grid.dims[2]}},
               {"voxel_size_mm", cfg_detail::vec3_json(c.grid.voxel_size)},
               {"origin_mm", cfg_detail::vec3_json(c.grid.origin)}};
  j["acquisition"] = {{"duration_s", c.duration_s},
                      {"half_life_s", c.half_life_s},
                      {"randoms_rate_per_s", c.randoms_rate_per_s}};
  j["pci"] = {{"dt_s", c.pci_dt_s}};
  j["gating"] = {{"n_gates", c.gating.n_gates},
                 {"body_motion_threshold_mm", c.gating.body_motion_threshold_mm},
                 {"min_dwell_s", c.gating.min_dwell_s},
                 {"surrogate_rate_hz", c.gating.surrogate_rate_hz},
                 {"surrogate_noise", c.gating.surrogate_noise}};
  j["denoiser"] = {{"kind", c.denoiser.kind}, {"fwhm_mm", c.denoiser.fwhm_mm}};
  j["registration"] = {{"beta", c.registration.beta},
                       {"pyramid_levels", c.registration.pyramid_levels},
                       {"max_iterations", c.registration.max_iterations},
                       {"tolerance", c.registration.tolerance}};
  j["recon"] = {{"n_iterations", c.recon.n_iterations},
                {"n_subsets", c.recon.n_subsets},
                {"epsilon", c.recon.epsilon},
                {"sens_time_bins", c.recon.sens_time_bins},
                {"sens_sample_target", c.recon.sens_lors.sample_target},
                {"sens_exhaustive_cap", c.recon.sens_lors.exhaustive_pair_cap}};
  j["slrecon"] = {{"enabled", c.slrecon_enabled},
                  {"baseline_fwhm_mm", c.slrecon.baseline_fwhm_mm},
                  {"baseline_range_scale", c.slrecon.baseline_range_scale}};
  j["seed"] = c.seed;
  j["nmc_only"] = c.nmc_only;
  return j;
}

inline std::string pipeline_config_hash(const PipelineConfig& c) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(pipeline_config_to_json(c).dump())));
  return buf;
}

}  // namespace umcpet
