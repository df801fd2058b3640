#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "umcpet/common.hpp"
#include "umcpet/field.hpp"
#include "umcpet/geometry.hpp"
#include "umcpet/io.hpp"
#include "umcpet/listmode.hpp"
#include "umcpet/parallel.hpp"
#include "umcpet/pci.hpp"
#include "umcpet/volume.hpp"

namespace umcpet {

struct ReconConfig {
  int n_iterations = 2;
  int n_subsets = 21;          // events are assigned by index modulo n_subsets
  double epsilon = 1e-9;       // positivity floor for denominators
  int sens_time_bins = 240;    // n_T of the motion-aware sensitivity
  SensitivityOptions sens_lors{};  // LOR sample for sensitivity accumulation
  std::string checkpoint_dir;  // per-iteration snapshots when nonempty
  std::string config_hash;     // recorded in checkpoint metadata

  void validate() const {
    if (n_iterations < 1) throw Error(Error::Kind::Config, "recon: iterations must be >= 1");
    if (n_subsets < 1) throw Error(Error::Kind::Config, "recon: subsets must be >= 1");
    if (!(epsilon > 0.0)) throw Error(Error::Kind::Config, "recon: epsilon must be > 0");
    if (sens_time_bins < 1) throw Error(Error::Kind::Config, "recon: sensitivity time bins must be >= 1");
  }
};

namespace recon_detail {

inline bool ray_box_clip(const Vec3& a, const Vec3& d, const VoxelGrid& grid, double& alpha_in,
                         double& alpha_out) {
  const Vec3 lo = grid.box_lo();
  const Vec3 hi = grid.box_hi();
  alpha_in = 0.0;
  alpha_out = 1.0;
  for (int ax = 0; ax < 3; ++ax) {
    const double da = d[ax];
    if (std::abs(da) < 1e-12) {
      if (a[ax] < lo[ax] || a[ax] > hi[ax]) return false;
      continue;
    }
    const double t1 = (lo[ax] - a[ax]) / da;
    const double t2 = (hi[ax] - a[ax]) / da;
    alpha_in = std::max(alpha_in, std::min(t1, t2));
    alpha_out = std::min(alpha_out, std::max(t1, t2));
  }
  return alpha_in < alpha_out;
}

// TOF probability mass of `tof_bin` for a point at u (mm from LOR midpoint);
// pass tof_bin < 0 for the unweighted (all-bin) case.
inline double tof_point_mass(const ScannerGeometry& geom, int tof_bin, double u) {
  if (tof_bin < 0) return 1.0;
  const double lo = tof_bin_edge(geom, tof_bin);
  const double hi = tof_bin_edge(geom, tof_bin + 1);
  const double s = geom.tof_kernel_sigma_mm;
  const double p_hi = hi == std::numeric_limits<double>::infinity() ? 1.0 : norm_cdf((hi - u) / s);
  const double p_lo = lo == -std::numeric_limits<double>::infinity() ? 0.0 : norm_cdf((lo - u) / s);
  return p_hi - p_lo;
}

// Samples the straight TOF-weighted ray at half-voxel steps, maps every
// sample through the frame's t->ref field, and deposits the sample weight by
// trilinear splatting. `emit(voxel, weight)` receives raw (possibly
// duplicated) contributions.
template <typename Emit>
void splat_deformed_ray(const LOR& lor, int tof_bin, const DeformationField* field,
                        const VoxelGrid& grid, const ScannerGeometry& geom, Emit&& emit) {
  const Vec3 a = lor.endpoint_a;
  const Vec3 d = lor.endpoint_b - lor.endpoint_a;
  double alpha_in, alpha_out;
  if (!ray_box_clip(a, d, grid, alpha_in, alpha_out)) return;
  const double len = d.norm();
  const double chord = (alpha_out - alpha_in) * len;
  const double step = 0.5 * grid.min_voxel_size();
  const int n = std::max(1, static_cast<int>(std::ceil(chord / step)));
  const double h = chord / n;
  const double mid = 0.5 * len;

  const int nx = grid.dims[0], ny = grid.dims[1], nz = grid.dims[2];
  for (int i = 0; i < n; ++i) {
    const double s = alpha_in * len + (i + 0.5) * h;
    const double w = h * tof_point_mass(geom, tof_bin, s - mid);
    if (w < 1e-14) continue;
    Vec3 p = a + d * (s / len);
    if (field != nullptr) p += field->sample_world(p);
    const Vec3 c = grid.world_to_voxel(p);
    if (c.x < 0.0 || c.y < 0.0 || c.z < 0.0 || c.x > nx - 1 || c.y > ny - 1 || c.z > nz - 1)
      continue;  // mapped outside the grid: dropped
    const int jx = std::min(static_cast<int>(c.x), std::max(nx - 2, 0));
    const int jy = std::min(static_cast<int>(c.y), std::max(ny - 2, 0));
    const int jz = std::min(static_cast<int>(c.z), std::max(nz - 2, 0));
    const double fx = c.x - jx, fy = c.y - jy, fz = c.z - jz;
    const int sx = nx > 1 ? 1 : 0, sy = ny > 1 ? 1 : 0, sz = nz > 1 ? 1 : 0;
    const double wx[2] = {1.0 - fx, fx};
    const double wy[2] = {1.0 - fy, fy};
    const double wz[2] = {1.0 - fz, fz};
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const double ww = w * wx[dx] * wy[dy] * wz[dz];
          if (ww <= 0.0) continue;
          emit(grid.flat(jx + dx * sx, jy + dy * sy, jz + dz * sz), ww);
        }
  }
}

}  // namespace recon_detail

// Row of the deformed system matrix c^{t->ref} for one LOR and TOF bin:
// entries are unique, in ascending voxel order.
inline RayProfile deform_profile(const LOR& lor, int tof_bin, const DeformationField& field,
                                 const VoxelGrid& grid, const ScannerGeometry& geom) {
  if (tof_bin < 0 || tof_bin >= geom.n_tof_bins)
    throw Error(Error::Kind::Invalid, "deform_profile: tof_bin out of range");
  std::vector<std::pair<std::uint32_t, double>> raw;
  raw.reserve(512);
  recon_detail::splat_deformed_ray(lor, tof_bin, &field, grid, geom,
                                   [&](std::size_t j, double w) { raw.emplace_back(static_cast<std::uint32_t>(j), w); });
  std::sort(raw.begin(), raw.end(),
            [](const auto& x, const auto& y) { return x.first < y.first; });
  RayProfile out;
  out.total_length_mm = lor.length();
  out.entries.reserve(raw.size());
  for (const auto& [j, w] : raw) {
    if (!out.entries.empty() && out.entries.back().voxel == j)
      out.entries.back().weight += w;
    else
      out.entries.push_back({j, w});
  }
  return out;
}

struct OsemDiagnostics {
  std::size_t events_used = 0;
  std::size_t events_skipped_zero_denominator = 0;
  std::size_t events_outside_fov = 0;
};

// List-mode TOF-OSEM at the reference location. With a motion series the
// system matrix is traced along curves of response; a null or identity
// series takes the exact straight-ray path, so the no-motion-correction
// reconstruction and the identity-motion reconstruction are the same code
// path (and bitwise equal). The update follows
//   lambda_j <- lambda_j / Q_j^(subset) * sum_k c_kj L A N / (T (LAN fwd + R + S))
// with rates R, S converted to expected counts by the acquisition length T.
inline Volume osem(const EventStream& stream, const CorrectionFactors& factors, const MotionSeries* motion,
                   const Volume& q, const ScannerGeometry& geom, const ReconConfig& cfg,
                   OsemDiagnostics* diag_out = nullptr) {
  cfg.validate();
  const VoxelGrid& grid = q.grid;
  const std::size_t n_events = stream.count();
  if (factors.decay.size() != n_events || factors.attenuation.size() != n_events ||
      factors.normalization.size() != n_events)
    throw Error(Error::Kind::Invalid, "osem: correction factors do not match event count");

  const bool deformed = motion != nullptr && !motion->is_identity();
  if (deformed) {
    if (motion->fields.front().grid != grid) throw Error(Error::Kind::Invalid, "osem: motion grid mismatch");
    if (motion->duration_s() + 1e-9 < stream.duration_s)
      throw Error(Error::Kind::Invalid, "osem: motion series does not cover the acquisition");
  }

  // FOV mask and masked inverse sensitivity (scaled for balanced subsets).
  const double q_floor = 1e-6 * q.max_value();
  std::vector<double> inv_q(grid.n_voxels(), 0.0);
  std::vector<float> lambda(grid.n_voxels(), 0.0f);
  {
    std::size_t j = 0;
    for (int iz = 0; iz < grid.dims[2]; ++iz)
      for (int iy = 0; iy < grid.dims[1]; ++iy)
        for (int ix = 0; ix < grid.dims[0]; ++ix, ++j)
          if (q.data[j] > q_floor && grid.in_fov_cylinder(grid.voxel_center(ix, iy, iz))) {
            inv_q[j] = static_cast<double>(cfg.n_subsets) / q.data[j];
            lambda[j] = 1.0f;
          }
  }

  const double T = stream.duration_s;
  const double additive = T * (factors.randoms_per_lor_bin_per_s + factors.scatter_per_lor_bin_per_s);

  OsemDiagnostics diag;

  // Fixed chunking bounds the per-chunk accumulator memory and keeps the
  // merge order independent of the thread count.
  constexpr std::size_t kAccumChunks = 8;
  std::vector<std::vector<double>> partial(kAccumChunks);
  std::vector<OsemDiagnostics> partial_diag(kAccumChunks);
  std::vector<double> numerator(grid.n_voxels());
  std::vector<std::pair<std::uint32_t, double>> scratch;  // reused by single-thread path

  for (int iteration = 0; iteration < cfg.n_iterations; ++iteration) {
    for (int subset = 0; subset < cfg.n_subsets; ++subset) {
      const std::size_t subset_size = n_events / cfg.n_subsets + (static_cast<std::size_t>(subset) <
                                                                  n_events % cfg.n_subsets ? 1 : 0);
      if (subset_size == 0) continue;

      for_chunks(subset_size, kAccumChunks, [&](std::size_t c, std::size_t b, std::size_t e) {
        auto& acc = partial[c];
        acc.assign(grid.n_voxels(), 0.0);
        auto& d = partial_diag[c];
        d = {};
        std::vector<std::pair<std::uint32_t, double>> row;
        row.reserve(1024);
        for (std::size_t s = b; s < e; ++s) {
          const std::size_t k = s * cfg.n_subsets + static_cast<std::size_t>(subset);
          const auto& ev = stream.events[k];
          const LOR lor = lor_between(geom, static_cast<int>(ev.crystal_a), static_cast<int>(ev.crystal_b));

          row.clear();
          if (deformed) {
            const DeformationField& f = motion->field_at_time(ev.time_ms * 1e-3);
            recon_detail::splat_deformed_ray(lor, ev.tof_bin, &f, grid, geom,
                                             [&](std::size_t j, double w) { row.emplace_back(static_cast<std::uint32_t>(j), w); });
          } else {
            const RayProfile prof = tof_weight(trace_ray(lor, grid), lor, ev.tof_bin, geom);
            for (const auto& entry : prof.entries) row.emplace_back(entry.voxel, entry.weight);
          }
          if (row.empty()) {
            ++d.events_outside_fov;
            continue;
          }

          const double lan = static_cast<double>(factors.decay[k]) *
                             static_cast<double>(factors.attenuation[k]) *
                             static_cast<double>(factors.normalization[k]);
          double fwd = 0.0;
          for (const auto& [j, w] : row) fwd += w * lambda[j];
          const double denom = T * (lan * fwd + additive);
          if (denom <= cfg.epsilon) {
            ++d.events_skipped_zero_denominator;
            continue;
          }
          const double scale = lan / denom;
          for (const auto& [j, w] : row) acc[j] += w * scale;
          ++d.events_used;
        }
      });

      std::fill(numerator.begin(), numerator.end(), 0.0);
      for (std::size_t c = 0; c < kAccumChunks; ++c) {
        if (partial[c].empty()) continue;
        for (std::size_t j = 0; j < numerator.size(); ++j) numerator[j] += partial[c][j];
        diag.events_used += partial_diag[c].events_used;
        diag.events_skipped_zero_denominator += partial_diag[c].events_skipped_zero_denominator;
        diag.events_outside_fov += partial_diag[c].events_outside_fov;
        partial[c].clear();
      }

      for (std::size_t j = 0; j < numerator.size(); ++j)
        lambda[j] = static_cast<float>(lambda[j] * numerator[j] * inv_q[j]);
    }

    if (!cfg.checkpoint_dir.empty()) {
      Volume snap(grid);
      snap.data = lambda;
      std::map<std::string, std::string> meta{{"iteration", std::to_string(iteration + 1)},
                                              {"subsets", std::to_string(cfg.n_subsets)}};
      if (!cfg.config_hash.empty()) meta["config_hash"] = cfg.config_hash;
      write_volume(snap, cfg.checkpoint_dir + "/checkpoint_iter" + std::to_string(iteration + 1) + ".vol",
                   "activity", meta);
    }
  }

  if (diag_out != nullptr) *diag_out = diag;
  Volume out(grid);
  out.data = std::move(lambda);
  return out;
}

// Eq.-6-style motion-aware sensitivity: the acquisition is divided into
// n_T time bins; each bin back-projects the LOR sample along its curves of
// response with the bin's decay factor and the static attenuation of each
// LOR. Summation over TOF bins is exact (the bins partition the axis), so
// the unweighted splat already carries it.
inline Volume sensitivity_mc(const ScannerGeometry& geom, const VoxelGrid& grid, const MotionSeries& motion,
                             double duration_s, const ReconConfig& cfg, const Volume* mu_map = nullptr,
                             double half_life_s = 0.0,
                             const std::vector<std::pair<int, int>>* lor_override = nullptr) {
  cfg.validate();
  const std::vector<std::pair<int, int>> lors =
      lor_override != nullptr ? *lor_override : sensitivity_lor_sample(geom, cfg.sens_lors);

  std::vector<double> atten(lors.size(), 1.0);
  if (mu_map != nullptr) {
    for_chunks(lors.size(), [&](std::size_t, std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i)
        atten[i] = attenuation_factor(lor_between(geom, lors[i].first, lors[i].second), *mu_map);
    });
  }

  const int n_t = cfg.sens_time_bins;
  constexpr std::size_t kAccumChunks = 8;
  std::vector<std::vector<double>> partial(kAccumChunks);
  for_chunks(static_cast<std::size_t>(n_t), kAccumChunks, [&](std::size_t c, std::size_t b, std::size_t e) {
    auto& acc = partial[c];
    acc.assign(grid.n_voxels(), 0.0);
    for (std::size_t tb = b; tb < e; ++tb) {
      const double t_mid = (static_cast<double>(tb) + 0.5) * duration_s / n_t;
      const DeformationField& field = motion.field_at_time(t_mid);
      const double decay = half_life_s > 0.0 ? decay_factor(t_mid, half_life_s) : 1.0;
      for (std::size_t i = 0; i < lors.size(); ++i) {
        const LOR lor = lor_between(geom, lors[i].first, lors[i].second);
        const double scale = decay * atten[i];
        recon_detail::splat_deformed_ray(lor, -1, &field, grid, geom,
                                         [&](std::size_t j, double w) { acc[j] += scale * w; });
      }
    }
  });

  std::vector<double> total(grid.n_voxels(), 0.0);
  for (const auto& acc : partial)
    if (!acc.empty())
      for (std::size_t j = 0; j < total.size(); ++j) total[j] += acc[j];

  Volume q(grid);
  for (std::size_t j = 0; j < q.size(); ++j) q.data[j] = static_cast<float>(total[j] / n_t);
  return q;
}

// Straight-ray sensitivity with attenuation and mean-decay factors, the
// matched divisor for reconstructions without motion compensation.
inline Volume sensitivity_nmc(const ScannerGeometry& geom, const VoxelGrid& grid,
                              const Volume* mu_map = nullptr, double half_life_s = 0.0,
                              double duration_s = 0.0, const SensitivityOptions& opts = {}) {
  const auto lors = sensitivity_lor_sample(geom, opts);
  double mean_decay = 1.0;
  if (half_life_s > 0.0 && duration_s > 0.0) {
    const double a = std::log(2.0) / half_life_s;  // time-average of 2^(t/T12)
    mean_decay = (std::exp(a * duration_s) - 1.0) / (a * duration_s);
  }
  const std::size_t n_chunks = chunk_count(lors.size(), 4096);
  std::vector<std::vector<double>> partial(n_chunks);
  for_chunks(lors.size(), n_chunks, [&](std::size_t c, std::size_t b, std::size_t e) {
    auto& acc = partial[c];
    acc.assign(grid.n_voxels(), 0.0);
    for (std::size_t i = b; i < e; ++i) {
      const LOR lor = lor_between(geom, lors[i].first, lors[i].second);
      const RayProfile prof = trace_ray(lor, grid);
      if (prof.empty()) continue;
      const double a = mu_map != nullptr ? attenuation_factor(lor, *mu_map) : 1.0;
      for (const auto& entry : prof.entries) acc[entry.voxel] += a * entry.weight;
    }
  });
  Volume q(grid);
  std::vector<double> total(grid.n_voxels(), 0.0);
  for (const auto& acc : partial)
    if (!acc.empty())
      for (std::size_t j = 0; j < total.size(); ++j) total[j] += acc[j];
  for (std::size_t j = 0; j < q.size(); ++j) q.data[j] = static_cast<float>(total[j] * mean_decay);
  return q;
}

}  // namespace umcpet
