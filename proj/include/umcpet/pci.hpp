#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "umcpet/common.hpp"
#include "umcpet/geometry.hpp"
#include "umcpet/listmode.hpp"
#include "umcpet/parallel.hpp"
#include "umcpet/rng.hpp"
#include "umcpet/volume.hpp"

namespace umcpet {

struct PciSeries {
  std::vector<Volume> frames;
  double dt_s = 0.5;
  double t0_s = 0.0;

  int n_frames() const { return static_cast<int>(frames.size()); }
  double frame_start(int i) const { return t0_s + i * dt_s; }
  double frame_mid(int i) const { return t0_s + (i + 0.5) * dt_s; }
};

struct SensitivityOptions {
  // All crystal pairs are enumerated when their number is at most
  // `exhaustive_pair_cap`; otherwise a stratified random sample of
  // ~`sample_target` LORs (equal share per crystal) is used.
  std::size_t exhaustive_pair_cap = 2'000'000;
  std::size_t sample_target = 1'000'000;
  std::uint64_t seed = 0;
};

// Enumerates the LOR set used for sensitivity accumulation; deterministic.
inline std::vector<std::pair<int, int>> sensitivity_lor_sample(const ScannerGeometry& geom,
                                                               const SensitivityOptions& opts = {}) {
  const int n = geom.n_crystals();
  const std::size_t all_pairs = static_cast<std::size_t>(n) * (n - 1) / 2;
  std::vector<std::pair<int, int>> lors;
  if (all_pairs <= opts.exhaustive_pair_cap) {
    lors.reserve(all_pairs);
    for (int a = 0; a < n; ++a)
      for (int b = a + 1; b < n; ++b) lors.emplace_back(a, b);
    return lors;
  }
  const std::size_t per_crystal = (opts.sample_target + n - 1) / static_cast<std::size_t>(n);
  lors.reserve(per_crystal * static_cast<std::size_t>(n));
  for (int a = 0; a < n; ++a) {
    Rng rng = Rng::stream(opts.seed, 0x53454e53ULL, static_cast<std::uint64_t>(a));
    for (std::size_t s = 0; s < per_crystal; ++s) {
      int b = a;
      while (b == a) b = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)));
      lors.emplace_back(a, b);
    }
  }
  return lors;
}

// Q_j = sum over LORs of the Siddon weights (no TOF, no corrections).
inline Volume sensitivity_static(const ScannerGeometry& geom, const VoxelGrid& grid,
                                 const SensitivityOptions& opts = {}) {
  const auto lors = sensitivity_lor_sample(geom, opts);
  const std::size_t n_chunks = chunk_count(lors.size(), 4096);
  std::vector<std::vector<double>> partial(n_chunks);
  for_chunks(lors.size(), n_chunks, [&](std::size_t c, std::size_t b, std::size_t e) {
    auto& acc = partial[c];
    acc.assign(grid.n_voxels(), 0.0);
    for (std::size_t i = b; i < e; ++i) {
      const LOR lor = lor_between(geom, lors[i].first, lors[i].second);
      const RayProfile prof = trace_ray(lor, grid);
      for (const auto& entry : prof.entries) acc[entry.voxel] += entry.weight;
    }
  });
  Volume q(grid);
  std::vector<double> total(grid.n_voxels(), 0.0);
  for (const auto& acc : partial)
    if (!acc.empty())
      for (std::size_t j = 0; j < total.size(); ++j) total[j] += acc[j];
  for (std::size_t j = 0; j < total.size(); ++j) q.data[j] = static_cast<float>(total[j]);
  return q;
}

// Voxels below `rel_floor * max(Q)` are treated as zero-sensitivity and
// excluded from every later division.
inline std::vector<std::uint8_t> sensitivity_mask(const Volume& q, double rel_floor = 1e-6) {
  const double floor_value = rel_floor * q.max_value();
  std::vector<std::uint8_t> mask(q.size());
  for (std::size_t j = 0; j < q.size(); ++j) mask[j] = q.data[j] > floor_value ? 1 : 0;
  return mask;
}

// Back-projection of one ultra-short frame with sensitivity correction:
// P_j = sum_k c_{k,j,tau_k} L_k / Q_j over the events in [t0, t1).
inline Volume pci_frame(const EventStream& stream, std::size_t begin, std::size_t end, double t0_s,
                        double t1_s, const ScannerGeometry& geom, const VoxelGrid& grid, const Volume& q,
                        const std::vector<std::uint8_t>& q_mask) {
  if (q.grid != grid) throw Error(Error::Kind::Invalid, "pci_frame: Q grid mismatch");
  std::vector<double> acc(grid.n_voxels(), 0.0);
  // Window membership uses the same millisecond quantization as
  // EventStream::window so slice and check can never disagree.
  const auto lo_ms = static_cast<std::uint64_t>(std::max(0.0, t0_s) * 1000.0);
  const auto hi_ms = static_cast<std::uint64_t>(std::max(0.0, t1_s) * 1000.0);
  for (std::size_t k = begin; k < end; ++k) {
    const auto& ev = stream.events[k];
    const double t = ev.time_ms * 1e-3;
    if (ev.time_ms < lo_ms || ev.time_ms >= hi_ms)
      throw Error(Error::Kind::Invalid, "pci_frame: event outside frame window");
    const LOR lor = lor_between(geom, static_cast<int>(ev.crystal_a), static_cast<int>(ev.crystal_b));
    const RayProfile prof = tof_weight(trace_ray(lor, grid), lor, ev.tof_bin, geom);
    const double decay = decay_factor(t, stream.half_life_s);
    for (const auto& entry : prof.entries) acc[entry.voxel] += entry.weight * decay;
  }
  Volume p(grid);
  for (std::size_t j = 0; j < acc.size(); ++j)
    p.data[j] = q_mask[j] ? static_cast<float>(acc[j] / q.data[j]) : 0.0f;
  return p;
}

// Partitions [0, duration) into ceil(duration / dt) windows; frames are
// independent, so the loop is frame-parallel and deterministic.
inline PciSeries pci_series(const EventStream& stream, double dt_s, const ScannerGeometry& geom,
                            const VoxelGrid& grid, const Volume& q, double q_mask_rel_floor = 1e-6) {
  if (!(dt_s > 0.0)) throw Error(Error::Kind::Invalid, "pci_series: dt must be > 0");
  PciSeries series;
  series.dt_s = dt_s;
  const int n_frames = static_cast<int>(std::ceil(stream.duration_s / dt_s));
  series.frames.assign(static_cast<std::size_t>(n_frames), Volume{});
  const auto mask = sensitivity_mask(q, q_mask_rel_floor);
  for_chunks(static_cast<std::size_t>(n_frames), static_cast<std::size_t>(n_frames),
             [&](std::size_t f, std::size_t, std::size_t) {
               const double t0 = f * dt_s;
               const double t1 = std::min(stream.duration_s, t0 + dt_s);
               const auto [b, e] = stream.window(t0, t1);
               series.frames[f] = pci_frame(stream, b, e, t0, t1, geom, grid, q, mask);
             });
  return series;
}

}  // namespace umcpet
