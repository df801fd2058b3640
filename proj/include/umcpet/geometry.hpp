#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "umcpet/common.hpp"
#include "umcpet/grid.hpp"
#include "umcpet/volume.hpp"

namespace umcpet {

// Cylindrical scanner. Crystal index c maps to (ring, azimuthal) as
// c = ring * crystals_per_ring + azim; the mapping to 3-D face centers is a
// bijection. TOF bins discretize the signed position along the LOR measured
// from its midpoint (positive toward endpoint_b), with the outermost bins
// absorbing the Gaussian tails so the bins partition the whole axis.
struct ScannerGeometry {
  double ring_radius_mm = 120.0;
  int n_rings = 1;
  int crystals_per_ring = 16;
  double axial_pitch_mm = 4.0;
  int n_tof_bins = 13;
  double tof_bin_width_mm = 30.0;
  double tof_kernel_sigma_mm = 37.4;

  void validate() const {
    if (!(ring_radius_mm > 0.0)) throw Error(Error::Kind::Config, "scanner: ring_radius must be > 0");
    if (n_rings < 1 || crystals_per_ring < 2)
      throw Error(Error::Kind::Config, "scanner: need >= 1 ring and >= 2 crystals per ring");
    if (!(axial_pitch_mm > 0.0)) throw Error(Error::Kind::Config, "scanner: axial_pitch must be > 0");
    if (n_tof_bins < 1 || n_tof_bins % 2 == 0)
      throw Error(Error::Kind::Config, "scanner: n_tof_bins must be odd and >= 1");
    if (!(tof_bin_width_mm > 0.0) || !(tof_kernel_sigma_mm > 0.0))
      throw Error(Error::Kind::Config, "scanner: TOF bin width and sigma must be > 0");
  }

  int n_crystals() const { return n_rings * crystals_per_ring; }

  double ring_z(int ring) const { return (ring - 0.5 * (n_rings - 1)) * axial_pitch_mm; }
  double axial_half_extent() const { return 0.5 * n_rings * axial_pitch_mm; }

  Vec3 crystal_position(int crystal) const {
    const int ring = crystal / crystals_per_ring;
    const int azim = crystal % crystals_per_ring;
    const double theta = 2.0 * 3.14159265358979323846 * azim / crystals_per_ring;
    return {ring_radius_mm * std::cos(theta), ring_radius_mm * std::sin(theta), ring_z(ring)};
  }

  // Nearest crystal to a point on (or near) the detector cylinder; returns -1
  // if the axial coordinate falls outside the crystal coverage.
  int nearest_crystal(const Vec3& p) const {
    const double zr = p.z / axial_pitch_mm + 0.5 * (n_rings - 1);
    const int ring = static_cast<int>(std::lround(zr));
    if (ring < 0 || ring >= n_rings) return -1;
    double theta = std::atan2(p.y, p.x);
    const double dphi = 2.0 * 3.14159265358979323846 / crystals_per_ring;
    int azim = static_cast<int>(std::lround(theta / dphi));
    azim %= crystals_per_ring;
    if (azim < 0) azim += crystals_per_ring;
    return ring * crystals_per_ring + azim;
  }

  std::uint64_t hash() const {
    Fnv1a64 h;
    h.update_value(ring_radius_mm);
    h.update_value(n_rings);
    h.update_value(crystals_per_ring);
    h.update_value(axial_pitch_mm);
    h.update_value(n_tof_bins);
    h.update_value(tof_bin_width_mm);
    h.update_value(tof_kernel_sigma_mm);
    return h.digest();
  }
};

struct LOR {
  Vec3 endpoint_a;
  Vec3 endpoint_b;
  int crystal_a = -1;
  int crystal_b = -1;

  double length() const { return (endpoint_b - endpoint_a).norm(); }
};

inline LOR lor_between(const ScannerGeometry& geom, int crystal_a, int crystal_b) {
  if (crystal_a < 0 || crystal_b < 0 || crystal_a >= geom.n_crystals() || crystal_b >= geom.n_crystals())
    throw Error(Error::Kind::Invalid, "lor_between: crystal index out of range");
  if (crystal_a == crystal_b) throw Error(Error::Kind::Invalid, "lor_between: endpoints must differ");
  return {geom.crystal_position(crystal_a), geom.crystal_position(crystal_b), crystal_a, crystal_b};
}

// One nonzero row of the system matrix: (voxel, intersection length) pairs,
// ordered along the ray from endpoint_a. total_length_mm is the full
// endpoint-to-endpoint length; entry_offset_mm the arclength from endpoint_a
// to the first stored segment. The weights sum to the chord length inside
// the grid.
struct RayProfile {
  struct Entry {
    std::uint32_t voxel;
    double weight;
  };
  std::vector<Entry> entries;
  double total_length_mm = 0.0;
  double entry_offset_mm = 0.0;

  bool empty() const { return entries.empty(); }
  double weight_sum() const {
    double s = 0.0;
    for (const auto& e : entries) s += e.weight;
    return s;
  }
};

// Incremental Siddon traversal with intersection-length weights.
inline RayProfile trace_ray(const LOR& lor, const VoxelGrid& grid) {
  RayProfile out;
  const Vec3 a = lor.endpoint_a;
  const Vec3 d = lor.endpoint_b - lor.endpoint_a;
  const double len = d.norm();
  out.total_length_mm = len;
  if (!(len > 0.0)) throw Error(Error::Kind::Invalid, "trace_ray: degenerate LOR");

  const Vec3 lo = grid.box_lo();
  const Vec3 hi = grid.box_hi();

  double alpha_in = 0.0, alpha_out = 1.0;
  for (int ax = 0; ax < 3; ++ax) {
    const double da = d[ax];
    if (std::abs(da) < 1e-12) {
      if (a[ax] < lo[ax] || a[ax] > hi[ax]) return out;  // parallel and outside: miss
      continue;
    }
    const double t1 = (lo[ax] - a[ax]) / da;
    const double t2 = (hi[ax] - a[ax]) / da;
    alpha_in = std::max(alpha_in, std::min(t1, t2));
    alpha_out = std::min(alpha_out, std::max(t1, t2));
  }
  if (alpha_in >= alpha_out) return out;

  // Starting voxel.
  const Vec3 p = a + d * alpha_in;
  int idx[3];
  int step[3];
  double alpha_next_cross[3];
  double alpha_per_voxel[3];
  for (int ax = 0; ax < 3; ++ax) {
    double c = (p[ax] - lo[ax]) / grid.voxel_size[ax];
    int i = static_cast<int>(std::floor(c));
    i = std::clamp(i, 0, grid.dims[ax] - 1);
    idx[ax] = i;
    const double da = d[ax];
    if (std::abs(da) < 1e-12) {
      step[ax] = 0;
      alpha_next_cross[ax] = std::numeric_limits<double>::infinity();
      alpha_per_voxel[ax] = std::numeric_limits<double>::infinity();
    } else if (da > 0.0) {
      step[ax] = 1;
      const double boundary = lo[ax] + (i + 1) * grid.voxel_size[ax];
      alpha_next_cross[ax] = (boundary - a[ax]) / da;
      alpha_per_voxel[ax] = grid.voxel_size[ax] / da;
    } else {
      step[ax] = -1;
      const double boundary = lo[ax] + i * grid.voxel_size[ax];
      alpha_next_cross[ax] = (boundary - a[ax]) / da;
      alpha_per_voxel[ax] = -grid.voxel_size[ax] / da;
    }
  }

  out.entry_offset_mm = alpha_in * len;
  out.entries.reserve(static_cast<std::size_t>(grid.dims[0] + grid.dims[1] + grid.dims[2]));

  double alpha_cur = alpha_in;
  for (;;) {
    int ax_min = 0;
    if (alpha_next_cross[1] < alpha_next_cross[ax_min]) ax_min = 1;
    if (alpha_next_cross[2] < alpha_next_cross[ax_min]) ax_min = 2;
    const double alpha_next = std::min(alpha_next_cross[ax_min], alpha_out);

    const double w = (alpha_next - alpha_cur) * len;
    if (w > 0.0) {
      out.entries.push_back({static_cast<std::uint32_t>(grid.flat(idx[0], idx[1], idx[2])), w});
    }
    if (alpha_next >= alpha_out) break;

    alpha_cur = alpha_next;
    idx[ax_min] += step[ax_min];
    if (idx[ax_min] < 0 || idx[ax_min] >= grid.dims[ax_min]) break;
    alpha_next_cross[ax_min] += alpha_per_voxel[ax_min];
  }
  return out;
}

// --- TOF weighting -----------------------------------------------------------

// The detector response for bin tau is the Gaussian measurement kernel
// (sigma) integrated over the bin's top-hat. End bins extend to +-infinity,
// so summing over all bins reproduces the unweighted profile exactly.
namespace detail {

// Antiderivative of the standard normal CDF: x*Phi(x) + phi(x).
inline double phi_antideriv(double x) { return x * norm_cdf(x) + norm_pdf(x); }

// Integral over [u1, u2] of Phi((edge - u) / sigma) du; edge may be +-inf.
inline double cdf_segment_integral(double edge, double u1, double u2, double sigma) {
  if (edge == std::numeric_limits<double>::infinity()) return u2 - u1;
  if (edge == -std::numeric_limits<double>::infinity()) return 0.0;
  const double x1 = (edge - u1) / sigma;
  const double x2 = (edge - u2) / sigma;
  return sigma * (phi_antideriv(x1) - phi_antideriv(x2));
}

}  // namespace detail

// Lower edge of bin tau relative to the LOR midpoint; tau may be 0..n (the
// n-th edge is the upper edge of the last bin). Outermost edges are +-inf.
inline double tof_bin_edge(const ScannerGeometry& geom, int tau) {
  const int half = (geom.n_tof_bins - 1) / 2;
  if (tau <= 0) return -std::numeric_limits<double>::infinity();
  if (tau >= geom.n_tof_bins) return std::numeric_limits<double>::infinity();
  return (tau - half - 0.5) * geom.tof_bin_width_mm;
}

// Draws/assigns the bin for a measured position along the LOR (mm from the
// midpoint); tails are folded into the end bins.
inline int tof_bin_of_position(const ScannerGeometry& geom, double u_mm) {
  const int half = (geom.n_tof_bins - 1) / 2;
  int rel = static_cast<int>(std::lround(u_mm / geom.tof_bin_width_mm));
  rel = std::clamp(rel, -half, half);
  return rel + half;
}

// Per-voxel probability mass of `tof_bin` integrated over each Siddon
// segment. Entries whose weight falls below 1e-12 are dropped.
inline RayProfile tof_weight(const RayProfile& profile, const LOR& lor, int tof_bin,
                             const ScannerGeometry& geom) {
  (void)lor;
  if (tof_bin < 0 || tof_bin >= geom.n_tof_bins)
    throw Error(Error::Kind::Invalid, "tof_weight: tof_bin out of range");
  RayProfile out;
  out.total_length_mm = profile.total_length_mm;
  out.entry_offset_mm = profile.entry_offset_mm;
  if (profile.empty()) return out;

  const double lo_edge = tof_bin_edge(geom, tof_bin);
  const double hi_edge = tof_bin_edge(geom, tof_bin + 1);
  const double sigma = geom.tof_kernel_sigma_mm;
  const double mid = 0.5 * profile.total_length_mm;

  out.entries.reserve(profile.entries.size());
  double u1 = profile.entry_offset_mm - mid;
  for (const auto& e : profile.entries) {
    const double u2 = u1 + e.weight;
    const double w =
        detail::cdf_segment_integral(hi_edge, u1, u2, sigma) - detail::cdf_segment_integral(lo_edge, u1, u2, sigma);
    if (w >= 1e-12) out.entries.push_back({e.voxel, w});
    u1 = u2;
  }
  return out;
}

// exp(-integral of mu along the LOR), mu in mm^-1 on its own grid.
inline double attenuation_factor(const LOR& lor, const Volume& mu_map) {
  const RayProfile profile = trace_ray(lor, mu_map.grid);
  double line_integral = 0.0;
  for (const auto& e : profile.entries) {
    const double mu = mu_map.data[e.voxel];
    if (mu < 0.0) throw Error(Error::Kind::Invalid, "attenuation_factor: negative mu");
    line_integral += mu * e.weight;
  }
  return std::exp(-line_integral);
}

}  // namespace umcpet
