#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "umcpet/common.hpp"
#include "umcpet/field.hpp"
#include "umcpet/grid.hpp"
#include "umcpet/rng.hpp"
#include "umcpet/volume.hpp"

namespace umcpet {

// Analytic ellipsoid with emission and attenuation properties. Activity is
// an emission density at t=0 (events/s/mm^3); decay is applied by the
// simulator, not here.
struct EllipsoidComponent {
  Vec3 center_mm;
  Vec3 semi_axes_mm{10, 10, 10};
  double activity_per_s_mm3 = 0.0;
  double mu_per_mm = 0.0;

  bool contains(const Vec3& p) const {
    const double u = (p.x - center_mm.x) / semi_axes_mm.x;
    const double v = (p.y - center_mm.y) / semi_axes_mm.y;
    const double w = (p.z - center_mm.z) / semi_axes_mm.z;
    return u * u + v * v + w * w <= 1.0;
  }
  double volume_mm3() const {
    return 4.0 / 3.0 * 3.14159265358979323846 * semi_axes_mm.x * semi_axes_mm.y * semi_axes_mm.z;
  }
};

struct RespiratoryMotion {
  Vec3 amplitude_mm{0, 0, 0};
  double period_s = 4.0;
  double baseline_drift_mm_per_s = 0.0;
};

struct BodyStep {
  double time_s = 0.0;
  Vec3 displacement_mm{0, 0, 0};
};

// Localized periodic deformation: a Gaussian-windowed swirl
//   d(x, t) = sin(2 pi t / period) * g(r) * (amplitude x (x - center)) / sigma
// with g the unit Gaussian of width sigma. The field is divergence-free, so
// the deformation is volume-preserving to first order at any amplitude.
struct BowelMotion {
  Vec3 center_mm{0, 0, 0};
  double sigma_mm = 20.0;
  Vec3 amplitude_mm{0, 0, 0};
  double period_s = 10.0;
};

struct MotionModel {
  RespiratoryMotion respiratory;
  std::vector<BodyStep> body_steps;
  std::vector<BowelMotion> bowel;

  void validate() const {
    if (!(respiratory.period_s > 0.0)) throw Error(Error::Kind::Config, "motion: respiratory period must be > 0");
    for (const auto& b : bowel) {
      if (!(b.period_s > 0.0)) throw Error(Error::Kind::Config, "motion: bowel period must be > 0");
      if (!(b.sigma_mm > 0.0)) throw Error(Error::Kind::Config, "motion: bowel sigma must be > 0");
    }
  }

  // Spatially uniform part (respiratory sinusoid + accumulated body steps).
  Vec3 uniform_displacement(double t_s) const {
    const double phase = std::sin(3.14159265358979323846 * t_s / respiratory.period_s);
    Vec3 d = respiratory.amplitude_mm * (phase * phase);
    if (respiratory.baseline_drift_mm_per_s != 0.0) {
      const double an = respiratory.amplitude_mm.norm();
      const Vec3 dir = an > 0.0 ? respiratory.amplitude_mm / an : Vec3{0, 0, 1};
      d += dir * (respiratory.baseline_drift_mm_per_s * t_s);
    }
    for (const auto& s : body_steps)
      if (t_s >= s.time_s) d += s.displacement_mm;
    return d;
  }

  Vec3 bowel_displacement(const Vec3& x0, double t_s) const {
    Vec3 d{0, 0, 0};
    for (const auto& b : bowel) {
      const Vec3 r = x0 - b.center_mm;
      const double g = std::exp(-0.5 * r.norm2() / (b.sigma_mm * b.sigma_mm));
      const Vec3 swirl{b.amplitude_mm.y * r.z - b.amplitude_mm.z * r.y,
                       b.amplitude_mm.z * r.x - b.amplitude_mm.x * r.z,
                       b.amplitude_mm.x * r.y - b.amplitude_mm.y * r.x};
      d += swirl * (g / b.sigma_mm * std::sin(2.0 * 3.14159265358979323846 * t_s / b.period_s));
    }
    return d;
  }

  // Material point x0 (t=0 space) moves to forward(x0, t) at time t.
  Vec3 forward(const Vec3& x0, double t_s) const {
    return x0 + uniform_displacement(t_s) + bowel_displacement(x0, t_s);
  }

  // Inverse map: where did the time-t point p originate at t=0. The uniform
  // part inverts exactly; bumps by fixed-point iteration (a contraction at
  // diffeomorphic amplitudes).
  Vec3 inverse(const Vec3& p, double t_s) const {
    const Vec3 q = p - uniform_displacement(t_s);
    if (bowel.empty()) return q;
    Vec3 x = q;
    for (int it = 0; it < 12; ++it) {
      const Vec3 x_next = q - bowel_displacement(x, t_s);
      const double delta = (x_next - x).norm();
      x = x_next;
      if (delta < 1e-6) break;
    }
    return x;
  }
};

struct PhantomSpec {
  std::vector<EllipsoidComponent> components;
  MotionModel motion;
  double total_duration_s = 120.0;

  void validate() const {
    for (const auto& c : components) {
      if (c.activity_per_s_mm3 < 0.0) throw Error(Error::Kind::Config, "phantom: activity must be >= 0");
      if (c.mu_per_mm < 0.0) throw Error(Error::Kind::Config, "phantom: mu must be >= 0");
      if (!(c.semi_axes_mm.x > 0.0 && c.semi_axes_mm.y > 0.0 && c.semi_axes_mm.z > 0.0))
        throw Error(Error::Kind::Config, "phantom: semi-axes must be > 0");
    }
    motion.validate();
    if (!(total_duration_s > 0.0)) throw Error(Error::Kind::Config, "phantom: duration must be > 0");
  }

  double total_rate_per_s() const {
    double r = 0.0;
    for (const auto& c : components) r += c.activity_per_s_mm3 * c.volume_mm3();
    return r;
  }

  double activity_at(const Vec3& p, double t_s) const {
    const Vec3 x0 = motion.inverse(p, t_s);
    double a = 0.0;
    for (const auto& c : components)
      if (c.contains(x0)) a += c.activity_per_s_mm3;
    return a;
  }

  double mu_at(const Vec3& p, double t_s) const {
    const Vec3 x0 = motion.inverse(p, t_s);
    double m = 0.0;
    for (const auto& c : components)
      if (c.contains(x0)) m += c.mu_per_mm;
    return m;
  }
};

// Ground-truth field for frame t: displacement from time-t points to their
// t=0 origin, sampled at voxel centers.
inline DeformationField true_deformation(const PhantomSpec& spec, double t_s, const VoxelGrid& grid) {
  if (t_s < 0.0 || t_s > spec.total_duration_s)
    throw Error(Error::Kind::Invalid, "true_deformation: t outside phantom duration");
  DeformationField f(grid);
  std::size_t j = 0;
  for (int iz = 0; iz < grid.dims[2]; ++iz)
    for (int iy = 0; iy < grid.dims[1]; ++iy)
      for (int ix = 0; ix < grid.dims[0]; ++ix, ++j) {
        const Vec3 p = grid.voxel_center(ix, iy, iz);
        f.set(j, spec.motion.inverse(p, t_s) - p);
      }
  return f;
}

// Ground truth between two times: maps t_src-space points into t_ref space
// (composition of the t_src inverse with the t_ref forward map).
inline DeformationField true_deformation_between(const PhantomSpec& spec, double t_src, double t_ref,
                                                 const VoxelGrid& grid) {
  DeformationField f(grid);
  std::size_t j = 0;
  for (int iz = 0; iz < grid.dims[2]; ++iz)
    for (int iy = 0; iy < grid.dims[1]; ++iy)
      for (int ix = 0; ix < grid.dims[0]; ++ix, ++j) {
        const Vec3 p = grid.voxel_center(ix, iy, iz);
        f.set(j, spec.motion.forward(spec.motion.inverse(p, t_src), t_ref) - p);
      }
  return f;
}

// Voxelized snapshots (voxel-center sampling).
inline Volume activity_volume(const PhantomSpec& spec, double t_s, const VoxelGrid& grid) {
  Volume v(grid);
  std::size_t j = 0;
  for (int iz = 0; iz < grid.dims[2]; ++iz)
    for (int iy = 0; iy < grid.dims[1]; ++iy)
      for (int ix = 0; ix < grid.dims[0]; ++ix, ++j)
        v.data[j] = static_cast<float>(spec.activity_at(grid.voxel_center(ix, iy, iz), t_s));
  return v;
}

inline Volume mu_volume(const PhantomSpec& spec, double t_s, const VoxelGrid& grid) {
  Volume v(grid);
  std::size_t j = 0;
  for (int iz = 0; iz < grid.dims[2]; ++iz)
    for (int iy = 0; iy < grid.dims[1]; ++iy)
      for (int ix = 0; ix < grid.dims[0]; ++ix, ++j)
        v.data[j] = static_cast<float>(spec.mu_at(grid.voxel_center(ix, iy, iz), t_s));
  return v;
}

// Amplitude surrogate for gating, sampled at `sample_rate_hz` (40 Hz by
// default): z-component of the respiratory displacement plus optional
// Gaussian noise.
struct SurrogateTrace {
  double sample_rate_hz = 40.0;
  double t0_s = 0.0;
  std::vector<double> samples;

  double time_of(std::size_t k) const { return t0_s + static_cast<double>(k) / sample_rate_hz; }

  double amplitude_at(double t_s) const {
    if (samples.empty()) throw Error(Error::Kind::Invalid, "surrogate: empty trace");
    auto k = static_cast<long>(std::lround((t_s - t0_s) * sample_rate_hz));
    k = std::clamp(k, 0L, static_cast<long>(samples.size()) - 1L);
    return samples[static_cast<std::size_t>(k)];
  }
};

inline SurrogateTrace surrogate(const PhantomSpec& spec, double duration_s, double sample_rate_hz = 40.0,
                                double noise_sigma = 0.0, std::uint64_t seed = 0) {
  if (duration_s > spec.total_duration_s)
    throw Error(Error::Kind::Invalid, "surrogate: duration exceeds phantom duration");
  SurrogateTrace tr;
  tr.sample_rate_hz = sample_rate_hz;
  const auto n = static_cast<std::size_t>(std::ceil(duration_s * sample_rate_hz));
  tr.samples.resize(n);
  Rng rng = Rng::stream(seed, 0x5u);
  const RespiratoryMotion& r = spec.motion.respiratory;
  for (std::size_t k = 0; k < n; ++k) {
    const double t = static_cast<double>(k) / sample_rate_hz;
    const double phase = std::sin(3.14159265358979323846 * t / r.period_s);
    double a = r.amplitude_mm.z * phase * phase;
    if (r.baseline_drift_mm_per_s != 0.0) {
      const double an = r.amplitude_mm.norm();
      const double dir_z = an > 0.0 ? r.amplitude_mm.z / an : 1.0;
      a += dir_z * r.baseline_drift_mm_per_s * t;
    }
    if (noise_sigma > 0.0) a += noise_sigma * rng.normal();
    tr.samples[k] = a;
  }
  return tr;
}

// Finite-difference Jacobian determinant of the forward map, minimum over
// voxel centers; > 0 means the configured amplitudes are diffeomorphic.
inline double min_jacobian_determinant(const PhantomSpec& spec, double t_s, const VoxelGrid& grid) {
  double min_det = std::numeric_limits<double>::infinity();
  const double h = 0.5 * grid.min_voxel_size();
  for (int iz = 0; iz < grid.dims[2]; ++iz)
    for (int iy = 0; iy < grid.dims[1]; ++iy)
      for (int ix = 0; ix < grid.dims[0]; ++ix) {
        const Vec3 p = grid.voxel_center(ix, iy, iz);
        double J[3][3];
        for (int c = 0; c < 3; ++c) {
          Vec3 hp = p, hm = p;
          hp[c] += h;
          hm[c] -= h;
          const Vec3 fp = spec.motion.forward(hp, t_s);
          const Vec3 fm = spec.motion.forward(hm, t_s);
          for (int rIdx = 0; rIdx < 3; ++rIdx) J[rIdx][c] = (fp[rIdx] - fm[rIdx]) / (2.0 * h);
        }
        const double det = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                           J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                           J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
        min_det = std::min(min_det, det);
      }
  return min_det;
}

}  // namespace umcpet
