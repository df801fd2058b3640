#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "umcpet/common.hpp"
#include "umcpet/field.hpp"
#include "umcpet/pci.hpp"
#include "umcpet/volume.hpp"

namespace umcpet {

inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(Error::Kind::Invalid, "percentile: empty input");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * (values.size() - 1);
  const auto i0 = static_cast<std::size_t>(pos);
  const auto i1 = std::min(i0 + 1, values.size() - 1);
  const double f = pos - i0;
  return values[i0] * (1.0 - f) + values[i1] * f;
}

// Mean magnitude of the central-difference gradient (voxel units) of the
// volume normalized to [0,1] by its 99.9th percentile, averaged over the
// mask. Scale-invariant by construction; a constant volume scores 0.
inline double mean_normalized_gradient(const Volume& v, const std::vector<std::uint8_t>& mask) {
  if (mask.size() != v.size()) throw Error(Error::Kind::Invalid, "mean_normalized_gradient: mask size mismatch");
  std::size_t mask_count = 0;
  for (auto m : mask) mask_count += m ? 1 : 0;
  if (mask_count == 0) throw Error(Error::Kind::Invalid, "mean_normalized_gradient: empty mask");

  std::vector<double> values(v.data.begin(), v.data.end());
  const double p = percentile(values, 0.999);
  if (!(p > 0.0)) return 0.0;

  auto normed = [&](int ix, int iy, int iz) {
    return std::clamp(static_cast<double>(v.at(ix, iy, iz)) / p, 0.0, 1.0);
  };
  auto diff = [&](int i, int n, auto&& value_at) {
    // central difference where possible, one-sided at the faces
    if (n == 1) return 0.0;
    if (i == 0) return value_at(1) - value_at(0);
    if (i == n - 1) return value_at(n - 1) - value_at(n - 2);
    return 0.5 * (value_at(i + 1) - value_at(i - 1));
  };

  const auto& d = v.grid.dims;
  double acc = 0.0;
  std::size_t j = 0;
  for (int iz = 0; iz < d[2]; ++iz)
    for (int iy = 0; iy < d[1]; ++iy)
      for (int ix = 0; ix < d[0]; ++ix, ++j) {
        if (!mask[j]) continue;
        const double gx = diff(ix, d[0], [&](int i) { return normed(i, iy, iz); });
        const double gy = diff(iy, d[1], [&](int i) { return normed(ix, i, iz); });
        const double gz = diff(iz, d[2], [&](int i) { return normed(ix, iy, i); });
        acc += std::sqrt(gx * gx + gy * gy + gz * gz);
      }
  return acc / static_cast<double>(mask_count);
}

inline std::vector<std::uint8_t> full_mask(const Volume& v) {
  return std::vector<std::uint8_t>(v.size(), 1);
}

// Body mask: voxels above `rel` of the volume's maximum.
inline std::vector<std::uint8_t> threshold_mask(const Volume& v, double rel = 0.05) {
  const float thr = static_cast<float>(rel) * v.max_value();
  std::vector<std::uint8_t> m(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) m[j] = v.data[j] > thr ? 1 : 0;
  return m;
}

// Two-sided Wilcoxon signed-rank test (normal approximation with tie and
// continuity corrections); zero differences are dropped.
inline double wilcoxon_signed_rank_p(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error(Error::Kind::Invalid, "wilcoxon: length mismatch");
  struct D {
    double mag;
    int sign;
  };
  std::vector<D> diffs;
  diffs.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d != 0.0) diffs.push_back({std::abs(d), d > 0.0 ? 1 : -1});
  }
  const std::size_t n = diffs.size();
  if (n == 0) return 1.0;
  std::sort(diffs.begin(), diffs.end(), [](const D& x, const D& y) { return x.mag < y.mag; });

  double w_plus = 0.0;
  double tie_correction = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t k = i + 1;
    while (k < n && diffs[k].mag == diffs[i].mag) ++k;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(k));
    const auto t = static_cast<double>(k - i);
    if (t > 1.0) tie_correction += t * t * t - t;
    for (std::size_t r = i; r < k; ++r)
      if (diffs[r].sign > 0) w_plus += avg_rank;
    i = k;
  }

  const double nn = static_cast<double>(n);
  const double mean = nn * (nn + 1.0) / 4.0;
  const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_correction / 48.0;
  if (!(var > 0.0)) return 1.0;
  double z = w_plus - mean;
  z -= z > 0 ? 0.5 : (z < 0 ? -0.5 : 0.0);  // continuity correction
  z /= std::sqrt(var);
  return 2.0 * (1.0 - norm_cdf(std::abs(z)));
}

struct DeltaCodResult {
  std::vector<double> times_s;
  std::vector<double> before_mm;  // ||COD_t - COD_ref|| per frame
  std::vector<double> after_mm;   // same, after motion correction
  std::vector<Vec3> before_vec_mm;
  std::vector<Vec3> after_vec_mm;
  double before_mean = 0.0, before_std = 0.0;
  double after_mean = 0.0, after_std = 0.0;
  double wilcoxon_p = 1.0;
};

namespace detail {

inline void mean_std(const std::vector<double>& x, double& mean, double& sd) {
  mean = 0.0;
  sd = 0.0;
  if (x.empty()) return;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  for (double v : x) sd += (v - mean) * (v - mean);
  sd = x.size() > 1 ? std::sqrt(sd / (static_cast<double>(x.size()) - 1.0)) : 0.0;
}

}  // namespace detail

// Per-frame COD distance to the reference frame, before and after applying
// the motion-series correction to the frames. Frames with zero mass are
// skipped. With an identity series before and after are identical.
inline DeltaCodResult delta_cod(const PciSeries& series, const MotionSeries& motion, int reference) {
  if (series.n_frames() < 2) throw Error(Error::Kind::Invalid, "delta_cod: need at least two frames");
  if (reference < 0 || reference >= series.n_frames())
    throw Error(Error::Kind::Invalid, "delta_cod: reference out of range");
  if (motion.n_frames() != series.n_frames())
    throw Error(Error::Kind::Invalid, "delta_cod: motion series does not match the frame series");

  const Volume& ref = series.frames[static_cast<std::size_t>(reference)];
  if (!(ref.total() > 0.0)) throw Error(Error::Kind::Invalid, "delta_cod: empty reference frame");
  const Vec3 cod_ref = compute_cod(ref);

  DeltaCodResult out;
  struct FrameEntry {
    double t;
    Vec3 before, after;
    bool valid;
  };
  std::vector<FrameEntry> entries(series.frames.size());
  for_chunks(series.frames.size(), series.frames.size(), [&](std::size_t f, std::size_t, std::size_t) {
    auto& e = entries[f];
    e.t = series.frame_mid(static_cast<int>(f));
    e.valid = series.frames[f].total() > 0.0;
    if (!e.valid) return;
    e.before = compute_cod(series.frames[f]) - cod_ref;
    const Volume corrected = correct_frame(series.frames[f], motion.fields[f]);
    e.after = corrected.total() > 0.0 ? compute_cod(corrected) - cod_ref : e.before;
  });

  for (const auto& e : entries) {
    if (!e.valid) continue;
    out.times_s.push_back(e.t);
    out.before_vec_mm.push_back(e.before);
    out.after_vec_mm.push_back(e.after);
    out.before_mm.push_back(e.before.norm());
    out.after_mm.push_back(e.after.norm());
  }
  detail::mean_std(out.before_mm, out.before_mean, out.before_std);
  detail::mean_std(out.after_mm, out.after_mean, out.after_std);
  out.wilcoxon_p = wilcoxon_signed_rank_p(out.before_mm, out.after_mm);
  return out;
}

// Full width at half maximum along `axis` of the 1-D profile through the
// volume's peak voxel, in mm (linear interpolation at the half crossings).
inline double fwhm_through_peak(const Volume& v, int axis) {
  std::size_t peak_j = 0;
  float peak = v.data.empty() ? 0.0f : v.data[0];
  for (std::size_t j = 1; j < v.size(); ++j)
    if (v.data[j] > peak) {
      peak = v.data[j];
      peak_j = j;
    }
  if (!(peak > 0.0f)) throw Error(Error::Kind::Invalid, "fwhm: empty volume");
  const auto idx = v.grid.unflat(peak_j);

  const int n = v.grid.dims[axis];
  std::vector<double> prof(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    int c[3] = {idx[0], idx[1], idx[2]};
    c[axis] = i;
    prof[static_cast<std::size_t>(i)] = v.at(c[0], c[1], c[2]);
  }
  const int p = idx[axis];
  const double half = 0.5 * prof[static_cast<std::size_t>(p)];

  double lo = 0.0, hi = static_cast<double>(n - 1);
  for (int i = p; i >= 0; --i) {
    if (prof[static_cast<std::size_t>(i)] < half) {
      const double f = (half - prof[static_cast<std::size_t>(i)]) /
                       (prof[static_cast<std::size_t>(i + 1)] - prof[static_cast<std::size_t>(i)]);
      lo = i + f;
      break;
    }
    if (i == 0) lo = 0.0;
  }
  for (int i = p; i < n; ++i) {
    if (prof[static_cast<std::size_t>(i)] < half) {
      const double f = (prof[static_cast<std::size_t>(i - 1)] - half) /
                       (prof[static_cast<std::size_t>(i - 1)] - prof[static_cast<std::size_t>(i)]);
      hi = (i - 1) + f;
      break;
    }
    if (i == n - 1) hi = static_cast<double>(n - 1);
  }
  return (hi - lo) * v.grid.voxel_size[axis];
}

}  // namespace umcpet
