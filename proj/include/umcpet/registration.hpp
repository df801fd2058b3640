#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "umcpet/common.hpp"
#include "umcpet/field.hpp"
#include "umcpet/parallel.hpp"
#include "umcpet/pci.hpp"
#include "umcpet/volume.hpp"

namespace umcpet {

struct RegConfig {
  double beta = 0.001;        // weight of the deformation-gradient penalty
  int pyramid_levels = 3;     // factor-2 multi-resolution
  int max_iterations = 100;   // per level
  double tolerance = 1e-4;    // relative loss decrease
  double initial_step_voxels = 0.5;

  void validate() const {
    if (beta < 0.0) throw Error(Error::Kind::Config, "registration: beta must be >= 0");
    if (pyramid_levels < 1) throw Error(Error::Kind::Config, "registration: need >= 1 pyramid level");
    if (max_iterations < 1) throw Error(Error::Kind::Config, "registration: need >= 1 iteration");
  }
};

namespace reg_detail {

// Double-precision image with analytic trilinear value+gradient (gradient in
// mm^-1 units, i.e. with respect to world position). Outside the span of
// voxel centers both are zero.
struct ImageD {
  VoxelGrid grid;
  std::vector<double> data;

  static ImageD from_volume(const Volume& v, double scale) {
    ImageD im;
    im.grid = v.grid;
    im.data.resize(v.size());
    for (std::size_t j = 0; j < v.size(); ++j) im.data[j] = v.data[j] * scale;
    return im;
  }

  void sample_and_grad(const Vec3& p, double& value, Vec3& grad) const {
    const Vec3 c = grid.world_to_voxel(p);
    if (c.x < 0.0 || c.y < 0.0 || c.z < 0.0 || c.x > grid.dims[0] - 1 || c.y > grid.dims[1] - 1 ||
        c.z > grid.dims[2] - 1) {
      value = 0.0;
      grad = {0, 0, 0};
      return;
    }
    const int jx = std::min(static_cast<int>(c.x), std::max(grid.dims[0] - 2, 0));
    const int jy = std::min(static_cast<int>(c.y), std::max(grid.dims[1] - 2, 0));
    const int jz = std::min(static_cast<int>(c.z), std::max(grid.dims[2] - 2, 0));
    const double fx = c.x - jx, fy = c.y - jy, fz = c.z - jz;
    const int sx = grid.dims[0] > 1 ? 1 : 0;
    const int sy = grid.dims[1] > 1 ? 1 : 0;
    const int sz = grid.dims[2] > 1 ? 1 : 0;
    auto v = [&](int dx, int dy, int dz) {
      return data[grid.flat(jx + dx * sx, jy + dy * sy, jz + dz * sz)];
    };
    const double v000 = v(0, 0, 0), v100 = v(1, 0, 0), v010 = v(0, 1, 0), v110 = v(1, 1, 0);
    const double v001 = v(0, 0, 1), v101 = v(1, 0, 1), v011 = v(0, 1, 1), v111 = v(1, 1, 1);

    const double c00 = v000 * (1 - fx) + v100 * fx;
    const double c10 = v010 * (1 - fx) + v110 * fx;
    const double c01 = v001 * (1 - fx) + v101 * fx;
    const double c11 = v011 * (1 - fx) + v111 * fx;
    const double c0 = c00 * (1 - fy) + c10 * fy;
    const double c1 = c01 * (1 - fy) + c11 * fy;
    value = c0 * (1 - fz) + c1 * fz;

    const double gx0 = (v100 - v000) * (1 - fy) + (v110 - v010) * fy;
    const double gx1 = (v101 - v001) * (1 - fy) + (v111 - v011) * fy;
    grad.x = (gx0 * (1 - fz) + gx1 * fz) / grid.voxel_size.x;
    grad.y = ((c10 - c00) * (1 - fz) + (c11 - c01) * fz) / grid.voxel_size.y;
    grad.z = (c1 - c0) / grid.voxel_size.z;
  }
};

// Displacement field as three double planes (x, y, z components).
struct FieldD {
  VoxelGrid grid;
  std::vector<double> comp[3];

  explicit FieldD(const VoxelGrid& g) : grid(g) {
    for (auto& c : comp) c.assign(g.n_voxels(), 0.0);
  }

  void axpy(double a, const FieldD& d) {
    for (int c = 0; c < 3; ++c)
      for (std::size_t j = 0; j < comp[c].size(); ++j) comp[c][j] += a * d.comp[c][j];
  }
  double max_abs() const {
    double m = 0.0;
    for (const auto& c : comp)
      for (double v : c) m = std::max(m, std::abs(v));
    return m;
  }
};

// The registration objective: voxel-mean squared residual between the fixed
// image and the reference resampled through the field, plus beta times the
// voxel-mean squared forward-difference gradient of the displacement
// (replicated boundary, so the one-sided terms at the far faces vanish).
struct Objective {
  const ImageD& moving;  // resampled through the field (the reference frame)
  const ImageD& fixed;   // matched as-is (the source frame)
  double beta;

  double loss(const FieldD& m) const { return eval(m, nullptr); }

  double loss_and_grad(const FieldD& m, FieldD& grad) const {
    for (auto& c : grad.comp) std::fill(c.begin(), c.end(), 0.0);
    return eval(m, &grad);
  }

  double eval(const FieldD& m, FieldD* grad) const {
    const VoxelGrid& g = fixed.grid;
    const double inv_n = 1.0 / static_cast<double>(g.n_voxels());
    double data_term = 0.0;
    std::size_t j = 0;
    for (int iz = 0; iz < g.dims[2]; ++iz)
      for (int iy = 0; iy < g.dims[1]; ++iy)
        for (int ix = 0; ix < g.dims[0]; ++ix, ++j) {
          const Vec3 p = g.voxel_center(ix, iy, iz) +
                         Vec3{m.comp[0][j], m.comp[1][j], m.comp[2][j]};
          double value;
          Vec3 dvalue;
          moving.sample_and_grad(p, value, dvalue);
          const double r = value - fixed.data[j];
          data_term += r * r;
          if (grad != nullptr) {
            const double w = 2.0 * inv_n * r;
            grad->comp[0][j] += w * dvalue.x;
            grad->comp[1][j] += w * dvalue.y;
            grad->comp[2][j] += w * dvalue.z;
          }
        }
    data_term *= inv_n;

    double reg_term = 0.0;
    if (beta > 0.0) {
      const std::size_t stride[3] = {1, static_cast<std::size_t>(g.dims[0]),
                                     static_cast<std::size_t>(g.dims[0]) * g.dims[1]};
      for (int axis = 0; axis < 3; ++axis) {
        const double inv_h = 1.0 / g.voxel_size[axis];
        std::size_t idx = 0;
        for (int iz = 0; iz < g.dims[2]; ++iz)
          for (int iy = 0; iy < g.dims[1]; ++iy)
            for (int ix = 0; ix < g.dims[0]; ++ix, ++idx) {
              const int coord = axis == 0 ? ix : (axis == 1 ? iy : iz);
              if (coord + 1 >= g.dims[axis]) continue;
              const std::size_t nb = idx + stride[axis];
              for (int c = 0; c < 3; ++c) {
                const double d = (m.comp[c][nb] - m.comp[c][idx]) * inv_h;
                reg_term += d * d;
                if (grad != nullptr) {
                  const double w = 2.0 * beta * inv_n * d * inv_h;
                  grad->comp[c][nb] += w;
                  grad->comp[c][idx] -= w;
                }
              }
            }
      }
      reg_term *= beta * inv_n;
    }
    return data_term + reg_term;
  }
};

inline VoxelGrid half_grid(const VoxelGrid& g) {
  VoxelGrid h;
  for (int a = 0; a < 3; ++a) h.dims[a] = (g.dims[a] + 1) / 2;
  h.voxel_size = g.voxel_size * 2.0;
  h.origin = g.origin + g.voxel_size * 0.5;
  return h;
}

inline ImageD downsample(const ImageD& im) {
  const VoxelGrid h = half_grid(im.grid);
  ImageD out;
  out.grid = h;
  out.data.assign(h.n_voxels(), 0.0);
  std::size_t j = 0;
  for (int iz = 0; iz < h.dims[2]; ++iz)
    for (int iy = 0; iy < h.dims[1]; ++iy)
      for (int ix = 0; ix < h.dims[0]; ++ix, ++j) {
        double s = 0.0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int px = std::min(2 * ix + dx, im.grid.dims[0] - 1);
              const int py = std::min(2 * iy + dy, im.grid.dims[1] - 1);
              const int pz = std::min(2 * iz + dz, im.grid.dims[2] - 1);
              s += im.data[im.grid.flat(px, py, pz)];
            }
        out.data[j] = s / 8.0;
      }
  return out;
}

// Trilinear prolongation of a coarse field onto a finer grid (displacements
// are absolute mm, so values carry over unscaled).
inline FieldD upsample_field(const FieldD& coarse, const VoxelGrid& fine) {
  FieldD out(fine);
  DeformationField tmp(coarse.grid);
  for (std::size_t j = 0; j < coarse.grid.n_voxels(); ++j)
    tmp.set(j, {coarse.comp[0][j], coarse.comp[1][j], coarse.comp[2][j]});
  std::size_t j = 0;
  for (int iz = 0; iz < fine.dims[2]; ++iz)
    for (int iy = 0; iy < fine.dims[1]; ++iy)
      for (int ix = 0; ix < fine.dims[0]; ++ix, ++j) {
        const Vec3 d = tmp.sample_world(fine.voxel_center(ix, iy, iz));
        out.comp[0][j] = d.x;
        out.comp[1][j] = d.y;
        out.comp[2][j] = d.z;
      }
  return out;
}

struct DescentResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int iterations = 0;
};

// Gradient descent with backtracking step control; the loss is nonincreasing
// across accepted iterations by construction.
inline DescentResult minimize(const Objective& objective, FieldD& m, const RegConfig& cfg) {
  DescentResult res;
  FieldD grad(m.grid);
  double loss = objective.loss_and_grad(m, grad);
  res.initial_loss = loss;
  if (!std::isfinite(loss)) throw Error(Error::Kind::Invalid, "registration: non-finite initial loss");

  const double min_voxel = m.grid.min_voxel_size();
  double gmax = grad.max_abs();
  if (gmax <= 0.0) {
    res.final_loss = loss;
    return res;
  }
  double step = cfg.initial_step_voxels * min_voxel / gmax;

  for (int it = 0; it < cfg.max_iterations; ++it) {
    FieldD trial = m;
    trial.axpy(-step, grad);
    const double trial_loss = objective.loss(trial);
    if (!std::isfinite(trial_loss))
      throw Error(Error::Kind::Invalid, "registration: non-finite loss during descent");

    if (trial_loss < loss) {
      const double rel_drop = (loss - trial_loss) / std::max(loss, 1e-300);
      m = std::move(trial);
      loss = trial_loss;
      ++res.iterations;
      if (rel_drop < cfg.tolerance) break;
      loss = objective.loss_and_grad(m, grad);
      gmax = grad.max_abs();
      if (gmax <= 0.0) break;
      step *= 1.25;
      step = std::min(step, 4.0 * min_voxel / gmax);
    } else {
      step *= 0.5;
      if (step * gmax < 1e-6 * min_voxel) break;
    }
  }
  res.final_loss = loss;
  return res;
}

}  // namespace reg_detail

struct RegResult {
  DeformationField field;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int iterations = 0;
};

// Dense non-rigid registration of `src` onto `ref` by direct minimization of
// the SSD + beta * |grad M|^2 objective over a factor-2 pyramid. The result
// maps source-frame points toward the reference frame (p_ref = p + M(p)):
// the objective resamples `ref` through M and matches it against `src`.
// Both images are jointly max-normalized so beta keeps one scale-free
// meaning across inputs.
inline RegResult register_frame(const Volume& ref, const Volume& src, const RegConfig& cfg = {}) {
  cfg.validate();
  if (ref.grid != src.grid) throw Error(Error::Kind::Invalid, "register_frame: grid mismatch");

  const double peak = std::max(ref.max_value(), src.max_value());
  RegResult out;
  if (!(peak > 0.0)) {  // two empty images: the regularized minimum is zero
    out.field = DeformationField(ref.grid);
    return out;
  }
  const double scale = 1.0 / peak;

  using namespace reg_detail;
  std::vector<ImageD> ref_pyr, src_pyr;
  ref_pyr.push_back(ImageD::from_volume(ref, scale));
  src_pyr.push_back(ImageD::from_volume(src, scale));
  int levels = cfg.pyramid_levels;
  for (int l = 1; l < levels; ++l) {
    const auto& prev = ref_pyr.back().grid;
    if (std::min({prev.dims[0], prev.dims[1], prev.dims[2]}) < 8) break;  // stop at tiny grids
    ref_pyr.push_back(downsample(ref_pyr.back()));
    src_pyr.push_back(downsample(src_pyr.back()));
  }
  levels = static_cast<int>(ref_pyr.size());

  FieldD m(ref_pyr.back().grid);
  for (int l = levels - 1; l >= 0; --l) {
    Objective objective{ref_pyr[static_cast<std::size_t>(l)], src_pyr[static_cast<std::size_t>(l)],
                        cfg.beta};
    const auto res = minimize(objective, m, cfg);
    if (l == 0) {
      out.initial_loss = res.initial_loss;
      out.final_loss = res.final_loss;
      out.iterations = res.iterations;
    }
    if (l > 0) m = upsample_field(m, ref_pyr[static_cast<std::size_t>(l) - 1].grid);
  }

  out.field = DeformationField(ref.grid);
  for (std::size_t j = 0; j < ref.grid.n_voxels(); ++j)
    out.field.set(j, {m.comp[0][j], m.comp[1][j], m.comp[2][j]});
  return out;
}

// Registers every non-reference frame of the denoised series against the
// reference frame; the reference entry is the identity field. Frame pairs
// are independent and run in parallel.
inline MotionSeries estimate_motion(const PciSeries& frames, int reference, const RegConfig& cfg = {}) {
  if (reference < 0 || reference >= frames.n_frames())
    throw Error(Error::Kind::Invalid, "estimate_motion: reference index out of range");
  MotionSeries series;
  series.dt_s = frames.dt_s;
  series.reference = reference;
  series.fields.assign(frames.frames.size(), DeformationField{});
  const Volume& ref = frames.frames[static_cast<std::size_t>(reference)];
  for_chunks(frames.frames.size(), frames.frames.size(), [&](std::size_t f, std::size_t, std::size_t) {
    if (static_cast<int>(f) == reference) {
      series.fields[f] = DeformationField(ref.grid);
    } else {
      series.fields[f] = register_frame(ref, frames.frames[f], cfg).field;
    }
  });
  return series;
}

}  // namespace umcpet
