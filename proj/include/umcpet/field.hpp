#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "umcpet/common.hpp"
#include "umcpet/grid.hpp"
#include "umcpet/volume.hpp"

namespace umcpet {

// Dense displacement field in mm, interleaved (dx,dy,dz) per voxel. A field
// attached to frame t maps points of the time-t space to the reference
// space: p_ref = p + field(p). Resampling an image from frame t onto the
// reference grid therefore goes through the field's inverse (see
// invert_field / correct_frame below); bending LORs into curves of response
// uses the field directly.
struct DeformationField {
  VoxelGrid grid;
  std::vector<float> disp;  // 3 * n_voxels, interleaved

  DeformationField() = default;
  explicit DeformationField(const VoxelGrid& g) : grid(g), disp(3 * g.n_voxels(), 0.0f) {}

  Vec3 at(std::size_t j) const {
    return {static_cast<double>(disp[3 * j]), static_cast<double>(disp[3 * j + 1]),
            static_cast<double>(disp[3 * j + 2])};
  }
  void set(std::size_t j, const Vec3& v) {
    disp[3 * j] = static_cast<float>(v.x);
    disp[3 * j + 1] = static_cast<float>(v.y);
    disp[3 * j + 2] = static_cast<float>(v.z);
  }

  bool is_identity() const {
    for (float v : disp)
      if (v != 0.0f) return false;
    return true;
  }

  // Trilinear sampling with replicated boundary (displacement fields are
  // extended by their edge values rather than zeroed).
  Vec3 sample_world(const Vec3& p) const {
    Vec3 c = grid.world_to_voxel(p);
    const double cx = std::clamp(c.x, 0.0, static_cast<double>(grid.dims[0] - 1));
    const double cy = std::clamp(c.y, 0.0, static_cast<double>(grid.dims[1] - 1));
    const double cz = std::clamp(c.z, 0.0, static_cast<double>(grid.dims[2] - 1));
    const int jx = std::min(static_cast<int>(cx), std::max(grid.dims[0] - 2, 0));
    const int jy = std::min(static_cast<int>(cy), std::max(grid.dims[1] - 2, 0));
    const int jz = std::min(static_cast<int>(cz), std::max(grid.dims[2] - 2, 0));
    const double fx = cx - jx, fy = cy - jy, fz = cz - jz;
    const int sx = grid.dims[0] > 1 ? 1 : 0;
    const int sy = grid.dims[1] > 1 ? 1 : 0;
    const int sz = grid.dims[2] > 1 ? 1 : 0;
    Vec3 out{0, 0, 0};
    for (int comp = 0; comp < 3; ++comp) {
      auto v = [&](int dx, int dy, int dz) {
        const std::size_t j = grid.flat(jx + dx * sx, jy + dy * sy, jz + dz * sz);
        return static_cast<double>(disp[3 * j + comp]);
      };
      const double c00 = v(0, 0, 0) * (1 - fx) + v(1, 0, 0) * fx;
      const double c10 = v(0, 1, 0) * (1 - fx) + v(1, 1, 0) * fx;
      const double c01 = v(0, 0, 1) * (1 - fx) + v(1, 0, 1) * fx;
      const double c11 = v(0, 1, 1) * (1 - fx) + v(1, 1, 1) * fx;
      out[comp] = (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz;
    }
    return out;
  }

  double rms_mm() const {
    if (disp.empty()) return 0.0;
    double s = 0.0;
    for (float v : disp) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s * 3.0 / disp.size());  // per-vector RMS magnitude
  }
};

// out(x) = v(x + m(x)), trilinear, zero outside the grid.
inline Volume warp(const Volume& v, const DeformationField& m) {
  if (v.grid != m.grid) throw Error(Error::Kind::Invalid, "warp: grid mismatch");
  Volume out(v.grid);
  std::size_t j = 0;
  for (int iz = 0; iz < v.grid.dims[2]; ++iz)
    for (int iy = 0; iy < v.grid.dims[1]; ++iy)
      for (int ix = 0; ix < v.grid.dims[0]; ++ix, ++j) {
        const Vec3 d = m.at(j);
        if (d.x == 0.0 && d.y == 0.0 && d.z == 0.0) {
          out.data[j] = v.data[j];  // identity lookup stays bitwise exact
          continue;
        }
        const Vec3 p = v.grid.voxel_center(ix, iy, iz) + d;
        out.data[j] = static_cast<float>(v.sample_world(p));
      }
  return out;
}

// Fixed-point inversion: returns m_inv with m_inv(x) ~= q - x where
// q + m(q) = x. Exact for uniform fields; for smooth fields the residual is
// O(|m| * |grad m|).
inline DeformationField invert_field(const DeformationField& m, int iterations = 12) {
  DeformationField inv(m.grid);
  std::size_t j = 0;
  for (int iz = 0; iz < m.grid.dims[2]; ++iz)
    for (int iy = 0; iy < m.grid.dims[1]; ++iy)
      for (int ix = 0; ix < m.grid.dims[0]; ++ix, ++j) {
        const Vec3 x = m.grid.voxel_center(ix, iy, iz);
        Vec3 q = x;
        for (int it = 0; it < iterations; ++it) {
          const Vec3 d = m.sample_world(q);
          const Vec3 q_next = x - d;
          const double delta = (q_next - q).norm();
          q = q_next;
          if (delta < 1e-4) break;
        }
        inv.set(j, q - x);
      }
  return inv;
}

// Resamples a frame-t image onto the reference space given the frame's
// t->ref field (inverts the field, then warps).
inline Volume correct_frame(const Volume& frame, const DeformationField& m) {
  if (m.is_identity()) return frame;
  return warp(frame, invert_field(m));
}

// One field per ultra-short frame; the reference frame's entry is identity.
struct MotionSeries {
  std::vector<DeformationField> fields;
  double dt_s = 0.5;
  int reference = 0;

  int n_frames() const { return static_cast<int>(fields.size()); }
  double duration_s() const { return fields.size() * dt_s; }

  int frame_of_time(double t_s) const {
    int f = static_cast<int>(std::floor(t_s / dt_s));
    return std::clamp(f, 0, n_frames() - 1);
  }
  const DeformationField& field_at_time(double t_s) const { return fields[frame_of_time(t_s)]; }

  bool is_identity() const {
    for (const auto& f : fields)
      if (!f.is_identity()) return false;
    return true;
  }

  static MotionSeries identity(const VoxelGrid& grid, int n_frames, double dt_s, int reference = 0) {
    MotionSeries s;
    s.dt_s = dt_s;
    s.reference = reference;
    s.fields.assign(static_cast<std::size_t>(n_frames), DeformationField(grid));
    return s;
  }
};

}  // namespace umcpet
