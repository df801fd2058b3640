#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "umcpet/common.hpp"
#include "umcpet/grid.hpp"

namespace umcpet {

// Dense 3-D scalar field. Storage is float (matches the on-disk format);
// accumulations that need double precision keep their own buffers.
struct Volume {
  VoxelGrid grid;
  std::vector<float> data;

  Volume() = default;
  explicit Volume(const VoxelGrid& g, float fill = 0.0f) : grid(g), data(g.n_voxels(), fill) {}

  float& at(int ix, int iy, int iz) { return data[grid.flat(ix, iy, iz)]; }
  float at(int ix, int iy, int iz) const { return data[grid.flat(ix, iy, iz)]; }

  std::size_t size() const { return data.size(); }

  double total() const { return std::accumulate(data.begin(), data.end(), 0.0); }

  float max_value() const {
    float m = 0.0f;
    for (float v : data) m = std::max(m, v);
    return m;
  }

  void fill(float v) { std::fill(data.begin(), data.end(), v); }

  // Trilinear interpolation at continuous voxel coordinates; samples outside
  // the span of voxel centers evaluate to 0.
  double sample_voxel_coords(double cx, double cy, double cz) const {
    if (cx < 0.0 || cy < 0.0 || cz < 0.0 || cx > grid.dims[0] - 1 || cy > grid.dims[1] - 1 ||
        cz > grid.dims[2] - 1) {
      return 0.0;
    }
    const int jx = std::min(static_cast<int>(cx), std::max(grid.dims[0] - 2, 0));
    const int jy = std::min(static_cast<int>(cy), std::max(grid.dims[1] - 2, 0));
    const int jz = std::min(static_cast<int>(cz), std::max(grid.dims[2] - 2, 0));
    const double fx = cx - jx, fy = cy - jy, fz = cz - jz;
    const int sx = grid.dims[0] > 1 ? 1 : 0;
    const int sy = grid.dims[1] > 1 ? 1 : 0;
    const int sz = grid.dims[2] > 1 ? 1 : 0;
    auto v = [&](int dx, int dy, int dz) {
      return static_cast<double>(data[grid.flat(jx + dx * sx, jy + dy * sy, jz + dz * sz)]);
    };
    const double c00 = v(0, 0, 0) * (1 - fx) + v(1, 0, 0) * fx;
    const double c10 = v(0, 1, 0) * (1 - fx) + v(1, 1, 0) * fx;
    const double c01 = v(0, 0, 1) * (1 - fx) + v(1, 0, 1) * fx;
    const double c11 = v(0, 1, 1) * (1 - fx) + v(1, 1, 1) * fx;
    const double c0 = c00 * (1 - fy) + c10 * fy;
    const double c1 = c01 * (1 - fy) + c11 * fy;
    return c0 * (1 - fz) + c1 * fz;
  }

  double sample_world(const Vec3& p) const {
    const Vec3 c = grid.world_to_voxel(p);
    return sample_voxel_coords(c.x, c.y, c.z);
  }

  // Nearest-voxel lookup, 0 outside.
  double nearest_world(const Vec3& p) const {
    const Vec3 c = grid.world_to_voxel(p);
    const int ix = static_cast<int>(std::lround(c.x));
    const int iy = static_cast<int>(std::lround(c.y));
    const int iz = static_cast<int>(std::lround(c.z));
    if (!grid.index_in_bounds(ix, iy, iz)) return 0.0;
    return data[grid.flat(ix, iy, iz)];
  }
};

// Intensity centroid in world mm. Total mass must be positive.
inline Vec3 compute_cod(const Volume& v) {
  double m = 0.0, sx = 0.0, sy = 0.0, sz = 0.0;
  std::size_t j = 0;
  for (int iz = 0; iz < v.grid.dims[2]; ++iz) {
    for (int iy = 0; iy < v.grid.dims[1]; ++iy) {
      for (int ix = 0; ix < v.grid.dims[0]; ++ix, ++j) {
        const double w = v.data[j];
        if (w == 0.0) continue;
        m += w;
        sx += w * ix;
        sy += w * iy;
        sz += w * iz;
      }
    }
  }
  if (!(m > 0.0)) throw Error(Error::Kind::Invalid, "compute_cod: volume has zero total mass");
  return v.grid.voxel_to_world({sx / m, sy / m, sz / m});
}

inline double nrmse(const Volume& a, const Volume& ref) {
  if (a.grid != ref.grid) throw Error(Error::Kind::Invalid, "nrmse: grid mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double d = static_cast<double>(a.data[j]) - static_cast<double>(ref.data[j]);
    num += d * d;
    den += static_cast<double>(ref.data[j]) * static_cast<double>(ref.data[j]);
  }
  if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return std::sqrt(num / den);
}

}  // namespace umcpet
