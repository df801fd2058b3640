#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>

#include "umcpet/common.hpp"

namespace umcpet {

// Regular voxel lattice. `origin` is the world position of the CENTER of
// voxel (0,0,0); the grid's bounding box therefore extends half a voxel
// beyond the first/last centers on each axis.
struct VoxelGrid {
  std::array<int, 3> dims{1, 1, 1};
  Vec3 voxel_size{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw Error(Error::Kind::Config, "VoxelGrid: dims must be >= 1");
      if (!(voxel_size[a] > 0.0)) throw Error(Error::Kind::Config, "VoxelGrid: voxel_size must be > 0");
    }
  }

  std::size_t n_voxels() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
           static_cast<std::size_t>(dims[2]);
  }

  std::size_t flat(int ix, int iy, int iz) const {
    return static_cast<std::size_t>(ix) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(iy) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(iz));
  }

  std::array<int, 3> unflat(std::size_t j) const {
    const auto nx = static_cast<std::size_t>(dims[0]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    return {static_cast<int>(j % nx), static_cast<int>((j / nx) % ny), static_cast<int>(j / (nx * ny))};
  }

  // Continuous voxel coordinates; integer values sit on voxel centers.
  Vec3 world_to_voxel(const Vec3& p) const {
    return {(p.x - origin.x) / voxel_size.x, (p.y - origin.y) / voxel_size.y,
            (p.z - origin.z) / voxel_size.z};
  }
  Vec3 voxel_to_world(const Vec3& c) const {
    return {origin.x + c.x * voxel_size.x, origin.y + c.y * voxel_size.y, origin.z + c.z * voxel_size.z};
  }
  Vec3 voxel_center(int ix, int iy, int iz) const {
    return voxel_to_world({static_cast<double>(ix), static_cast<double>(iy), static_cast<double>(iz)});
  }

  bool index_in_bounds(int ix, int iy, int iz) const {
    return ix >= 0 && iy >= 0 && iz >= 0 && ix < dims[0] && iy < dims[1] && iz < dims[2];
  }

  // Bounding box (outer voxel faces).
  Vec3 box_lo() const { return origin - voxel_size * 0.5; }
  Vec3 box_hi() const {
    return {origin.x + (dims[0] - 0.5) * voxel_size.x, origin.y + (dims[1] - 0.5) * voxel_size.y,
            origin.z + (dims[2] - 0.5) * voxel_size.z};
  }
  Vec3 center() const { return (box_lo() + box_hi()) * 0.5; }

  double min_voxel_size() const { return std::min(voxel_size.x, std::min(voxel_size.y, voxel_size.z)); }

  // Transaxial field-of-view cylinder inscribed in the grid's xy extent.
  double fov_radius() const {
    const double ex = dims[0] * voxel_size.x;
    const double ey = dims[1] * voxel_size.y;
    return 0.5 * std::min(ex, ey);
  }
  bool in_fov_cylinder(const Vec3& p) const {
    const Vec3 c = center();
    const double dx = p.x - c.x, dy = p.y - c.y;
    return dx * dx + dy * dy <= fov_radius() * fov_radius();
  }

  bool operator==(const VoxelGrid& o) const {
    return dims == o.dims && voxel_size.x == o.voxel_size.x && voxel_size.y == o.voxel_size.y &&
           voxel_size.z == o.voxel_size.z && origin.x == o.origin.x && origin.y == o.origin.y &&
           origin.z == o.origin.z;
  }
  bool operator!=(const VoxelGrid& o) const { return !(*this == o); }
};

// Grid centered on the world origin, the usual construction in configs.
inline VoxelGrid make_centered_grid(std::array<int, 3> dims, Vec3 voxel_size) {
  VoxelGrid g;
  g.dims = dims;
  g.voxel_size = voxel_size;
  g.origin = {-0.5 * (dims[0] - 1) * voxel_size.x, -0.5 * (dims[1] - 1) * voxel_size.y,
              -0.5 * (dims[2] - 1) * voxel_size.z};
  return g;
}

}  // namespace umcpet
