#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "umcpet/geometry.hpp"
#include "umcpet/phantom.hpp"
#include "umcpet/rng.hpp"
#include "umcpet/volume.hpp"

namespace testutil {

using namespace umcpet;

inline ScannerGeometry ring_scanner(int n_rings, int crystals_per_ring, double radius_mm = 120.0,
                                    double pitch_mm = 4.0) {
  ScannerGeometry g;
  g.ring_radius_mm = radius_mm;
  g.n_rings = n_rings;
  g.crystals_per_ring = crystals_per_ring;
  g.axial_pitch_mm = pitch_mm;
  return g;
}

inline VoxelGrid cube_grid(int n, double voxel_mm) {
  return make_centered_grid({n, n, n}, {voxel_mm, voxel_mm, voxel_mm});
}

inline LOR random_lor(const ScannerGeometry& geom, Rng& rng) {
  const int n = geom.n_crystals();
  int a = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)));
  int b = a;
  while (b == a) b = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)));
  return lor_between(geom, a, b);
}

// Smooth interior blob for warping/registration tests.
inline Volume gaussian_blob(const VoxelGrid& grid, const Vec3& center_mm, double sigma_mm,
                            double amplitude = 1.0) {
  Volume v(grid);
  std::size_t j = 0;
  for (int iz = 0; iz < grid.dims[2]; ++iz)
    for (int iy = 0; iy < grid.dims[1]; ++iy)
      for (int ix = 0; ix < grid.dims[0]; ++ix, ++j) {
        const double r2 = (grid.voxel_center(ix, iy, iz) - center_mm).norm2();
        v.data[j] = static_cast<float>(amplitude * std::exp(-0.5 * r2 / (sigma_mm * sigma_mm)));
      }
  return v;
}

inline PhantomSpec sphere_phantom(const Vec3& center, double radius_mm, double activity,
                                  double mu = 0.0, double duration_s = 1000.0) {
  PhantomSpec spec;
  EllipsoidComponent c;
  c.center_mm = center;
  c.semi_axes_mm = {radius_mm, radius_mm, radius_mm};
  c.activity_per_s_mm3 = activity;
  c.mu_per_mm = mu;
  spec.components.push_back(c);
  spec.total_duration_s = duration_s;
  return spec;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

// Scratch directory under the build tree; recreated per call.
inline std::string scratch_dir(const std::string& name) {
  const std::string dir = "umcpet_test_scratch/" + name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
