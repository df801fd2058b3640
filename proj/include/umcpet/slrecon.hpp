#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include "umcpet/common.hpp"
#include "umcpet/io.hpp"
#include "umcpet/listmode.hpp"
#include "umcpet/recon.hpp"
#include "umcpet/volume.hpp"

namespace umcpet {

// Training pair for the short-to-long acquisition mapping: OSEM of the full
// long acquisition and OSEM of the 2-minute center window, same protocol.
struct SlPair {
  Volume short_recon;
  Volume long_recon;
  double window_begin_s = 0.0;
  double window_end_s = 0.0;
  std::uint64_t stream_geometry_hash = 0;
};

struct SlReconConfig {
  double long_duration_s = 900.0;  // 15 minutes
  double short_duration_s = 120.0; // 2 minutes, center period
  double baseline_fwhm_mm = 8.0;
  double baseline_range_scale = 2.5;  // range sigma = scale * robust noise
};

inline SlPair make_sl_pair(const EventStream& stream, const ScannerGeometry& geom, const Volume& q,
                           const CorrectionFactors& factors, const ReconConfig& recon_cfg,
                           const SlReconConfig& sl_cfg = {}) {
  if (stream.duration_s + 1e-9 < sl_cfg.long_duration_s)
    throw Error(Error::Kind::Invalid, "make_sl_pair: stream shorter than the long acquisition");

  SlPair pair;
  pair.stream_geometry_hash = stream.geometry_hash;
  pair.window_begin_s = 0.5 * (sl_cfg.long_duration_s - sl_cfg.short_duration_s);
  pair.window_end_s = pair.window_begin_s + sl_cfg.short_duration_s;

  pair.long_recon = osem(stream, factors, nullptr, q, geom, recon_cfg);

  // Center-window substream, times rebased to 0; decay corrections keep the
  // original clock so short and long share the scan-start intensity scale.
  const auto [b, e] = stream.window(pair.window_begin_s, pair.window_end_s);
  EventStream sub;
  sub.geometry_hash = stream.geometry_hash;
  sub.half_life_s = stream.half_life_s;
  sub.duration_s = sl_cfg.short_duration_s;
  sub.events.reserve(e - b);
  const auto shift_ms = static_cast<std::uint32_t>(pair.window_begin_s * 1000.0);
  for (std::size_t k = b; k < e; ++k) {
    ListModeEvent ev = stream.events[k];
    ev.time_ms -= shift_ms;
    sub.events.push_back(ev);
  }
  CorrectionFactors sub_factors;
  sub_factors.decay.assign(factors.decay.begin() + static_cast<std::ptrdiff_t>(b),
                           factors.decay.begin() + static_cast<std::ptrdiff_t>(e));
  sub_factors.attenuation.assign(factors.attenuation.begin() + static_cast<std::ptrdiff_t>(b),
                                 factors.attenuation.begin() + static_cast<std::ptrdiff_t>(e));
  sub_factors.normalization.assign(factors.normalization.begin() + static_cast<std::ptrdiff_t>(b),
                                   factors.normalization.begin() + static_cast<std::ptrdiff_t>(e));
  sub_factors.randoms_per_lor_bin_per_s = factors.randoms_per_lor_bin_per_s;
  sub_factors.scatter_per_lor_bin_per_s = factors.scatter_per_lor_bin_per_s;

  pair.short_recon = osem(sub, sub_factors, nullptr, q, geom, recon_cfg);
  return pair;
}

// Robust noise scale: 1.4826 * median absolute residual against a 3^3 box
// mean, over nonzero voxels.
inline double robust_noise_sigma(const Volume& v) {
  std::vector<double> residuals;
  residuals.reserve(v.size());
  const auto& d = v.grid.dims;
  for (int iz = 0; iz < d[2]; ++iz)
    for (int iy = 0; iy < d[1]; ++iy)
      for (int ix = 0; ix < d[0]; ++ix) {
        if (v.at(ix, iy, iz) <= 0.0f) continue;
        double s = 0.0;
        int n = 0;
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int jx = ix + dx, jy = iy + dy, jz = iz + dz;
              if (jx < 0 || jy < 0 || jz < 0 || jx >= d[0] || jy >= d[1] || jz >= d[2]) continue;
              s += v.at(jx, jy, jz);
              ++n;
            }
        residuals.push_back(std::abs(v.at(ix, iy, iz) - s / n));
      }
  if (residuals.empty()) return 0.0;
  std::nth_element(residuals.begin(), residuals.begin() + static_cast<std::ptrdiff_t>(residuals.size() / 2),
                   residuals.end());
  return 1.4826 * residuals[residuals.size() / 2];
}

// Classical stand-in for the learned short-to-long generator: an
// edge-preserving bilateral filter (spatial FWHM 8 mm, range scale tied to
// the input's robust noise), rescaled to preserve total mass. Deterministic,
// nonnegative, near-identity on clean inputs.
inline Volume short_to_long_baseline(const Volume& lambda_short, const SlReconConfig& cfg = {}) {
  for (float x : lambda_short.data)
    if (x < 0.0f) throw Error(Error::Kind::Invalid, "short_to_long: input must be nonnegative");

  const double sigma_r = cfg.baseline_range_scale * robust_noise_sigma(lambda_short);
  if (!(sigma_r > 0.0)) return lambda_short;

  const double mass_in = lambda_short.total();
  const double sigma_s_mm = cfg.baseline_fwhm_mm / 2.3548200450309493;
  const auto& g = lambda_short.grid;
  int radius[3];
  for (int a = 0; a < 3; ++a)
    radius[a] = std::max(1, static_cast<int>(std::ceil(2.0 * sigma_s_mm / g.voxel_size[a])));

  Volume out(g);
  const double inv_2ss = 1.0 / (2.0 * sigma_s_mm * sigma_s_mm);
  const double inv_2sr = 1.0 / (2.0 * sigma_r * sigma_r);
  for (int iz = 0; iz < g.dims[2]; ++iz)
    for (int iy = 0; iy < g.dims[1]; ++iy)
      for (int ix = 0; ix < g.dims[0]; ++ix) {
        const double center = lambda_short.at(ix, iy, iz);
        double wsum = 0.0, vsum = 0.0;
        for (int dz = -radius[2]; dz <= radius[2]; ++dz)
          for (int dy = -radius[1]; dy <= radius[1]; ++dy)
            for (int dx = -radius[0]; dx <= radius[0]; ++dx) {
              const int jx = ix + dx, jy = iy + dy, jz = iz + dz;
              if (jx < 0 || jy < 0 || jz < 0 || jx >= g.dims[0] || jy >= g.dims[1] || jz >= g.dims[2])
                continue;
              const double val = lambda_short.at(jx, jy, jz);
              const double ds2 = dx * dx * g.voxel_size.x * g.voxel_size.x +
                                 dy * dy * g.voxel_size.y * g.voxel_size.y +
                                 dz * dz * g.voxel_size.z * g.voxel_size.z;
              const double dv = val - center;
              const double w = std::exp(-ds2 * inv_2ss - dv * dv * inv_2sr);
              wsum += w;
              vsum += w * val;
            }
        out.at(ix, iy, iz) = static_cast<float>(wsum > 0.0 ? vsum / wsum : center);
      }

  const double mass_out = out.total();
  if (mass_out > 0.0 && mass_in > 0.0) {
    const auto scale = static_cast<float>(mass_in / mass_out);
    for (auto& x : out.data) x *= scale;
  }
  return out;
}

// External learned model attached through the subprocess contract: the
// command is invoked as `<command> <input.vol> <output.vol>`; a nonzero exit
// status is a failure. Volume files use the library's raw+sidecar format.
inline Volume short_to_long_external(const Volume& lambda_short, const std::string& command,
                                     const std::string& work_dir) {
  const std::string in_path = work_dir + "/sl_model_in.vol";
  const std::string out_path = work_dir + "/sl_model_out.vol";
  write_volume(lambda_short, in_path, "activity");
  const std::string cmd = command + " '" + in_path + "' '" + out_path + "'";
  const int rc = std::system(cmd.c_str());
  if (rc != 0)
    throw Error(Error::Kind::Stage, "short_to_long: external model exited with status " + std::to_string(rc));
  Volume out = read_volume(out_path);
  if (out.grid != lambda_short.grid)
    throw Error(Error::Kind::Stage, "short_to_long: external model changed the grid");
  return out;
}

}  // namespace umcpet
