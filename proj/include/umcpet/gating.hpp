#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "umcpet/common.hpp"
#include "umcpet/listmode.hpp"
#include "umcpet/parallel.hpp"
#include "umcpet/pci.hpp"
#include "umcpet/phantom.hpp"
#include "umcpet/rng.hpp"
#include "umcpet/volume.hpp"

namespace umcpet {

struct CodTrace {
  std::vector<double> times_s;
  std::vector<Vec3> cod_mm;

  std::size_t size() const { return times_s.size(); }
};

// COD per frame; frames with zero mass keep the previous COD (or the first
// nonzero one), so sparse ultra-short frames do not poison the trace.
inline CodTrace cod_trace(const PciSeries& series) {
  CodTrace tr;
  tr.times_s.reserve(series.frames.size());
  tr.cod_mm.reserve(series.frames.size());
  Vec3 last{0, 0, 0};
  bool have_last = false;
  std::vector<int> pending;
  for (int i = 0; i < series.n_frames(); ++i) {
    tr.times_s.push_back(series.frame_mid(i));
    if (series.frames[i].total() > 0.0) {
      last = compute_cod(series.frames[i]);
      if (!have_last)
        for (int p : pending) tr.cod_mm[static_cast<std::size_t>(p)] = last;
      have_last = true;
      tr.cod_mm.push_back(last);
    } else {
      if (!have_last) pending.push_back(i);
      tr.cod_mm.push_back(last);
    }
  }
  return tr;
}

struct StableSegment {
  std::size_t begin = 0;  // sample indices into the trace, [begin, end)
  std::size_t end = 0;
  double t_begin_s = 0.0;
  double t_end_s = 0.0;

  double duration_s() const { return t_end_s - t_begin_s; }
};

// Splits the COD trace where the moving-median jumps by more than
// `threshold_mm`; segments shorter than `min_dwell_s` are discarded. The
// longest surviving segment is the body-motion-free set.
inline std::vector<StableSegment> detect_body_motion(const CodTrace& trace, double threshold_mm = 3.0,
                                                     double min_dwell_s = 5.0, int median_window = 3) {
  if (trace.size() == 0) throw Error(Error::Kind::Invalid, "detect_body_motion: empty trace");
  const std::size_t n = trace.size();
  const int half = std::max(1, median_window) / 2;

  std::vector<Vec3> med(n);
  std::vector<double> buf;
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      buf.clear();
      const auto lo = static_cast<std::size_t>(std::max<long>(0, static_cast<long>(i) - half));
      const auto hi = std::min(n - 1, i + static_cast<std::size_t>(half));
      for (std::size_t k = lo; k <= hi; ++k) buf.push_back(trace.cod_mm[k][c]);
      std::sort(buf.begin(), buf.end());
      med[i][c] = buf[buf.size() / 2];
    }
  }

  std::vector<std::size_t> cuts;  // segment start indices
  cuts.push_back(0);
  for (std::size_t i = 1; i < n; ++i)
    if ((med[i] - med[i - 1]).norm() > threshold_mm) cuts.push_back(i);
  cuts.push_back(n);

  std::vector<StableSegment> segments;
  for (std::size_t s = 0; s + 1 < cuts.size(); ++s) {
    StableSegment seg;
    seg.begin = cuts[s];
    seg.end = cuts[s + 1];
    seg.t_begin_s = trace.times_s[seg.begin];
    seg.t_end_s = seg.end < n ? trace.times_s[seg.end] : trace.times_s[n - 1];
    if (seg.end - seg.begin >= 2 && seg.duration_s() + 1e-9 >= min_dwell_s) segments.push_back(seg);
    else if (cuts.size() == 2) segments.push_back(seg);  // a single segment always survives
  }
  return segments;
}

inline const StableSegment& longest_segment(const std::vector<StableSegment>& segments) {
  if (segments.empty()) throw Error(Error::Kind::Invalid, "no stable segments");
  std::size_t best = 0;
  for (std::size_t i = 1; i < segments.size(); ++i)
    if (segments[i].duration_s() > segments[best].duration_s()) best = i;
  return segments[best];
}

struct GateSet {
  int n_gates = 5;
  std::vector<double> amplitude_edges;               // n_gates + 1 sorted values
  std::vector<std::vector<std::size_t>> event_index; // per gate, indices into the stream
  std::vector<std::pair<double, double>> accept_windows_s;  // body-motion-free time ranges

  int gate_of_amplitude(double a) const {
    // Nearest gate for amplitudes outside every bin.
    if (n_gates <= 1) return 0;
    if (a <= amplitude_edges.front()) return 0;
    if (a >= amplitude_edges.back()) return n_gates - 1;
    for (int g = 0; g < n_gates; ++g)
      if (a <= amplitude_edges[static_cast<std::size_t>(g) + 1]) return g;
    return n_gates - 1;
  }
};

// Equal-count amplitude quantile gating over the accepted samples. Events
// are assigned by the surrogate amplitude at their timestamp (nearest
// sample); events outside the accept windows are excluded.
inline GateSet amplitude_gates(const SurrogateTrace& trace, const EventStream& stream, int n_gates = 5,
                               const std::vector<std::pair<double, double>>& accept_windows = {}) {
  if (n_gates < 1) throw Error(Error::Kind::Invalid, "amplitude_gates: n_gates must be >= 1");
  auto accepted_time = [&](double t) {
    if (accept_windows.empty()) return true;
    for (const auto& w : accept_windows)
      if (t >= w.first && t < w.second) return true;
    return false;
  };

  std::vector<double> accepted;
  accepted.reserve(trace.samples.size());
  for (std::size_t k = 0; k < trace.samples.size(); ++k)
    if (accepted_time(trace.time_of(k))) accepted.push_back(trace.samples[k]);
  if (accepted.empty()) throw Error(Error::Kind::Invalid, "amplitude_gates: no accepted samples");
  std::sort(accepted.begin(), accepted.end());

  GateSet gs;
  gs.accept_windows_s = accept_windows;
  if (accepted.front() == accepted.back()) {
    gs.n_gates = 1;  // degenerate constant trace
    gs.amplitude_edges = {accepted.front(), accepted.back()};
  } else {
    gs.n_gates = n_gates;
    gs.amplitude_edges.resize(static_cast<std::size_t>(n_gates) + 1);
    for (int g = 0; g <= n_gates; ++g) {
      const double q = static_cast<double>(g) / n_gates;
      const double pos = q * (accepted.size() - 1);
      const auto i0 = static_cast<std::size_t>(pos);
      const auto i1 = std::min(i0 + 1, accepted.size() - 1);
      const double f = pos - i0;
      gs.amplitude_edges[static_cast<std::size_t>(g)] = accepted[i0] * (1.0 - f) + accepted[i1] * f;
    }
  }

  gs.event_index.assign(static_cast<std::size_t>(gs.n_gates), {});
  for (std::size_t k = 0; k < stream.events.size(); ++k) {
    const double t = stream.events[k].time_ms * 1e-3;
    if (!accepted_time(t)) continue;
    const int g = gs.gate_of_amplitude(trace.amplitude_at(t));
    gs.event_index[static_cast<std::size_t>(g)].push_back(k);
  }
  return gs;
}

// Reference-frame rule: within the first `window_s` seconds, the frame with
// the highest COD z-coordinate (end-expiration); ties resolve to the
// earliest frame. Frames with zero mass are skipped.
inline int select_reference(const PciSeries& series, double window_s = 5.0) {
  if (series.n_frames() < 1) throw Error(Error::Kind::Invalid, "select_reference: empty series");
  if (series.frame_start(series.n_frames() - 1) + series.dt_s < window_s)
    throw Error(Error::Kind::Invalid, "select_reference: series shorter than the selection window");
  int best = -1;
  double best_z = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < series.n_frames() && series.frame_start(i) < window_s; ++i) {
    if (!(series.frames[i].total() > 0.0)) continue;
    const double z = compute_cod(series.frames[i]).z;
    if (z > best_z + 1e-12) {
      best_z = z;
      best = i;
    }
  }
  if (best < 0) best = 0;  // all-empty window: fall back to the first frame
  return best;
}

struct TrainingPair {
  int frame = 0;  // PCI frame index
  int gate = 0;   // index of the paired gated reconstruction
};

// Per gate, uniformly samples ceil(fraction * frames-in-gate) PCI frames and
// pairs them with that gate's reconstruction. Frames are assigned to gates
// by their mid-time surrogate amplitude; frames outside the accept windows
// are skipped, as are empty gates.
inline std::vector<TrainingPair> extract_training_pairs(const GateSet& gates, const SurrogateTrace& trace,
                                                        const PciSeries& series, double fraction = 0.10,
                                                        std::uint64_t seed = 0) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw Error(Error::Kind::Invalid, "extract_training_pairs: fraction must be in (0, 1]");
  auto accepted_time = [&](double t) {
    if (gates.accept_windows_s.empty()) return true;
    for (const auto& w : gates.accept_windows_s)
      if (t >= w.first && t < w.second) return true;
    return false;
  };

  std::vector<std::vector<int>> frames_in_gate(static_cast<std::size_t>(gates.n_gates));
  for (int f = 0; f < series.n_frames(); ++f) {
    const double t = series.frame_mid(f);
    if (!accepted_time(t)) continue;
    frames_in_gate[static_cast<std::size_t>(gates.gate_of_amplitude(trace.amplitude_at(t)))].push_back(f);
  }

  std::vector<TrainingPair> pairs;
  for (int g = 0; g < gates.n_gates; ++g) {
    auto& candidates = frames_in_gate[static_cast<std::size_t>(g)];
    if (candidates.empty()) continue;  // empty gate: skipped
    const auto want = static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(candidates.size())) + 0.5);
    Rng rng = Rng::stream(seed, 0x47415445ULL, static_cast<std::uint64_t>(g));
    // Partial Fisher-Yates: the first `want` positions are a uniform sample.
    for (std::size_t i = 0; i < want && i < candidates.size(); ++i) {
      const auto j = i + rng.uniform_index(candidates.size() - i);
      std::swap(candidates[i], candidates[j]);
      pairs.push_back({candidates[i], g});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const TrainingPair& a, const TrainingPair& b) {
    return a.frame < b.frame;
  });
  return pairs;
}

// --- Denoiser interface ------------------------------------------------------

// Volume-to-volume denoiser for PCI frames; `amplitude` is the surrogate
// value at the frame's mid-time. Outputs are nonnegative on the same grid.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Volume denoise(const Volume& pci, double amplitude) const = 0;
  virtual std::string id() const = 0;
};

// Returns the gated reconstruction whose amplitude bin contains the frame
// amplitude (the mapping a trained denoising network approximates).
class GateMatchDenoiser final : public Denoiser {
 public:
  GateMatchDenoiser(GateSet gates, std::vector<Volume> gated_recons)
      : gates_(std::move(gates)), gated_(std::move(gated_recons)) {
    if (static_cast<int>(gated_.size()) != gates_.n_gates)
      throw Error(Error::Kind::Invalid, "GateMatchDenoiser: one reconstruction per gate required");
  }

  Volume denoise(const Volume& pci, double amplitude) const override {
    (void)pci;
    return gated_[static_cast<std::size_t>(gates_.gate_of_amplitude(amplitude))];
  }
  std::string id() const override { return "gate_match"; }

 private:
  GateSet gates_;
  std::vector<Volume> gated_;
};

// Mass-preserving Gaussian smoothing (separable, truncated at 3 sigma).
class GaussianDenoiser final : public Denoiser {
 public:
  explicit GaussianDenoiser(double fwhm_mm = 12.0) : fwhm_mm_(fwhm_mm) {
    if (fwhm_mm_ < 0.0) throw Error(Error::Kind::Invalid, "GaussianDenoiser: FWHM must be >= 0");
  }

  Volume denoise(const Volume& pci, double) const override { return smooth(pci, fwhm_mm_); }
  std::string id() const override { return "gaussian"; }

  static Volume smooth(const Volume& v, double fwhm_mm) {
    if (fwhm_mm <= 0.0) return v;
    const double mass_in = v.total();
    Volume out = v;
    const double sigma_mm = fwhm_mm / 2.3548200450309493;
    for (int axis = 0; axis < 3; ++axis) {
      const double sigma_vox = sigma_mm / v.grid.voxel_size[axis];
      const int radius = static_cast<int>(std::ceil(3.0 * sigma_vox));
      if (radius < 1) continue;
      std::vector<double> kernel(static_cast<std::size_t>(2 * radius) + 1);
      double ksum = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        kernel[static_cast<std::size_t>(k + radius)] = std::exp(-0.5 * k * k / (sigma_vox * sigma_vox));
        ksum += kernel[static_cast<std::size_t>(k + radius)];
      }
      for (auto& k : kernel) k /= ksum;
      out = convolve_axis(out, kernel, radius, axis);
    }
    const double mass_out = out.total();
    if (mass_out > 0.0 && mass_in > 0.0) {
      const auto scale = static_cast<float>(mass_in / mass_out);
      for (auto& x : out.data) x *= scale;
    }
    return out;
  }

 private:
  static Volume convolve_axis(const Volume& v, const std::vector<double>& kernel, int radius, int axis) {
    Volume out(v.grid);
    const auto& d = v.grid.dims;
    for (int iz = 0; iz < d[2]; ++iz)
      for (int iy = 0; iy < d[1]; ++iy)
        for (int ix = 0; ix < d[0]; ++ix) {
          double s = 0.0;
          for (int k = -radius; k <= radius; ++k) {
            int jx = ix, jy = iy, jz = iz;
            if (axis == 0) jx += k;
            else if (axis == 1) jy += k;
            else jz += k;
            if (jx < 0 || jy < 0 || jz < 0 || jx >= d[0] || jy >= d[1] || jz >= d[2]) continue;
            s += kernel[static_cast<std::size_t>(k + radius)] * v.at(jx, jy, jz);
          }
          out.at(ix, iy, iz) = static_cast<float>(s);
        }
    return out;
  }

  double fwhm_mm_;
};

// Applies the denoiser frame-by-frame (frame-parallel, deterministic).
inline PciSeries denoise_series(const Denoiser& d, const PciSeries& series, const SurrogateTrace& trace) {
  PciSeries out;
  out.dt_s = series.dt_s;
  out.t0_s = series.t0_s;
  out.frames.assign(series.frames.size(), Volume{});
  for_chunks(series.frames.size(), series.frames.size(), [&](std::size_t f, std::size_t, std::size_t) {
    out.frames[f] = d.denoise(series.frames[f], trace.amplitude_at(series.frame_mid(static_cast<int>(f))));
  });
  return out;
}

// --- CSV export --------------------------------------------------------------

inline std::string cod_trace_csv(const CodTrace& tr) {
  std::ostringstream os;
  os << "time_s,x_mm,y_mm,z_mm\n";
  char line[160];
  for (std::size_t i = 0; i < tr.size(); ++i) {
    std::snprintf(line, sizeof(line), "%.6f,%.6f,%.6f,%.6f\n", tr.times_s[i], tr.cod_mm[i].x,
                  tr.cod_mm[i].y, tr.cod_mm[i].z);
    os << line;
  }
  return os.str();
}

inline std::string surrogate_csv(const SurrogateTrace& tr) {
  std::ostringstream os;
  os << "time_s,amplitude\n";
  char line[80];
  for (std::size_t i = 0; i < tr.samples.size(); ++i) {
    std::snprintf(line, sizeof(line), "%.6f,%.6f\n", tr.time_of(i), tr.samples[i]);
    os << line;
  }
  return os.str();
}

}  // namespace umcpet
