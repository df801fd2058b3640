#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "umcpet/common.hpp"
#include "umcpet/geometry.hpp"
#include "umcpet/parallel.hpp"
#include "umcpet/phantom.hpp"
#include "umcpet/rng.hpp"

namespace umcpet {

struct ListModeEvent {
  std::uint32_t time_ms = 0;
  std::uint32_t crystal_a = 0;
  std::uint32_t crystal_b = 0;
  std::int8_t tof_bin = 0;
};

struct EventStream {
  std::uint64_t geometry_hash = 0;
  double duration_s = 0.0;
  double half_life_s = 6586.0;  // F-18
  std::vector<ListModeEvent> events;

  std::size_t count() const { return events.size(); }

  // Events are kept sorted by time; [t0, t1) slices come from binary search.
  std::pair<std::size_t, std::size_t> window(double t0_s, double t1_s) const {
    auto lo = static_cast<std::uint64_t>(std::max(0.0, t0_s) * 1000.0);
    auto hi = static_cast<std::uint64_t>(std::max(0.0, t1_s) * 1000.0);
    auto cmp = [](const ListModeEvent& e, std::uint64_t t) { return e.time_ms < t; };
    const auto b = std::lower_bound(events.begin(), events.end(), lo, cmp) - events.begin();
    const auto e = std::lower_bound(events.begin(), events.end(), hi, cmp) - events.begin();
    return {static_cast<std::size_t>(b), static_cast<std::size_t>(e)};
  }
};

// Multiplicative decay correction back to scan start: 2^(t / half_life).
inline double decay_factor(double t_s, double half_life_s) {
  if (!(half_life_s > 0.0)) throw Error(Error::Kind::Invalid, "decay_factor: half_life must be > 0");
  return std::exp2(t_s / half_life_s);
}

// Randoms rate on one LOR from the singles rates of its two crystals;
// `coincidence_window_s` is the full window (the 2*tau_w product term).
inline double randoms_rate(double singles_a_per_s, double singles_b_per_s, double coincidence_window_s) {
  if (singles_a_per_s < 0.0 || singles_b_per_s < 0.0 || coincidence_window_s < 0.0)
    throw Error(Error::Kind::Invalid, "randoms_rate: rates and window must be >= 0");
  return coincidence_window_s * singles_a_per_s * singles_b_per_s;
}

// The per-LOR rate divided uniformly across TOF bins.
inline double randoms_rate_per_bin(double singles_a_per_s, double singles_b_per_s,
                                   double coincidence_window_s, int n_tof_bins) {
  return randoms_rate(singles_a_per_s, singles_b_per_s, coincidence_window_s) / n_tof_bins;
}

// Per-event multiplicative corrections plus uniform randoms/scatter rates
// (counts per second per LOR per TOF bin).
struct CorrectionFactors {
  std::vector<float> decay;        // L_k >= 1
  std::vector<float> attenuation;  // A_k in (0, 1]
  std::vector<float> normalization;
  double randoms_per_lor_bin_per_s = 0.0;
  double scatter_per_lor_bin_per_s = 0.0;

  static CorrectionFactors trivial(std::size_t n) {
    CorrectionFactors f;
    f.decay.assign(n, 1.0f);
    f.attenuation.assign(n, 1.0f);
    f.normalization.assign(n, 1.0f);
    return f;
  }
};

// Builds L_k from the stream clock, A_k through a static mu-map along the
// straight LOR (the usual CT-derived attenuation convention), N_k = 1.
inline CorrectionFactors compute_correction_factors(const EventStream& stream, const ScannerGeometry& geom,
                                                    const Volume* mu_map = nullptr,
                                                    double randoms_per_lor_bin_per_s = 0.0,
                                                    double scatter_per_lor_bin_per_s = 0.0) {
  CorrectionFactors f;
  const std::size_t n = stream.count();
  f.decay.resize(n);
  f.attenuation.assign(n, 1.0f);
  f.normalization.assign(n, 1.0f);
  f.randoms_per_lor_bin_per_s = randoms_per_lor_bin_per_s;
  f.scatter_per_lor_bin_per_s = scatter_per_lor_bin_per_s;
  for_chunks(n, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t k = b; k < e; ++k) {
      const auto& ev = stream.events[k];
      f.decay[k] = static_cast<float>(decay_factor(ev.time_ms * 1e-3, stream.half_life_s));
      if (mu_map != nullptr) {
        const LOR lor = lor_between(geom, static_cast<int>(ev.crystal_a), static_cast<int>(ev.crystal_b));
        f.attenuation[k] = static_cast<float>(attenuation_factor(lor, *mu_map));
      }
    }
  });
  return f;
}

// --- Monte Carlo simulation --------------------------------------------------

struct SimOptions {
  double half_life_s = 6586.0;       // F-18; drives the decay thinning
  double randoms_rate_per_s = 0.0;   // total uniform-background coincidence rate
  double attenuation_step_mm = 2.0;  // sampling step for analytic mu line integrals
  double chunk_length_s = 1.0;       // time chunk for independent RNG streams
};

namespace detail {

inline Vec3 sample_in_ellipsoid(const EllipsoidComponent& c, Rng& rng) {
  for (;;) {
    const double x = rng.uniform(-1.0, 1.0);
    const double y = rng.uniform(-1.0, 1.0);
    const double z = rng.uniform(-1.0, 1.0);
    if (x * x + y * y + z * z <= 1.0)
      return {c.center_mm.x + x * c.semi_axes_mm.x, c.center_mm.y + y * c.semi_axes_mm.y,
              c.center_mm.z + z * c.semi_axes_mm.z};
  }
}

inline Vec3 sample_direction(Rng& rng) {
  const double cz = rng.uniform(-1.0, 1.0);
  const double phi = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  const double s = std::sqrt(std::max(0.0, 1.0 - cz * cz));
  return {s * std::cos(phi), s * std::sin(phi), cz};
}

}  // namespace detail

// Inhomogeneous Poisson list-mode simulation from the moving phantom.
// Annihilation points are drawn from the transported t=0 activity (thinned
// by radioactive decay), photon pairs fly back-to-back isotropically, both
// cylinder hits map to their nearest crystals, survival is thinned by the
// time-t attenuation, and the TOF bin is the binned Gaussian-blurred true
// position. Uniform random coincidences are superimposed. Time chunks use
// independent RNG substreams, so results do not depend on the thread count.
inline EventStream simulate(const PhantomSpec& spec, const ScannerGeometry& geom, double duration_s,
                            std::uint64_t seed, const SimOptions& opts = {}) {
  spec.validate();
  geom.validate();
  if (duration_s > spec.total_duration_s)
    throw Error(Error::Kind::Invalid, "simulate: duration exceeds phantom duration");

  EventStream out;
  out.geometry_hash = geom.hash();
  out.duration_s = duration_s;
  out.half_life_s = opts.half_life_s;

  const double rate0 = spec.total_rate_per_s();
  const int n_components = static_cast<int>(spec.components.size());
  std::vector<double> cum_rate(spec.components.size());
  {
    double acc = 0.0;
    for (int i = 0; i < n_components; ++i) {
      acc += spec.components[i].activity_per_s_mm3 * spec.components[i].volume_mm3();
      cum_rate[i] = acc;
    }
  }
  bool has_mu = false;
  for (const auto& c : spec.components) has_mu |= c.mu_per_mm > 0.0;

  const auto n_chunks = static_cast<std::size_t>(std::ceil(duration_s / opts.chunk_length_s));
  std::vector<std::vector<ListModeEvent>> per_chunk(n_chunks);

  const double radius = geom.ring_radius_mm;
  const double log_half = std::log(2.0) / out.half_life_s;

  for_chunks(n_chunks, n_chunks, [&](std::size_t c, std::size_t, std::size_t) {
    const double t_begin = c * opts.chunk_length_s;
    const double t_end = std::min(duration_s, t_begin + opts.chunk_length_s);
    std::vector<ListModeEvent> trues;
    std::vector<ListModeEvent> randoms;

    if (rate0 > 0.0) {
      Rng rng = Rng::stream(seed, c, 0);
      double t = t_begin + rng.exponential(rate0);
      while (t < t_end) {
        const double t_event = t;
        t += rng.exponential(rate0);

        if (rng.uniform() >= std::exp(-log_half * t_event)) continue;  // isotope decay

        double pick = rng.uniform(0.0, rate0);
        int comp = 0;
        while (comp < n_components - 1 && pick > cum_rate[comp]) ++comp;

        const Vec3 x0 = detail::sample_in_ellipsoid(spec.components[comp], rng);
        const Vec3 x = spec.motion.forward(x0, t_event);
        const Vec3 dir = detail::sample_direction(rng);

        // Photon pair vs detector cylinder.
        const double a2 = dir.x * dir.x + dir.y * dir.y;
        if (a2 < 1e-12) continue;
        const double b2 = x.x * dir.x + x.y * dir.y;
        const double c2 = x.x * x.x + x.y * x.y - radius * radius;
        const double disc = b2 * b2 - a2 * c2;
        if (disc <= 0.0) continue;
        const double sq = std::sqrt(disc);
        const double s1 = (-b2 - sq) / a2;
        const double s2 = (-b2 + sq) / a2;
        const Vec3 p1 = x + dir * s1;
        const Vec3 p2 = x + dir * s2;
        const int ca = geom.nearest_crystal(p1);
        const int cb = geom.nearest_crystal(p2);
        if (ca < 0 || cb < 0 || ca == cb) continue;

        const Vec3 face_a = geom.crystal_position(ca);
        const Vec3 face_b = geom.crystal_position(cb);

        if (has_mu) {
          // Both photons traverse the full chord between the faces.
          const Vec3 seg = face_b - face_a;
          const double len = seg.norm();
          const int n_steps = std::max(1, static_cast<int>(std::ceil(len / opts.attenuation_step_mm)));
          const double h = len / n_steps;
          double integral = 0.0;
          for (int sidx = 0; sidx < n_steps; ++sidx) {
            const Vec3 q = face_a + seg * ((sidx + 0.5) / n_steps);
            integral += spec.mu_at(q, t_event) * h;
          }
          if (rng.uniform() >= std::exp(-integral)) continue;
        }

        // TOF: true signed position along the detected LOR, Gaussian noise.
        const Vec3 mid = (face_a + face_b) * 0.5;
        Vec3 axis = face_b - face_a;
        axis = axis / axis.norm();
        const double u_true = (x - mid).dot(axis);
        const double u_meas = u_true + geom.tof_kernel_sigma_mm * rng.normal();
        const int tau = tof_bin_of_position(geom, u_meas);

        trues.push_back({static_cast<std::uint32_t>(t_event * 1000.0), static_cast<std::uint32_t>(ca),
                         static_cast<std::uint32_t>(cb), static_cast<std::int8_t>(tau)});
      }
    }

    if (opts.randoms_rate_per_s > 0.0) {
      Rng rng = Rng::stream(seed, c, 1);
      const auto n_cry = static_cast<std::uint64_t>(geom.n_crystals());
      double t = t_begin + rng.exponential(opts.randoms_rate_per_s);
      while (t < t_end) {
        const auto ca = static_cast<std::uint32_t>(rng.uniform_index(n_cry));
        std::uint32_t cb = ca;
        while (cb == ca) cb = static_cast<std::uint32_t>(rng.uniform_index(n_cry));
        const auto tau = static_cast<std::int8_t>(rng.uniform_index(static_cast<std::uint64_t>(geom.n_tof_bins)));
        randoms.push_back({static_cast<std::uint32_t>(t * 1000.0), ca, cb, tau});
        t += rng.exponential(opts.randoms_rate_per_s);
      }
    }

    // Merge the two sorted substreams of this chunk.
    std::vector<ListModeEvent>& merged = per_chunk[c];
    merged.resize(trues.size() + randoms.size());
    std::merge(trues.begin(), trues.end(), randoms.begin(), randoms.end(), merged.begin(),
               [](const ListModeEvent& a, const ListModeEvent& b) { return a.time_ms < b.time_ms; });
  });

  std::size_t total = 0;
  for (const auto& v : per_chunk) total += v.size();
  out.events.reserve(total);
  for (const auto& v : per_chunk) out.events.insert(out.events.end(), v.begin(), v.end());
  return out;
}

// --- Event file I/O ----------------------------------------------------------
// Little-endian: magic "FMLM", version u16, geometry hash u64, half_life f64,
// duration f64, count u64, then 16-byte records (time_ms u32, crystal_a u32,
// crystal_b u32, tof_bin i8, 3 zero pad bytes).

inline constexpr std::uint16_t kEventFileVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& buf, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));  // host is little-endian
}

template <typename T>
T get_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

}  // namespace detail

inline void write_stream(const EventStream& stream, const std::string& path) {
  std::string buf;
  buf.reserve(38 + 16 * stream.events.size());
  buf.append("FMLM", 4);
  detail::put_le<std::uint16_t>(buf, kEventFileVersion);
  detail::put_le<std::uint64_t>(buf, stream.geometry_hash);
  detail::put_le<double>(buf, stream.half_life_s);
  detail::put_le<double>(buf, stream.duration_s);
  detail::put_le<std::uint64_t>(buf, stream.events.size());
  for (const auto& e : stream.events) {
    detail::put_le<std::uint32_t>(buf, e.time_ms);
    detail::put_le<std::uint32_t>(buf, e.crystal_a);
    detail::put_le<std::uint32_t>(buf, e.crystal_b);
    detail::put_le<std::int8_t>(buf, e.tof_bin);
    buf.append(3, '\0');
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Error::Kind::Invalid, "write_stream: cannot open " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw Error(Error::Kind::Invalid, "write_stream: write failed for " + path);
}

inline EventStream read_stream(const std::string& path,
                               std::optional<std::uint64_t> expected_geometry_hash = std::nullopt) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Error::Kind::Invalid, "read_stream: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (buf.size() < 38) throw Error(Error::Kind::Truncated, "read_stream: file shorter than header");
  if (std::memcmp(buf.data(), "FMLM", 4) != 0)
    throw Error(Error::Kind::Format, "read_stream: bad magic (not an event file)");
  const auto version = detail::get_le<std::uint16_t>(buf.data() + 4);
  if (version != kEventFileVersion)
    throw Error(Error::Kind::Version, "read_stream: unsupported event file version");

  EventStream s;
  s.geometry_hash = detail::get_le<std::uint64_t>(buf.data() + 6);
  s.half_life_s = detail::get_le<double>(buf.data() + 14);
  s.duration_s = detail::get_le<double>(buf.data() + 22);
  const auto count = detail::get_le<std::uint64_t>(buf.data() + 30);
  if (buf.size() < 38 + 16 * count)
    throw Error(Error::Kind::Truncated, "read_stream: file shorter than header-declared count");
  if (buf.size() > 38 + 16 * count)
    throw Error(Error::Kind::Format, "read_stream: trailing bytes after last record");
  if (expected_geometry_hash && *expected_geometry_hash != s.geometry_hash)
    throw Error(Error::Kind::GeometryHash, "read_stream: event file belongs to a different scanner geometry");

  s.events.resize(count);
  const char* p = buf.data() + 38;
  for (std::uint64_t k = 0; k < count; ++k, p += 16) {
    s.events[k].time_ms = detail::get_le<std::uint32_t>(p);
    s.events[k].crystal_a = detail::get_le<std::uint32_t>(p + 4);
    s.events[k].crystal_b = detail::get_le<std::uint32_t>(p + 8);
    s.events[k].tof_bin = detail::get_le<std::int8_t>(p + 12);
  }
  return s;
}

}  // namespace umcpet
