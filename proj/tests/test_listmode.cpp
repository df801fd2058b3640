#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "helpers.hpp"
#include "umcpet/listmode.hpp"

using namespace umcpet;
using testutil::ring_scanner;
using testutil::scratch_dir;
using testutil::sphere_phantom;

TEST(DecayFactor, ClosedFormValues) {
  EXPECT_DOUBLE_EQ(decay_factor(0.0, 6586.0), 1.0);
  EXPECT_DOUBLE_EQ(decay_factor(6586.0, 6586.0), 2.0);
  EXPECT_NEAR(decay_factor(120.0, 6586.0), std::pow(2.0, 120.0 / 6586.0), 1e-12);
  EXPECT_NEAR(decay_factor(120.0, 6586.0), 1.0127, 1e-4);
  EXPECT_THROW(decay_factor(1.0, 0.0), Error);
}

TEST(RandomsRate, ClosedForm) {
  EXPECT_DOUBLE_EQ(randoms_rate(0.0, 1000.0, 8e-9), 0.0);
  EXPECT_NEAR(randoms_rate(1000.0, 1000.0, 8e-9), 8e-3, 1e-15);
  EXPECT_NEAR(randoms_rate_per_bin(1000.0, 1000.0, 8e-9, 13), 8e-3 / 13.0, 1e-15);
}

TEST(Simulate, ZeroActivityZeroRandomsGivesEmptyStream) {
  PhantomSpec spec = sphere_phantom({0, 0, 0}, 20.0, 0.0);
  const ScannerGeometry geom = ring_scanner(2, 16);
  const EventStream s = simulate(spec, geom, 10.0, 1);
  EXPECT_EQ(s.count(), 0u);
}

TEST(Simulate, PointSourceCountMatchesPoissonExpectation) {
  // Long scanner: acceptance for a centered point is H / sqrt(H^2 + R^2).
  const double radius = 60.0, pitch = 5.0;
  const int rings = 48;
  const ScannerGeometry geom = ring_scanner(rings, 24, radius, pitch);
  const double h = 0.5 * rings * pitch;
  const double acceptance = h / std::hypot(h, radius);

  const double rate = 2000.0, duration = 5.0;
  PhantomSpec spec = sphere_phantom({0, 0, 0}, 0.5, rate / (4.0 / 3.0 * M_PI * 0.125));
  spec.total_duration_s = 100.0;

  double mean = 0.0;
  const int n_seeds = 5;
  SimOptions opts;
  opts.half_life_s = 1e12;  // decay off: the oracle is the plain Poisson mean
  for (int seed = 0; seed < n_seeds; ++seed)
    mean += static_cast<double>(simulate(spec, geom, duration, static_cast<std::uint64_t>(seed) + 1, opts).count());
  mean /= n_seeds;
  const double expected = rate * duration * acceptance;
  EXPECT_NEAR(mean, expected, 4.0 * std::sqrt(rate * duration));
}

TEST(Simulate, FixedSeedIsBitIdenticalAndThreadCountInvariant) {
  PhantomSpec spec = sphere_phantom({10, 0, -5}, 25.0, 0.05);
  spec.motion.respiratory.amplitude_mm = {0, 0, 6};
  const ScannerGeometry geom = ring_scanner(4, 24, 80.0, 5.0);

  auto& opts = run_options();
  const int saved = opts.threads;
  opts.threads = 1;
  const EventStream a = simulate(spec, geom, 8.0, 42);
  const EventStream b = simulate(spec, geom, 8.0, 42);
  opts.threads = 4;
  const EventStream c = simulate(spec, geom, 8.0, 42);
  opts.threads = saved;

  ASSERT_EQ(a.count(), b.count());
  ASSERT_EQ(a.count(), c.count());
  for (std::size_t k = 0; k < a.count(); ++k) {
    EXPECT_EQ(a.events[k].time_ms, b.events[k].time_ms);
    EXPECT_EQ(a.events[k].crystal_a, c.events[k].crystal_a);
    EXPECT_EQ(a.events[k].crystal_b, c.events[k].crystal_b);
    EXPECT_EQ(a.events[k].tof_bin, c.events[k].tof_bin);
  }
  EXPECT_GT(a.count(), 100u);
}

TEST(Simulate, EventTimesSortedAndWithinDuration) {
  PhantomSpec spec = sphere_phantom({0, 0, 0}, 30.0, 0.03);
  const ScannerGeometry geom = ring_scanner(4, 24, 80.0, 5.0);
  SimOptions opts;
  opts.randoms_rate_per_s = 50.0;
  const EventStream s = simulate(spec, geom, 12.0, 7, opts);
  ASSERT_GT(s.count(), 0u);
  for (std::size_t k = 1; k < s.count(); ++k) EXPECT_LE(s.events[k - 1].time_ms, s.events[k].time_ms);
  EXPECT_LT(s.events.back().time_ms, 12000u);
}

TEST(Simulate, StaticTimeHistogramIsFlat) {
  PhantomSpec spec = sphere_phantom({0, 0, 0}, 30.0, 0.027, 0.0, 1000.0);
  const ScannerGeometry geom = ring_scanner(6, 24, 70.0, 6.0);
  EventStream s = simulate(spec, geom, 40.0, 3);
  // remove the (tiny) decay trend over 40 s by construction: half-life 6586 s
  // changes the rate by <0.5%, well inside the chi^2 tolerance.
  ASSERT_GT(s.count(), 10000u);
  const int bins = 100;
  std::vector<double> counts(bins, 0.0);
  for (const auto& ev : s.events)
    counts[std::min<std::size_t>(static_cast<std::size_t>(ev.time_ms / (40000.0 / bins)), bins - 1)] += 1.0;
  const double expected = static_cast<double>(s.count()) / bins;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // chi^2 inverse CDF at p=0.99, df=99 (precomputed)
  EXPECT_LT(chi2, 134.6416168557);
}

TEST(Simulate, AttenuationThinningMatchesBeerLambert) {
  // Point source at the center of a uniform-mu sphere: every LOR crosses a
  // 2*rho chord, so the detected fraction is exp(-mu * 2 * rho).
  const double rho = 30.0, mu = 0.01;
  const ScannerGeometry geom = ring_scanner(24, 24, 70.0, 6.0);
  PhantomSpec hot = sphere_phantom({0, 0, 0}, 0.5, 4000.0, 0.0, 100.0);
  PhantomSpec cold = hot;
  EllipsoidComponent shell;
  shell.center_mm = {0, 0, 0};
  shell.semi_axes_mm = {rho, rho, rho};
  shell.activity_per_s_mm3 = 0.0;
  shell.mu_per_mm = mu;
  cold.components.push_back(shell);

  double ratio_acc = 0.0;
  const int n_seeds = 3;
  for (int seed = 1; seed <= n_seeds; ++seed) {
    const auto without = simulate(hot, geom, 12.0, static_cast<std::uint64_t>(seed)).count();
    const auto with = simulate(cold, geom, 12.0, static_cast<std::uint64_t>(seed)).count();
    ratio_acc += static_cast<double>(with) / static_cast<double>(without);
  }
  const double ratio = ratio_acc / n_seeds;
  const double expected = std::exp(-mu * 2.0 * rho);
  EXPECT_NEAR(ratio, expected, 0.02 * expected);
}

TEST(Simulate, UniformRandomsRateRoundTrip) {
  // Inject uniform randoms at the rate implied by singles s and window w,
  // then recover the per-LOR rate from the stream.
  const ScannerGeometry geom = ring_scanner(2, 16, 80.0, 5.0);
  const int n = geom.n_crystals();
  const double n_pairs = n * (n - 1) / 2.0;
  const double singles = 5000.0, window = 8e-9;
  const double rate_per_lor = randoms_rate(singles, singles, window);

  PhantomSpec spec = sphere_phantom({0, 0, 0}, 10.0, 0.0, 0.0, 1000.0);
  SimOptions opts;
  opts.randoms_rate_per_s = rate_per_lor * n_pairs;
  const double duration = 60.0;
  const EventStream s = simulate(spec, geom, duration, 11, opts);
  const double estimated = static_cast<double>(s.count()) / (duration * n_pairs);
  EXPECT_NEAR(estimated, rate_per_lor, 0.10 * rate_per_lor);

  // and the TOF bins are uniformly populated
  std::vector<double> bin_counts(static_cast<std::size_t>(geom.n_tof_bins), 0.0);
  for (const auto& ev : s.events) bin_counts[static_cast<std::size_t>(ev.tof_bin)] += 1.0;
  const double per_bin = static_cast<double>(s.count()) / geom.n_tof_bins;
  for (double c : bin_counts) EXPECT_NEAR(c, per_bin, 5.0 * std::sqrt(per_bin));
}

TEST(EventFile, RoundTripIsByteIdentical) {
  PhantomSpec spec = sphere_phantom({0, 0, 0}, 30.0, 0.03);
  const ScannerGeometry geom = ring_scanner(4, 24, 80.0, 5.0);
  SimOptions opts;
  opts.randoms_rate_per_s = 20.0;
  const EventStream s = simulate(spec, geom, 10.0, 99, opts);
  ASSERT_GT(s.count(), 1000u);

  const std::string dir = scratch_dir("eventfile");
  write_stream(s, dir + "/a.flm");
  const EventStream r = read_stream(dir + "/a.flm", geom.hash());
  write_stream(r, dir + "/b.flm");

  std::ifstream fa(dir + "/a.flm", std::ios::binary), fb(dir + "/b.flm", std::ios::binary);
  const std::string bytes_a((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  const std::string bytes_b((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  EXPECT_EQ(bytes_a, bytes_b);
  EXPECT_EQ(bytes_a.size(), 38u + 16u * s.count());
}

TEST(EventFile, DistinctErrorClasses) {
  PhantomSpec spec = sphere_phantom({0, 0, 0}, 20.0, 0.05);
  const ScannerGeometry geom = ring_scanner(2, 16);
  const EventStream s = simulate(spec, geom, 5.0, 5);
  const std::string dir = scratch_dir("eventfile_errors");
  const std::string path = dir + "/events.flm";
  write_stream(s, path);

  auto raw = [&] {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  }();

  {  // corrupt magic -> Format
    std::string bad = raw;
    bad[0] = 'X';
    std::ofstream(dir + "/magic.flm", std::ios::binary) << bad;
    try {
      read_stream(dir + "/magic.flm");
      FAIL() << "expected Format error";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), Error::Kind::Format);
    }
  }
  {  // unsupported version -> Version
    std::string bad = raw;
    bad[4] = 0x7f;
    std::ofstream(dir + "/version.flm", std::ios::binary) << bad;
    try {
      read_stream(dir + "/version.flm");
      FAIL() << "expected Version error";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), Error::Kind::Version);
    }
  }
  {  // truncated record section -> Truncated, not a partial stream
    std::string bad = raw.substr(0, raw.size() - 7);
    std::ofstream(dir + "/trunc.flm", std::ios::binary) << bad;
    try {
      read_stream(dir + "/trunc.flm");
      FAIL() << "expected Truncated error";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), Error::Kind::Truncated);
    }
  }
  {  // geometry hash mismatch -> GeometryHash
    try {
      read_stream(path, geom.hash() + 1);
      FAIL() << "expected GeometryHash error";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), Error::Kind::GeometryHash);
    }
  }
  {  // trailing bytes -> Format
    std::string bad = raw + "zzzz";
    std::ofstream(dir + "/trail.flm", std::ios::binary) << bad;
    try {
      read_stream(dir + "/trail.flm");
      FAIL() << "expected Format error";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), Error::Kind::Format);
    }
  }
}

TEST(CorrectionFactors, DecayAndAttenuationPerEvent) {
  PhantomSpec spec = sphere_phantom({0, 0, 0}, 25.0, 0.01, 0.008, 1000.0);
  const ScannerGeometry geom = ring_scanner(4, 24, 80.0, 5.0);
  EventStream s = simulate(spec, geom, 20.0, 13);
  s.half_life_s = 6586.0;
  ASSERT_GT(s.count(), 100u);

  const VoxelGrid grid = testutil::cube_grid(32, 2.5);
  const Volume mu = mu_volume(spec, 0.0, grid);
  const CorrectionFactors f = compute_correction_factors(s, geom, &mu);
  for (std::size_t k = 0; k < std::min<std::size_t>(200, s.count()); ++k) {
    EXPECT_GE(f.decay[k], 1.0f);
    EXPECT_GT(f.attenuation[k], 0.0f);
    EXPECT_LE(f.attenuation[k], 1.0f);
    EXPECT_FLOAT_EQ(f.normalization[k], 1.0f);
    const double expected_decay = decay_factor(s.events[k].time_ms * 1e-3, s.half_life_s);
    EXPECT_NEAR(f.decay[k], expected_decay, 1e-6);
  }
}
