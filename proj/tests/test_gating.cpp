#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "helpers.hpp"
#include "umcpet/gating.hpp"

using namespace umcpet;
using testutil::cube_grid;
using testutil::gaussian_blob;
using testutil::ring_scanner;
using testutil::sphere_phantom;

TEST(ComputeCod, SymmetricBlobSitsAtGridCenter) {
  const VoxelGrid g = cube_grid(17, 3.0);  // odd: center voxel at the origin
  const Volume v = gaussian_blob(g, {0, 0, 0}, 10.0);
  const Vec3 cod = compute_cod(v);
  EXPECT_NEAR(cod.x, 0.0, 1e-9);
  EXPECT_NEAR(cod.y, 0.0, 1e-9);
  EXPECT_NEAR(cod.z, 0.0, 1e-9);
}

TEST(ComputeCod, TranslatedBlobShiftsTheCentroid) {
  const VoxelGrid g = cube_grid(24, 3.0);
  const Vec3 d{6.0, -3.0, 9.0};
  const Vec3 cod0 = compute_cod(gaussian_blob(g, {0, 0, 0}, 8.0));
  const Vec3 cod1 = compute_cod(gaussian_blob(g, d, 8.0));
  EXPECT_LT(((cod1 - cod0) - d).norm(), 0.05 * 3.0);
}

TEST(ComputeCod, MatchesBruteForceSummation) {
  const VoxelGrid g = cube_grid(9, 2.5);
  Volume v(g);
  Rng rng(3);
  for (auto& x : v.data) x = static_cast<float>(rng.uniform());
  double m = 0, sx = 0, sy = 0, sz = 0;
  for (int iz = 0; iz < 9; ++iz)
    for (int iy = 0; iy < 9; ++iy)
      for (int ix = 0; ix < 9; ++ix) {
        const Vec3 p = g.voxel_center(ix, iy, iz);
        const double w = v.at(ix, iy, iz);
        m += w;
        sx += w * p.x;
        sy += w * p.y;
        sz += w * p.z;
      }
  const Vec3 cod = compute_cod(v);
  EXPECT_NEAR(cod.x, sx / m, 1e-9);
  EXPECT_NEAR(cod.y, sy / m, 1e-9);
  EXPECT_NEAR(cod.z, sz / m, 1e-9);
}

TEST(ComputeCod, ScaleInvariantAndZeroMassIsError) {
  const VoxelGrid g = cube_grid(10, 4.0);
  Volume v = gaussian_blob(g, {3, 2, -5}, 9.0);
  const Vec3 a = compute_cod(v);
  for (auto& x : v.data) x *= 7.5f;
  const Vec3 b = compute_cod(v);
  EXPECT_NEAR((a - b).norm(), 0.0, 1e-6);  // f32 storage rounding
  Volume zero(g, 0.0f);
  EXPECT_THROW(compute_cod(zero), Error);
}

namespace {

CodTrace synthetic_trace(int n, double dt, const std::function<Vec3(double)>& f) {
  CodTrace tr;
  for (int i = 0; i < n; ++i) {
    const double t = (i + 0.5) * dt;
    tr.times_s.push_back(t);
    tr.cod_mm.push_back(f(t));
  }
  return tr;
}

}  // namespace

TEST(DetectBodyMotion, ConstantTraceIsOneSegment) {
  const CodTrace tr = synthetic_trace(240, 0.5, [](double) { return Vec3{1, 2, 3}; });
  const auto segs = detect_body_motion(tr, 3.0, 5.0);
  ASSERT_EQ(segs.size(), 1u);
  EXPECT_EQ(segs[0].begin, 0u);
  EXPECT_EQ(segs[0].end, 240u);
}

TEST(DetectBodyMotion, StepSplitsAtTheStep) {
  const CodTrace tr = synthetic_trace(240, 0.5, [](double t) {
    return t < 60.0 ? Vec3{0, 0, 0} : Vec3{10, 0, 0};
  });
  const auto segs = detect_body_motion(tr, 3.0, 5.0);
  ASSERT_EQ(segs.size(), 2u);
  const double split_time = tr.times_s[segs[1].begin];
  EXPECT_NEAR(split_time, 60.0, 1.0);  // within +-2 samples of the step
}

TEST(DetectBodyMotion, InfiniteThresholdKeepsOneSegment) {
  const CodTrace tr = synthetic_trace(100, 0.5, [](double t) {
    return Vec3{t < 25.0 ? 0.0 : 50.0, 0, 0};
  });
  const auto segs = detect_body_motion(tr, std::numeric_limits<double>::infinity(), 5.0);
  ASSERT_EQ(segs.size(), 1u);
}

TEST(DetectBodyMotion, ShortDwellSegmentsAreDropped) {
  // 10 s stable, 2 s excursion, 10 s stable: the excursion is discarded
  const CodTrace tr = synthetic_trace(44, 0.5, [](double t) {
    if (t < 10.0) return Vec3{0, 0, 0};
    if (t < 12.0) return Vec3{30, 0, 0};
    return Vec3{0, 0, 0};
  });
  const auto segs = detect_body_motion(tr, 3.0, 5.0);
  ASSERT_EQ(segs.size(), 2u);
  for (const auto& s : segs) EXPECT_GE(s.duration_s() + 1e-9, 5.0);
  EXPECT_NEAR(longest_segment(segs).duration_s(), 9.5, 1.5);
}

namespace {

SurrogateTrace ramp_trace(double duration, double rate = 40.0) {
  SurrogateTrace tr;
  tr.sample_rate_hz = rate;
  const auto n = static_cast<std::size_t>(std::ceil(duration * rate));
  for (std::size_t k = 0; k < n; ++k) tr.samples.push_back(static_cast<double>(k));
  return tr;
}

EventStream uniform_time_events(const ScannerGeometry& geom, std::size_t n, double duration,
                                std::uint64_t seed) {
  EventStream s;
  s.geometry_hash = geom.hash();
  s.duration_s = duration;
  Rng rng(seed);
  std::vector<double> times;
  for (std::size_t k = 0; k < n; ++k) times.push_back(rng.uniform(0.0, duration));
  std::sort(times.begin(), times.end());
  for (double t : times)
    s.events.push_back({static_cast<std::uint32_t>(t * 1000.0), 0, 8, 6});
  return s;
}

}  // namespace

TEST(AmplitudeGates, SingleGateTakesEverything) {
  const ScannerGeometry geom = ring_scanner(1, 16);
  const EventStream s = uniform_time_events(geom, 500, 60.0, 2);
  const SurrogateTrace tr = ramp_trace(60.0);
  const GateSet gs = amplitude_gates(tr, s, 1);
  ASSERT_EQ(gs.n_gates, 1);
  EXPECT_EQ(gs.event_index[0].size(), 500u);
}

TEST(AmplitudeGates, UniformAmplitudesBalanceAcrossGates) {
  const ScannerGeometry geom = ring_scanner(1, 16);
  const std::size_t n_events = 20000;
  const EventStream s = uniform_time_events(geom, n_events, 120.0, 9);
  const SurrogateTrace tr = ramp_trace(120.0);  // uniform amplitude distribution
  const GateSet gs = amplitude_gates(tr, s, 5);
  ASSERT_EQ(gs.n_gates, 5);
  std::size_t total = 0;
  for (const auto& idx : gs.event_index) {
    EXPECT_NEAR(static_cast<double>(idx.size()), 0.2 * n_events, 0.01 * n_events);
    total += idx.size();
  }
  EXPECT_EQ(total, n_events);  // a partition: every accepted event in exactly one gate
}

TEST(AmplitudeGates, MonotoneTraceGivesTimeOrderedGates) {
  const ScannerGeometry geom = ring_scanner(1, 16);
  const EventStream s = uniform_time_events(geom, 2000, 100.0, 4);
  const SurrogateTrace tr = ramp_trace(100.0);
  const GateSet gs = amplitude_gates(tr, s, 5);
  // gate index nondecreasing in event time
  std::vector<int> gate_of_event(s.count(), -1);
  for (int g = 0; g < gs.n_gates; ++g)
    for (std::size_t k : gs.event_index[static_cast<std::size_t>(g)]) gate_of_event[k] = g;
  for (std::size_t k = 1; k < s.count(); ++k) EXPECT_GE(gate_of_event[k], gate_of_event[k - 1]);
}

TEST(AmplitudeGates, ConstantTraceCollapsesToOneGate) {
  const ScannerGeometry geom = ring_scanner(1, 16);
  const EventStream s = uniform_time_events(geom, 100, 10.0, 5);
  SurrogateTrace tr;
  tr.sample_rate_hz = 40.0;
  tr.samples.assign(400, 1.25);
  const GateSet gs = amplitude_gates(tr, s, 5);
  EXPECT_EQ(gs.n_gates, 1);
  EXPECT_EQ(gs.event_index[0].size(), 100u);
}

namespace {

PciSeries analytic_series(const PhantomSpec& spec, const VoxelGrid& g, int n_frames, double dt) {
  PciSeries series;
  series.dt_s = dt;
  for (int i = 0; i < n_frames; ++i)
    series.frames.push_back(activity_volume(spec, (i + 0.5) * dt, g));
  return series;
}

}  // namespace

TEST(SelectReference, PicksTheExpirationPeakWithinFiveSeconds) {
  PhantomSpec spec = sphere_phantom({0, 0, 0}, 30.0, 1.0);
  spec.motion.respiratory.amplitude_mm = {0, 0, 8};
  spec.motion.respiratory.period_s = 4.0;
  const VoxelGrid g = cube_grid(24, 4.0);
  const PciSeries series = analytic_series(spec, g, 20, 0.5);
  const int ref = select_reference(series, 5.0);
  // sin^2(pi t / 4) peaks at t = 2 s: the peak frame is index 3 or 4
  EXPECT_NEAR(series.frame_mid(ref), 2.0, 0.5 + 1e-9);
}

TEST(SelectReference, StaticSeriesTieBreaksToFrameZero) {
  PhantomSpec spec = sphere_phantom({0, 0, 0}, 30.0, 1.0);
  const VoxelGrid g = cube_grid(16, 5.0);
  const PciSeries series = analytic_series(spec, g, 12, 0.5);
  EXPECT_EQ(select_reference(series, 5.0), 0);
}

TEST(SelectReference, HalfSecondWindowForcesFrameZero) {
  PhantomSpec spec = sphere_phantom({0, 0, 0}, 30.0, 1.0);
  spec.motion.respiratory.amplitude_mm = {0, 0, 8};
  const VoxelGrid g = cube_grid(16, 5.0);
  const PciSeries series = analytic_series(spec, g, 12, 0.5);
  EXPECT_EQ(select_reference(series, 0.5), 0);
}

TEST(SelectReference, InvariantUnderGlobalScaling) {
  PhantomSpec spec = sphere_phantom({0, 0, 0}, 30.0, 1.0);
  spec.motion.respiratory.amplitude_mm = {0, 0, 8};
  const VoxelGrid g = cube_grid(16, 5.0);
  PciSeries series = analytic_series(spec, g, 12, 0.5);
  const int ref = select_reference(series);
  for (auto& f : series.frames)
    for (auto& v : f.data) v *= 123.0f;
  EXPECT_EQ(select_reference(series), ref);
}

TEST(TrainingPairs, CountsAndDeterminism) {
  // 240 frames spread evenly over 5 gates: ceil(0.1 * 48) = 5 pairs per gate.
  const ScannerGeometry geom = ring_scanner(1, 16);
  const EventStream s = uniform_time_events(geom, 240, 120.0, 6);
  const SurrogateTrace tr = ramp_trace(120.0);
  const GateSet gs = amplitude_gates(tr, s, 5);

  PciSeries series;
  series.dt_s = 0.5;
  const VoxelGrid g = cube_grid(4, 10.0);
  series.frames.assign(240, Volume(g, 1.0f));

  const auto pairs = extract_training_pairs(gs, tr, series, 0.10, 7);
  EXPECT_EQ(pairs.size(), 25u);
  int per_gate[5] = {0, 0, 0, 0, 0};
  for (const auto& p : pairs) per_gate[p.gate]++;
  for (int c : per_gate) EXPECT_EQ(c, 5);

  const auto pairs2 = extract_training_pairs(gs, tr, series, 0.10, 7);
  ASSERT_EQ(pairs.size(), pairs2.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(pairs[i].frame, pairs2[i].frame);
    EXPECT_EQ(pairs[i].gate, pairs2[i].gate);
  }

  const auto all = extract_training_pairs(gs, tr, series, 1.0, 7);
  EXPECT_EQ(all.size(), 240u);
}

TEST(Denoiser, GateMatchReturnsTheGatedReconstruction) {
  const ScannerGeometry geom = ring_scanner(1, 16);
  const EventStream s = uniform_time_events(geom, 1000, 50.0, 8);
  const SurrogateTrace tr = ramp_trace(50.0);
  const GateSet gs = amplitude_gates(tr, s, 5);

  const VoxelGrid g = cube_grid(6, 8.0);
  std::vector<Volume> gated;
  for (int i = 0; i < 5; ++i) gated.push_back(Volume(g, static_cast<float>(i + 1)));
  const GateMatchDenoiser d(gs, gated);

  for (int gate = 0; gate < 5; ++gate) {
    const double amp = 0.5 * (gs.amplitude_edges[static_cast<std::size_t>(gate)] +
                              gs.amplitude_edges[static_cast<std::size_t>(gate) + 1]);
    const Volume out = d.denoise(Volume(g, 0.0f), amp);
    EXPECT_FLOAT_EQ(out.data[0], static_cast<float>(gate + 1));
  }
  // amplitudes outside every bin snap to the nearest gate
  EXPECT_FLOAT_EQ(d.denoise(Volume(g, 0.0f), -1e9).data[0], 1.0f);
  EXPECT_FLOAT_EQ(d.denoise(Volume(g, 0.0f), 1e9).data[0], 5.0f);
}

TEST(Denoiser, GaussianSmoothingPreservesMassAndHandlesZeroWidth) {
  const VoxelGrid g = cube_grid(20, 3.0);
  Volume v = gaussian_blob(g, {5, 0, -3}, 7.0);
  Rng rng(12);
  for (auto& x : v.data) x += static_cast<float>(0.05 * rng.uniform());

  const GaussianDenoiser d0(0.0);
  const Volume same = d0.denoise(v, 0.0);
  for (std::size_t j = 0; j < v.size(); ++j) EXPECT_NEAR(same.data[j], v.data[j], 1e-6);

  const GaussianDenoiser d(12.0);
  const Volume out = d.denoise(v, 0.0);
  EXPECT_NEAR(out.total(), v.total(), 1e-6 * v.total());
  for (float x : out.data) EXPECT_GE(x, 0.0f);
  // smoothing reduces the peak
  EXPECT_LT(out.max_value(), v.max_value());
}
