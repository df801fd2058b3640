#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "umcpet/pci.hpp"

using namespace umcpet;
using testutil::cube_grid;
using testutil::pearson;
using testutil::ring_scanner;
using testutil::sphere_phantom;

TEST(SensitivityStatic, TwoCrystalScannerCoversOneChord) {
  const ScannerGeometry geom = ring_scanner(1, 2, 50.0, 4.0);  // one LOR
  const VoxelGrid g = make_centered_grid({9, 9, 1}, {4.0, 4.0, 4.0});
  const Volume q = sensitivity_static(geom, g);
  const LOR lor = lor_between(geom, 0, 1);
  const RayProfile p = trace_ray(lor, g);
  ASSERT_FALSE(p.empty());
  std::vector<bool> on_chord(g.n_voxels(), false);
  for (const auto& e : p.entries) {
    on_chord[e.voxel] = true;
    EXPECT_FLOAT_EQ(q.data[e.voxel], static_cast<float>(e.weight));
  }
  for (std::size_t j = 0; j < g.n_voxels(); ++j)
    if (!on_chord[j]) EXPECT_EQ(q.data[j], 0.0f);
}

TEST(SensitivityStatic, CentralVoxelBeatsEdgeOnFullRing) {
  const ScannerGeometry geom = ring_scanner(1, 16, 60.0, 6.0);
  const VoxelGrid g = make_centered_grid({15, 15, 1}, {6.0, 6.0, 6.0});
  const Volume q = sensitivity_static(geom, g);  // 16 crystals: all 120 LORs
  const float center = q.at(7, 7, 0);
  EXPECT_GT(center, 0.0f);
  // edge of the transaxial FOV
  EXPECT_GE(center, q.at(1, 7, 0));
  EXPECT_GE(center, q.at(7, 1, 0));
  EXPECT_GE(center, q.at(13, 7, 0));
}

TEST(SensitivityStatic, SampleSizeConvergence) {
  // Doubling the stratified LOR sample changes Q by < 1% RMS (relative to
  // the mean sensitivity over the FOV interior). The same seed makes the
  // smaller sample a prefix of the larger one, as in a convergence sweep.
  const ScannerGeometry geom = ring_scanner(8, 48, 90.0, 5.0);
  const VoxelGrid g = cube_grid(6, 12.0);
  SensitivityOptions a;
  a.exhaustive_pair_cap = 0;  // force sampling
  a.sample_target = 1'000'000;
  a.seed = 5;
  SensitivityOptions b = a;
  b.sample_target = 2'000'000;
  Volume qa = sensitivity_static(geom, g, a);
  Volume qb = sensitivity_static(geom, g, b);
  // normalize by sample size before comparing
  const double scale_a = 1.0 / static_cast<double>(sensitivity_lor_sample(geom, a).size());
  const double scale_b = 1.0 / static_cast<double>(sensitivity_lor_sample(geom, b).size());
  double diff2 = 0.0, mean = 0.0;
  std::size_t n = 0;
  std::size_t j = 0;
  for (int iz = 0; iz < g.dims[2]; ++iz)
    for (int iy = 0; iy < g.dims[1]; ++iy)
      for (int ix = 0; ix < g.dims[0]; ++ix, ++j) {
        if (!g.in_fov_cylinder(g.voxel_center(ix, iy, iz))) continue;
        const double va = qa.data[j] * scale_a;
        const double vb = qb.data[j] * scale_b;
        diff2 += (va - vb) * (va - vb);
        mean += va;
        ++n;
      }
  mean /= static_cast<double>(n);
  const double rms = std::sqrt(diff2 / static_cast<double>(n));
  EXPECT_LT(rms, 0.01 * mean);
}

namespace {

EventStream tiny_stream(const ScannerGeometry& geom, std::initializer_list<ListModeEvent> events,
                        double duration = 10.0) {
  EventStream s;
  s.geometry_hash = geom.hash();
  s.duration_s = duration;
  s.half_life_s = 6586.0;
  s.events = events;
  return s;
}

}  // namespace

TEST(PciFrame, EmptyWindowGivesZeroVolume) {
  const ScannerGeometry geom = ring_scanner(2, 16, 60.0, 6.0);
  const VoxelGrid g = cube_grid(12, 6.0);
  const Volume q = sensitivity_static(geom, g);
  const auto mask = sensitivity_mask(q);
  const EventStream s = tiny_stream(geom, {});
  const Volume p = pci_frame(s, 0, 0, 0.0, 0.5, geom, g, q, mask);
  for (float v : p.data) EXPECT_EQ(v, 0.0f);
}

TEST(PciFrame, SingleEventMatchesEquationByHand) {
  const ScannerGeometry geom = ring_scanner(2, 16, 60.0, 6.0);
  const VoxelGrid g = cube_grid(12, 6.0);
  const Volume q = sensitivity_static(geom, g);
  const auto mask = sensitivity_mask(q);

  const ListModeEvent ev{250, 3, 11, 6};
  const EventStream s = tiny_stream(geom, {ev});
  const Volume p = pci_frame(s, 0, 1, 0.0, 0.5, geom, g, q, mask);

  const LOR lor = lor_between(geom, 3, 11);
  const RayProfile prof = tof_weight(trace_ray(lor, g), lor, 6, geom);
  const double decay = decay_factor(0.250, s.half_life_s);
  std::vector<double> expected(g.n_voxels(), 0.0);
  for (const auto& e : prof.entries)
    if (mask[e.voxel]) expected[e.voxel] = e.weight * decay / q.data[e.voxel];
  for (std::size_t j = 0; j < g.n_voxels(); ++j)
    EXPECT_NEAR(p.data[j], expected[j], 1e-6 * std::max(1.0, std::abs(expected[j])));
}

TEST(PciFrame, TwoEventsAreTheSumOfSingles) {
  const ScannerGeometry geom = ring_scanner(2, 16, 60.0, 6.0);
  const VoxelGrid g = cube_grid(12, 6.0);
  const Volume q = sensitivity_static(geom, g);
  const auto mask = sensitivity_mask(q);

  const ListModeEvent e1{10, 1, 9, 5};
  const ListModeEvent e2{400, 7, 20, 7};
  const Volume p1 = pci_frame(tiny_stream(geom, {e1}), 0, 1, 0.0, 0.5, geom, g, q, mask);
  const Volume p2 = pci_frame(tiny_stream(geom, {e2}), 0, 1, 0.0, 0.5, geom, g, q, mask);
  const Volume p12 = pci_frame(tiny_stream(geom, {e1, e2}), 0, 2, 0.0, 0.5, geom, g, q, mask);
  for (std::size_t j = 0; j < g.n_voxels(); ++j)
    EXPECT_NEAR(p12.data[j], p1.data[j] + p2.data[j], 1e-5 * std::max(1.0f, p12.data[j]));
}

TEST(PciFrame, EventOutsideWindowIsAnError) {
  const ScannerGeometry geom = ring_scanner(2, 16, 60.0, 6.0);
  const VoxelGrid g = cube_grid(8, 8.0);
  const Volume q = sensitivity_static(geom, g);
  const auto mask = sensitivity_mask(q);
  const EventStream s = tiny_stream(geom, {ListModeEvent{900, 1, 9, 6}});
  EXPECT_THROW(pci_frame(s, 0, 1, 0.0, 0.5, geom, g, q, mask), Error);
}

TEST(PciSeries, FrameCountsMatchTheProtocol) {
  const ScannerGeometry geom = ring_scanner(2, 16, 60.0, 6.0);
  const VoxelGrid g = cube_grid(8, 8.0);
  const Volume q = sensitivity_static(geom, g);

  EventStream s = tiny_stream(geom, {}, 120.0);
  EXPECT_EQ(pci_series(s, 0.5, geom, g, q).n_frames(), 240);  // 120 s / 500 ms
  s.duration_s = 1.0;
  EXPECT_EQ(pci_series(s, 0.5, geom, g, q).n_frames(), 2);
}

TEST(PciSeries, WindowPartitionAdditivity) {
  PhantomSpec spec = sphere_phantom({0, 0, 0}, 25.0, 0.05, 0.0, 100.0);
  const ScannerGeometry geom = ring_scanner(4, 24, 70.0, 6.0);
  const EventStream s = simulate(spec, geom, 6.0, 21);
  ASSERT_GT(s.count(), 1000u);
  const VoxelGrid g = cube_grid(16, 5.0);
  const Volume q = sensitivity_static(geom, g);
  const auto mask = sensitivity_mask(q);

  const PciSeries series = pci_series(s, 0.5, geom, g, q);
  ASSERT_EQ(series.n_frames(), 12);
  double frames_mass = 0.0;
  for (const auto& f : series.frames) frames_mass += f.total();
  const Volume all = pci_frame(s, 0, s.count(), 0.0, 6.0, geom, g, q, mask);
  EXPECT_NEAR(frames_mass, all.total(), 2e-6 * std::max(1.0, all.total()));  // f32 storage rounding
}

TEST(PciSeries, BackprojectedPointSourceCodNearSource) {
  const Vec3 src{12.0, -6.0, 4.0};
  PhantomSpec spec = sphere_phantom(src, 1.0, 400.0, 0.0, 100.0);
  ScannerGeometry geom = ring_scanner(8, 32, 70.0, 6.0);
  geom.tof_kernel_sigma_mm = 15.0;  // keeps the back-projected cloud compact
  geom.tof_bin_width_mm = 12.0;
  const EventStream s = simulate(spec, geom, 10.0, 31);
  ASSERT_GT(s.count(), 2000u);
  const VoxelGrid g = cube_grid(32, 4.0);
  const Volume q = sensitivity_static(geom, g);
  const auto mask = sensitivity_mask(q);
  const Volume p = pci_frame(s, 0, s.count(), 0.0, 10.0, geom, g, q, mask);
  const Vec3 cod = compute_cod(p);
  EXPECT_LT((cod - src).norm(), 4.0);  // within one 4 mm voxel
}

// Adjoint consistency: backprojection B = PCI * Q forward-projected per LOR
// correlates with the measured counts per LOR.
TEST(PciSeries, AdjointConsistencyOnToyRing) {
  // layered spheres give a smooth radial activity profile
  PhantomSpec spec;
  for (double r : {12.0, 22.0, 30.0, 38.0}) {
    EllipsoidComponent c;
    c.center_mm = {6.0, 0.0, 0.0};
    c.semi_axes_mm = {r, r, r};
    c.activity_per_s_mm3 = 0.006;
    spec.components.push_back(c);
  }
  spec.total_duration_s = 400.0;
  ScannerGeometry geom = ring_scanner(1, 16, 60.0, 40.0);
  geom.tof_kernel_sigma_mm = 8.0;
  geom.tof_bin_width_mm = 16.0;
  const EventStream s = simulate(spec, geom, 390.0, 17);
  ASSERT_GT(s.count(), 80000u);
  const VoxelGrid g = make_centered_grid({16, 16, 1}, {6.0, 6.0, 40.0});
  const Volume q = sensitivity_static(geom, g);
  const auto mask = sensitivity_mask(q);
  const Volume p = pci_frame(s, 0, s.count(), 0.0, 390.0, geom, g, q, mask);

  // counts per (unordered LOR, TOF bin): the PCI back-projects within the
  // event's TOF bin, so the matched forward model is TOF-weighted too
  const int n = geom.n_crystals();
  const int nb = geom.n_tof_bins;
  std::vector<double> counts(static_cast<std::size_t>(n * n * nb), 0.0);
  for (const auto& ev : s.events) {
    const int a = std::min(ev.crystal_a, ev.crystal_b);
    const int b = std::max(ev.crystal_a, ev.crystal_b);
    int tau = ev.tof_bin;
    if (static_cast<int>(ev.crystal_a) != a) tau = nb - 1 - tau;  // flip with endpoint order
    counts[static_cast<std::size_t>((a * n + b) * nb + tau)] += 1.0;
  }

  std::vector<double> fwd_list, count_list;
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) {
      const LOR lor = lor_between(geom, a, b);
      const RayProfile prof = trace_ray(lor, g);
      if (prof.empty()) continue;
      for (int tau = 0; tau < nb; ++tau) {
        const RayProfile w = tof_weight(prof, lor, tau, geom);
        double fwd = 0.0;
        for (const auto& e : w.entries) fwd += e.weight * p.data[e.voxel] * q.data[e.voxel];
        fwd_list.push_back(fwd);
        count_list.push_back(counts[static_cast<std::size_t>((a * n + b) * nb + tau)]);
      }
    }
  ASSERT_GT(fwd_list.size(), 500u);
  EXPECT_GT(pearson(fwd_list, count_list), 0.99);
}
