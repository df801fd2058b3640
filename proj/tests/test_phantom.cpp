#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "umcpet/phantom.hpp"

using namespace umcpet;
using testutil::cube_grid;
using testutil::sphere_phantom;

namespace {

PhantomSpec respiratory_phantom(double amp_z = 8.0, double period = 4.0) {
  PhantomSpec spec = sphere_phantom({0, 0, 0}, 40.0, 1.0);
  spec.motion.respiratory.amplitude_mm = {0, 0, amp_z};
  spec.motion.respiratory.period_s = period;
  return spec;
}

}  // namespace

TEST(TrueDeformation, IdentityAtTimeZero) {
  const PhantomSpec spec = respiratory_phantom();
  const VoxelGrid g = cube_grid(12, 8.0);
  const DeformationField f = true_deformation(spec, 0.0, g);
  EXPECT_TRUE(f.is_identity());
}

TEST(TrueDeformation, RespiratoryExtremumIsUniformMinusAmplitude) {
  // amplitude (0,0,8), t = period/2: points of the moved frame map back by
  // (0,0,-8) everywhere (the uniform part of the motion is global).
  const PhantomSpec spec = respiratory_phantom(8.0, 4.0);
  const VoxelGrid g = cube_grid(10, 10.0);
  const DeformationField f = true_deformation(spec, 2.0, g);
  for (std::size_t j = 0; j < g.n_voxels(); ++j) {
    const Vec3 d = f.at(j);
    EXPECT_NEAR(d.x, 0.0, 1e-9);
    EXPECT_NEAR(d.y, 0.0, 1e-9);
    EXPECT_NEAR(d.z, -8.0, 1e-9);
  }
}

TEST(TrueDeformation, OutOfRangeTimeIsAnError) {
  const PhantomSpec spec = respiratory_phantom();
  const VoxelGrid g = cube_grid(4, 10.0);
  EXPECT_THROW(true_deformation(spec, spec.total_duration_s + 1.0, g), Error);
  EXPECT_THROW(true_deformation(spec, -0.5, g), Error);
}

TEST(Motion, JacobianDeterminantPositiveAtDefaultAmplitudes) {
  PhantomSpec spec = respiratory_phantom(8.0, 4.0);
  spec.motion.body_steps.push_back({50.0, {10.0, 0.0, 0.0}});
  BowelMotion bowel;
  bowel.center_mm = {20.0, 0.0, 0.0};
  bowel.sigma_mm = 20.0;
  bowel.amplitude_mm = {0.0, 5.0, 0.0};
  bowel.period_s = 10.0;
  spec.motion.bowel.push_back(bowel);

  const VoxelGrid g = cube_grid(16, 8.0);
  for (double t : {1.0, 2.5, 52.0, 61.3}) {
    EXPECT_GT(min_jacobian_determinant(spec, t, g), 0.0) << "t=" << t;
  }
}

TEST(ActivityAt, CenterAndOutside) {
  PhantomSpec spec = sphere_phantom({5, -3, 10}, 25.0, 2.5);
  EXPECT_DOUBLE_EQ(spec.activity_at({5, -3, 10}, 0.0), 2.5);
  EXPECT_DOUBLE_EQ(spec.activity_at({200, 0, 0}, 0.0), 0.0);
}

TEST(ActivityAt, TotalActivityConstantUnderMotion) {
  PhantomSpec spec = respiratory_phantom(8.0, 4.0);
  BowelMotion bowel;
  bowel.center_mm = {10.0, 5.0, 0.0};
  bowel.sigma_mm = 25.0;
  bowel.amplitude_mm = {0.0, 4.0, 3.0};
  bowel.period_s = 7.0;
  spec.motion.bowel.push_back(bowel);

  const VoxelGrid g = cube_grid(48, 3.0);
  double reference = -1.0;
  for (int i = 0; i < 10; ++i) {
    const double t = i * 1.7;
    const double integral = activity_volume(spec, t, g).total();
    if (reference < 0.0)
      reference = integral;
    else
      EXPECT_NEAR(integral, reference, 0.005 * reference) << "t=" << t;
  }
}

TEST(Surrogate, ZeroAmplitudeIsConstant) {
  PhantomSpec spec = sphere_phantom({0, 0, 0}, 30.0, 1.0);
  const SurrogateTrace tr = surrogate(spec, 30.0);
  for (double v : tr.samples) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Surrogate, FortyHertzSamplingAndDominantFrequency) {
  const PhantomSpec spec = respiratory_phantom(8.0, 4.0);
  const SurrogateTrace tr = surrogate(spec, 120.0);
  ASSERT_EQ(tr.samples.size(), 4800u);  // ceil(120 * 40)

  // brute-force DFT magnitude on a 1/120 Hz lattice, DC excluded
  double mean = 0.0;
  for (double v : tr.samples) mean += v;
  mean /= static_cast<double>(tr.samples.size());
  double best_f = 0.0, best_mag = -1.0;
  for (int k = 1; k <= 240; ++k) {  // up to 2 Hz
    const double f = k / 120.0;
    double re = 0.0, im = 0.0;
    for (std::size_t i = 0; i < tr.samples.size(); ++i) {
      const double ph = 2.0 * 3.14159265358979323846 * f * tr.time_of(i);
      re += (tr.samples[i] - mean) * std::cos(ph);
      im += (tr.samples[i] - mean) * std::sin(ph);
    }
    const double mag = re * re + im * im;
    if (mag > best_mag) {
      best_mag = mag;
      best_f = f;
    }
  }
  EXPECT_NEAR(best_f, 0.25, 1e-9);  // sin^2 with 4 s period oscillates at 1/4 Hz
}

TEST(Surrogate, NoiselessExtremaMatchDeformationExtrema) {
  const PhantomSpec spec = respiratory_phantom(8.0, 4.0);
  const SurrogateTrace tr = surrogate(spec, 12.0, 40.0, 0.0);
  // maxima of sin^2(pi t / 4) sit at t = 2, 6, 10
  for (double t_peak : {2.0, 6.0, 10.0}) {
    const auto k = static_cast<std::size_t>(std::lround(t_peak * tr.sample_rate_hz));
    EXPECT_NEAR(tr.samples[k], 8.0, 1e-9);
    EXPECT_GT(tr.samples[k], tr.samples[k - 20]);
    EXPECT_GT(tr.samples[k], tr.samples[k + 20]);
  }
}

TEST(Motion, CorrectingTheMovedFrameRecoversTheReferenceImage) {
  PhantomSpec spec = respiratory_phantom(8.0, 4.0);
  BowelMotion bowel;
  bowel.center_mm = {15.0, 0.0, 10.0};
  bowel.sigma_mm = 25.0;
  bowel.amplitude_mm = {0.0, 5.0, 0.0};
  bowel.period_s = 6.0;
  spec.motion.bowel.push_back(bowel);

  // smooth test image transported by the motion model; the residual after
  // correction is interpolation error only
  const VoxelGrid g = cube_grid(64, 3.0);
  auto blob = [](const Vec3& p) { return std::exp(-p.norm2() / (2.0 * 18.0 * 18.0)); };
  Volume frame0(g), frame_t(g);
  const double t = 1.3;
  std::size_t j = 0;
  for (int iz = 0; iz < g.dims[2]; ++iz)
    for (int iy = 0; iy < g.dims[1]; ++iy)
      for (int ix = 0; ix < g.dims[0]; ++ix, ++j) {
        const Vec3 p = g.voxel_center(ix, iy, iz);
        frame0.data[j] = static_cast<float>(blob(p));
        frame_t.data[j] = static_cast<float>(blob(spec.motion.inverse(p, t)));
      }
  const DeformationField m = true_deformation(spec, t, g);
  const Volume recovered = correct_frame(frame_t, m);
  EXPECT_LT(nrmse(recovered, frame0), 0.02);
}

TEST(Motion, InverseUndoesForward) {
  PhantomSpec spec = respiratory_phantom(6.0, 4.0);
  BowelMotion bowel;
  bowel.center_mm = {0.0, 0.0, 0.0};
  bowel.sigma_mm = 18.0;
  bowel.amplitude_mm = {4.0, 0.0, 2.0};
  bowel.period_s = 9.0;
  spec.motion.bowel.push_back(bowel);
  Rng rng(77);
  for (int i = 0; i < 200; ++i) {
    const Vec3 x0{rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50)};
    const double t = rng.uniform(0.0, 100.0);
    const Vec3 p = spec.motion.forward(x0, t);
    const Vec3 back = spec.motion.inverse(p, t);
    EXPECT_NEAR((back - x0).norm(), 0.0, 1e-5);
  }
}
