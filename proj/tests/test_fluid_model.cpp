#include "pourplan/fluid_model.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <random>

using namespace pourplan;

namespace {

const GeomTables& cylinder() {
  static const GeomTables t = build_tables(rectangle_profile(0.06, 0.10), deg2rad(1.0), 0.001);
  return t;
}

const GeomTables& oval() {
  static const GeomTables t = build_tables(oval_profile(0.045, 0.06, 0.015), deg2rad(1.0), 0.001);
  return t;
}

// Constant A and dh everywhere.
GeomTables flat_tables(double A, double dh) {
  GeomTables::Grids g;
  g.id = "flat";
  g.theta_step = kPi / 10;
  g.n_theta = 11;
  g.vol_max = 1e-3;
  g.n_vol = 3;
  g.A.assign(33, A);
  g.dh.assign(33, dh);
  return GeomTables::from_grids(g);
}

}  // namespace

TEST(Bernoulli, KnownValues) {
  EXPECT_EQ(bernoulli_speed(0.0), 0.0);
  EXPECT_NEAR(bernoulli_speed(0.05), 0.9905, 5e-5);
  EXPECT_THROW(bernoulli_speed(-0.01), InputError);
}

TEST(OutflowSpeed, ZeroModelIsZero) {
  EXPECT_EQ(outflow_speed({}, 2.0, 1e-4, cylinder()), 0.0);
}

TEST(OutflowSpeed, LinearHeadTermIsBernoulli) {
  const auto t = flat_tables(1e-4, 0.05);
  EXPECT_NEAR(outflow_speed({.a = 1}, 1.0, 1e-4, t), bernoulli_speed(0.05), 1e-15);
}

TEST(OutflowSpeed, SlideTermsVanishBelowHorizontal) {
  const auto t = flat_tables(1e-4, 0.0);
  EXPECT_EQ(outflow_speed({.d = 3, .e = -2, .f = 5}, deg2rad(60), 1e-4, t), 0.0);
}

TEST(OutflowSpeed, NegativeModelClampsAndCounts) {
  const auto t = flat_tables(1e-4, 0.05);
  StepCounters c;
  const auto s = step({1e-4, 0.0}, 1.0, 0.01, t, {.a = -1}, &c);
  EXPECT_EQ(s.v_out, 0.0);
  EXPECT_EQ(s.vol, 1e-4);
  EXPECT_EQ(c.speed_clamps, 1u);
}

TEST(Step, NoSectionKeepsVolume) {
  const auto t = flat_tables(0.0, 0.05);
  const auto s = step({1e-4, 0.0}, 1.0, 0.01, t, {.a = 1});
  EXPECT_EQ(s.vol, 1e-4);
  EXPECT_NEAR(s.v_out, 0.9905, 5e-5);
}

TEST(Step, ForwardEulerArithmetic) {
  // v = a * B with B = sqrt(2 g dh) chosen so v = 0.5 m/s.
  const double dh = 0.25 / (2 * kGravity);
  const auto t = flat_tables(1e-4, dh);
  const auto s = step({1e-4, 0.0}, 1.0, 0.01, t, {.a = 1});
  EXPECT_NEAR(s.v_out, 0.5, 1e-15);
  EXPECT_NEAR(s.vol, 9.95e-5, 1e-18);
}

TEST(Step, ClampsAtEmpty) {
  // A v dt = 1e-4 * 1 * 0.01 = 1e-6 > vol
  const double dh = 1.0 / (2 * kGravity);
  const auto t = flat_tables(1e-4, dh);
  StepCounters c;
  const auto s = step({1e-8, 0.0}, 1.0, 0.01, t, {.a = 1}, &c);
  EXPECT_EQ(s.vol, 0.0);
  EXPECT_EQ(c.volume_clamps, 1u);
  EXPECT_THROW(step({1e-8, 0.0}, 1.0, 0.0, t, {.a = 1}), InputError);
}

TEST(Rollout, UprightCylinderKeepsVolume) {
  const auto& t = cylinder();
  const std::vector<double> thetas(100, 0.0);
  const auto tr = rollout({0.8 * t.vol_max(), 0.0}, thetas, 0.03, t, {.a = 1, .d = 1});
  ASSERT_EQ(tr.states.size(), 100u);
  for (const auto& s : tr.states) EXPECT_EQ(s.vol, 0.8 * t.vol_max());
}

TEST(Rollout, IsDeterministicAndMonotone) {
  const auto& t = cylinder();
  std::vector<double> thetas;
  for (int i = 0; i < 100; ++i) thetas.push_back(deg2rad(120.0) * i / 99.0);
  const OutflowCoeffs k{0.8, 0.1, 0.0, 0.3, 0.0, 0.0};
  const auto a = rollout({0.9 * t.vol_max(), 0.0}, thetas, 0.03, t, k);
  const auto b = rollout({0.9 * t.vol_max(), 0.0}, thetas, 0.03, t, k);
  for (std::size_t i = 0; i < a.states.size(); ++i) {
    EXPECT_EQ(a.states[i].vol, b.states[i].vol);
    EXPECT_EQ(a.states[i].v_out, b.states[i].v_out);
    if (i > 0) EXPECT_LE(a.states[i].vol, a.states[i - 1].vol);
  }
  EXPECT_LT(a.states.back().vol, a.states.front().vol);
  EXPECT_THROW(rollout({0.0, 0.0}, thetas, 0.03, t, k), InputError);
}

TEST(Rollout, CylinderSpeedRisesOvalSpeedRisesThenFalls) {
  // Cylinder speed dominated by the wall-slide term, oval speed by the head.
  std::vector<double> thetas;
  for (int i = 0; i < 100; ++i) thetas.push_back(deg2rad(150.0) * i / 99.0);
  const auto cyl = rollout({0.6 * cylinder().vol_max(), 0.0}, thetas, 0.05, cylinder(), {.d = 1.5});
  const auto ov = rollout({0.6 * oval().vol_max(), 0.0}, thetas, 0.05, oval(), {.a = 1.0});
  std::size_t first = 0;
  while (first < cyl.states.size() && cyl.states[first].v_out == 0) ++first;
  ASSERT_LT(first, cyl.states.size());
  for (std::size_t i = first + 1; i < cyl.states.size(); ++i) {
    EXPECT_GE(cyl.states[i].v_out, cyl.states[i - 1].v_out - 1e-12) << i;
  }
  std::size_t peak = 0;
  for (std::size_t i = 0; i < ov.states.size(); ++i) {
    if (ov.states[i].v_out > ov.states[peak].v_out) peak = i;
  }
  EXPECT_GT(ov.states[peak].v_out, 0.0);
  EXPECT_LT(ov.states.back().v_out, 0.9 * ov.states[peak].v_out);
}

TEST(Fit, RecoversExactCoefficients) {
  const OutflowCoeffs truth{1.0, 0.5, -0.2, 0.3, 0.0, 0.0};
  std::vector<TrainingSample> samples;
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> th(deg2rad(60), deg2rad(170)), dh(0.0, 0.04);
  for (int i = 0; i < 50; ++i) {
    TrainingSample s{0, th(rng), 1e-4, dh(rng)};
    s.v_out_next = outflow_speed_raw(truth, s.theta_next, s.dh);
    samples.push_back(s);
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = fit_coefficients(samples);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 1.0);
  const auto got = res.coeffs.as_array(), want = truth.as_array();
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(got[i], want[i], 1e-8 * std::max(1.0, std::abs(want[i]))) << i;
  EXPECT_LT(res.rmse, 1e-10);
}

TEST(Fit, ZeroTargetGivesZeroCoefficients) {
  std::vector<TrainingSample> samples;
  for (int i = 0; i < 20; ++i) samples.push_back({0.0, deg2rad(90.0 + 4 * i), 1e-4, 0.002 * i});
  const auto res = fit_coefficients(samples);
  for (double c : res.coeffs.as_array()) EXPECT_NEAR(c, 0.0, 1e-12);
}

TEST(Fit, TooFewSamples) {
  std::vector<TrainingSample> samples(5, {1.0, 2.0, 1e-4, 0.01});
  try {
    fit_coefficients(samples);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("insufficient samples"), std::string::npos);
  }
}

TEST(Fit, RankDeficiencyNamesColumns) {
  // theta below 90 degrees: every slide feature is zero.
  std::vector<TrainingSample> samples;
  for (int i = 0; i < 20; ++i) samples.push_back({0.1 * i, 1.0, 1e-4, 0.001 * (i + 1)});
  try {
    fit_coefficients(samples);
    FAIL();
  } catch (const ComputeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("d:S"), std::string::npos) << msg;
    EXPECT_NE(msg.find("f:S^3"), std::string::npos) << msg;
  }
}

TEST(Fit, ResidualNeverWorseThanZeroModel) {
  std::mt19937 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TrainingSample> samples;
    double zero_sse = 0;
    for (int i = 0; i < 30; ++i) {
      TrainingSample s{u(rng), deg2rad(80 + 90 * u(rng)), 1e-4, 0.05 * u(rng)};
      zero_sse += s.v_out_next * s.v_out_next;
      samples.push_back(s);
    }
    const auto res = fit_coefficients(samples);
    EXPECT_LE(res.rmse, std::sqrt(zero_sse / 30) + 1e-12);
  }
}

TEST(Fit, TableHeadSource) {
  const auto& t = cylinder();
  const OutflowCoeffs truth{0.9, 0.1, 0.0, 0.2, 0.1, 0.0};
  std::vector<TrainingSample> samples;
  for (int i = 0; i < 40; ++i) {
    TrainingSample s{0, deg2rad(80 + 2.0 * i), (0.2 + 0.015 * i) * t.vol_max(), 0.0};
    s.v_out_next = outflow_speed_raw(truth, s.theta_next, t.lookup(s.theta_next, s.vol).dh);
    samples.push_back(s);
  }
  const auto res = fit_coefficients(samples, &t, HeadSource::Tables);
  EXPECT_LT(res.rmse, 1e-9);
  EXPECT_THROW(fit_coefficients(samples, nullptr, HeadSource::Tables), InputError);
}

TEST(FlightCurve, HorizontalBelowNinetyDegrees) {
  const Vec3 d = outflow_direction_local(deg2rad(60));
  EXPECT_NEAR(d.x(), 1.0, 1e-15);
  EXPECT_NEAR(d.z(), 0.0, 1e-15);
  const Vec3 e = outflow_direction_local(deg2rad(120));
  EXPECT_NEAR(e.x(), 0.8660254037844387, 1e-15);
  EXPECT_NEAR(e.z(), -0.5, 1e-15);
}

TEST(FlightCurve, ZeroAzimuthIsIdentity) {
  EXPECT_TRUE(rot_z(0.0).isApprox(Mat3::Identity(), 0.0));
  const auto& t = cylinder();
  const FluidState s{0.5 * t.vol_max(), 1.0};
  const auto c = flight_curve(s, {deg2rad(120), 0.0}, Vec3(0.1, 0.2, 0.3), t);
  EXPECT_NEAR(c.V_out.norm(), 1.0, 1e-15);
  const Vec3 e = t.lookup(deg2rad(120), s.vol).e;
  EXPECT_TRUE(c.E.isApprox(e + Vec3(0.1, 0.2, 0.3), 1e-15));
  const auto r = flight_curve(s, {deg2rad(120), kHalfPi}, Vec3::Zero(), t);
  EXPECT_NEAR(r.V_out.y(), 0.8660254037844387, 1e-15);
  EXPECT_NEAR(r.V_out.x(), 0.0, 1e-15);
}

TEST(FlightCurve, ParabolaAlgebra) {
  QuadraticCurve c;
  c.V_out = Vec3(0.3, -0.2, 0.7);
  c.E = Vec3(1, 2, 3);
  for (double t : {0.0, 0.1, 0.5, 2.0}) {
    const Vec3 v = c.velocity(t);
    EXPECT_EQ(v.x(), 0.3);
    EXPECT_EQ(v.y(), -0.2);
    EXPECT_NEAR(v.z(), 0.7 - 9.81 * t, 1e-15);
  }
}

TEST(TimeToAltitude, FreeFall) {
  QuadraticCurve c;
  c.V_out = Vec3(1, 0, 0);
  c.E = Vec3(0, 0, 0.2);
  const auto t = time_to_altitude(c, Vec3::Zero());
  ASSERT_TRUE(t);
  EXPECT_NEAR(*t, std::sqrt(2 * 0.2 / 9.81), 1e-15);
  EXPECT_NEAR(*t, 0.2019, 5e-5);
}

TEST(TimeToAltitude, AtAltitudeAndBelow) {
  QuadraticCurve c;
  c.V_out = Vec3(1, 0, 0);
  c.E = Vec3(0, 0, 0.1);
  EXPECT_EQ(time_to_altitude(c, Vec3(5, 5, 0.1)).value(), 0.0);
  c.V_out = Vec3(0, 0, -1);
  c.E = Vec3(0, 0, -0.1);
  EXPECT_FALSE(time_to_altitude(c, Vec3::Zero()));
  // Thrown upward from below: reaches the altitude on the way up.
  c.V_out = Vec3(0, 0, 3);
  const auto t = time_to_altitude(c, Vec3::Zero());
  ASSERT_TRUE(t);
  EXPECT_NEAR(c.at(*t).z(), 0.0, 1e-15);
  EXPECT_LT(*t, 3.0 / 9.81);
}

TEST(Files, CoefficientsRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "pourplan_coeffs.json";
  const OutflowCoeffs k{1.0 / 3, -2e-9, 5, 0.1, 7e10, -1};
  save_coefficients(path.string(), k, "cylinder", "water", 0.01, 42);
  const auto f = load_coefficients(path.string());
  EXPECT_EQ(f.coeffs.as_array(), k.as_array());
  EXPECT_EQ(f.container_id, "cylinder");
  EXPECT_EQ(f.material, "water");
  std::filesystem::remove(path);
}

TEST(Files, SamplesRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "pourplan_samples.csv";
  std::vector<SampleRecord> rows = {{0.01, {1.5, 2.0, 1e-4, 0.01}, false}, {0.02, {0.1, 2.1, 9e-5, 0.0}, true}};
  save_samples_csv(path.string(), rows);
  const auto back = load_samples_csv(path.string());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].sample.vol, 9e-5);
  EXPECT_TRUE(back[1].linear_fit);
  std::filesystem::remove(path);
}
