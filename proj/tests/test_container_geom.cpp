#include "pourplan/container_geom.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <random>

using namespace pourplan;

namespace {

constexpr double kR = 0.03;
constexpr double kH = 0.10;

const GeomTables& cylinder_tables() {
  static const GeomTables t = build_tables(rectangle_profile(2 * kR, kH), deg2rad(1.0), 0.001);
  return t;
}

// Independent fine-voxel model of the revolved cylinder: water level for a
// given volume comes from sorting voxel heights in the leant frame; the
// outflow area is a fine 2D count over the opening disc.
struct VoxelCylinder {
  double cell;
  double theta;
  std::vector<double> heights;

  VoxelCylinder(double cell_, double theta_) : cell(cell_), theta(theta_) {
    const double s = std::sin(theta), c = std::cos(theta);
    const int nr = static_cast<int>(std::ceil(kR / cell));
    const int nz = static_cast<int>(std::round(kH / cell));
    for (int i = -nr; i < nr; ++i) {
      for (int j = -nr; j < nr; ++j) {
        const double x = (i + 0.5) * cell, y = (j + 0.5) * cell;
        if (x * x + y * y > kR * kR) continue;
        for (int k = 0; k < nz; ++k) heights.push_back(-s * x + c * (k + 0.5) * cell);
      }
    }
  }

  double level_for(double vol_fraction) {
    if (vol_fraction >= 1.0) {
      // Brim-full: the surface is the top of the body.
      const double s = std::sin(theta), c = std::cos(theta);
      return std::max({s * kR, -s * kR, s * kR + c * kH, -s * kR + c * kH});
    }
    const auto k = static_cast<std::size_t>(
        std::clamp(vol_fraction * static_cast<double>(heights.size()), 1.0, double(heights.size())) - 1);
    std::nth_element(heights.begin(), heights.begin() + static_cast<std::ptrdiff_t>(k), heights.end());
    return heights[k];
  }

  double outflow_area(double level) const {
    const double s = std::sin(theta), c = std::cos(theta);
    const double f = cell / 4;
    const int n = static_cast<int>(std::ceil(kR / f));
    std::size_t count = 0;
    for (int i = -n; i < n; ++i) {
      for (int j = -n; j < n; ++j) {
        const double x = (i + 0.5) * f, y = (j + 0.5) * f;
        if (x * x + y * y <= kR * kR && -s * x + c * kH < level) ++count;
      }
    }
    return static_cast<double>(count) * f * f;
  }
};

}  // namespace

TEST(Profile, RectangleCupIsValid) {
  const auto p = rectangle_profile(0.06, 0.10);
  EXPECT_DOUBLE_EQ(p.lip().x(), 0.03);
  EXPECT_DOUBLE_EQ(p.lip().y(), 0.10);
  EXPECT_DOUBLE_EQ(p.opening_radius(), 0.03);
  EXPECT_NEAR(p.area(), 0.006, 1e-15);
  EXPECT_NEAR(p.revolved_volume(), kPi * 0.03 * 0.03 * 0.10, 1e-15);
}

TEST(Profile, OpenBoundaryRejected) {
  try {
    ContainerProfile::from_closed_polyline("x", {{-1, 0}, {1, 0}, {1, 1}, {-1, 1}}, 2);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("open boundary"), std::string::npos);
  }
}

TEST(Profile, SelfIntersectionRejected) {
  EXPECT_THROW(ContainerProfile::from_closed_polyline("x", {{-1, 0}, {1, 1}, {1, 0}, {-1, 1}, {-1, 0}}, 1),
               InputError);
}

TEST(Profile, AsymmetryRejected) {
  EXPECT_THROW(
      ContainerProfile::from_closed_polyline("x", {{-1, 0}, {1.001, 0}, {1, 1}, {-1, 1}, {-1, 0}}, 2),
      InputError);
}

TEST(Profile, LipMustBeOnOpening) {
  EXPECT_THROW(ContainerProfile::from_closed_polyline("x", {{-1, 0}, {1, 0}, {1, 1}, {-1, 1}, {-1, 0}}, 1),
               InputError);
}

TEST(Profile, OvalIsValid) {
  const auto p = oval_profile(0.045, 0.06, 0.015);
  EXPECT_NEAR(p.opening_radius(), 0.015, 1e-12);
  EXPECT_GT(p.width(), 0.089);
  // Revolved volume close to the ellipsoid it approximates.
  EXPECT_NEAR(p.revolved_volume(), 4.0 / 3.0 * kPi * 0.045 * 0.045 * 0.06, 0.1 * 5.1e-4);
}

TEST(Profile, JsonRoundTripWithUnits) {
  nlohmann::json j = {{"id", "cup"},
                      {"units", "mm"},
                      {"vertices", {{-30, 0}, {30, 0}, {30, 100}, {-30, 100}, {-30, 0}}},
                      {"lip_index", 2}};
  const auto p = load_profile(j);
  EXPECT_NEAR(p.opening_radius(), 0.03, 1e-15);
  const auto q = load_profile(profile_to_json(p));
  EXPECT_EQ(p.vertices(), q.vertices());
  EXPECT_EQ(q.id(), "cup");
  j["units"] = "furlong";
  EXPECT_THROW(load_profile(j), InputError);
}

TEST(Tables, UprightBelowBrimHasNoOutflow) {
  const auto& t = cylinder_tables();
  for (double f : {0.1, 0.5, 0.9, 0.99}) {
    const auto s = t.lookup(0.0, f * t.vol_max());
    EXPECT_EQ(s.A, 0.0);
    EXPECT_EQ(s.dh, 0.0);
  }
}

TEST(Tables, UprightFullCylinderExposesOpeningDisc) {
  const auto& t = cylinder_tables();
  const double cell = t.grid_cell();
  VoxelCylinder oracle(cell / 2, 0.0);
  const double A_oracle = oracle.outflow_area(oracle.level_for(1.0) + 1e-12);
  const double A = t.lookup(0.0, t.vol_max()).A;
  EXPECT_NEAR(A, kPi * kR * kR, 2 * cell * cell);
  EXPECT_NEAR(A, A_oracle, 2 * cell * cell);
}

TEST(Tables, TiltedPastHorizontalHasOutflow) {
  const auto& t = cylinder_tables();
  const double theta = deg2rad(120.0);
  VoxelCylinder oracle(t.grid_cell() / 2, theta);
  for (double f : {0.1, 0.4, 0.8}) {
    const double A_oracle = oracle.outflow_area(oracle.level_for(f));
    const double A = t.lookup(theta, f * t.vol_max()).A;
    EXPECT_GT(A_oracle, 0.0);
    EXPECT_GT(A, 0.0);
    EXPECT_NEAR(A, A_oracle, 0.05 * kPi * kR * kR) << "fraction " << f;
  }
}

TEST(Tables, AgreesWithVoxelOracleAcrossAngles) {
  const auto& t = cylinder_tables();
  for (double deg : {30.0, 60.0, 90.0, 150.0}) {
    VoxelCylinder oracle(t.grid_cell() / 2, deg2rad(deg));
    for (double f : {0.25, 0.5, 0.75, 0.95}) {
      const double A_oracle = oracle.outflow_area(oracle.level_for(f));
      const double A = t.lookup(deg2rad(deg), f * t.vol_max()).A;
      EXPECT_NEAR(A, A_oracle, 0.05 * kPi * kR * kR) << deg << " deg, fraction " << f;
    }
  }
}

TEST(Tables, LyingCylinderAreaEqualsVolumeOverLength) {
  // On its side the cylinder's cross-section is the opening disc itself.
  const auto& t = cylinder_tables();
  for (double f : {0.2, 0.5, 0.8}) {
    EXPECT_NEAR(t.lookup(kHalfPi, f * t.vol_max()).A, f * t.vol_max() / kH, 0.01 * kPi * kR * kR);
  }
  const auto planar = build_tables(rectangle_profile(2 * kR, kH), deg2rad(1.0), 0.001,
                                   {.mode = Reconstruction::Planar});
  for (double f : {0.2, 0.5, 0.8}) {
    EXPECT_NEAR(planar.lookup(kHalfPi, f * planar.vol_max()).A, f * planar.vol_max() / kH,
                0.01 * 4 * kR * kR);
  }
}

TEST(Tables, EmptyContainerHasNoOutflow) {
  const auto& t = cylinder_tables();
  for (double deg = 0; deg <= 180.0; deg += 15.0) {
    const auto s = t.lookup(deg2rad(deg), 0.0);
    EXPECT_EQ(s.A, 0.0) << deg;
    EXPECT_EQ(s.dh, 0.0) << deg;
  }
}

TEST(Tables, ExactAtSamplePoints) {
  const auto& t = cylinder_tables();
  for (std::size_t i : {0u, 45u, 90u, 133u, 180u}) {
    for (std::size_t j : {0u, 7u, 100u, 200u}) {
      const auto s = t.lookup(t.theta_at(i), t.vol_at(j));
      EXPECT_EQ(s.A, t.A(i, j));
      EXPECT_EQ(s.dh, t.dh(i, j));
      EXPECT_EQ(s.e, t.e(i, j));
    }
  }
}

TEST(Tables, BilinearMidpoint) {
  GeomTables::Grids g;
  g.id = "synthetic";
  g.theta_step = 0.1;
  g.n_theta = 2;
  g.vol_max = 1e-4;
  g.n_vol = 2;
  g.A = {1e-4, 2e-4, 3e-4, 4e-4};
  g.dh = {0, 0, 0, 0};
  const auto t = GeomTables::from_grids(g);
  EXPECT_NEAR(t.lookup(0.05, 0.5e-4).A, 2.5e-4, 1e-19);
}

TEST(Tables, VolumeAboveTopClamps) {
  const auto& t = cylinder_tables();
  const auto top = t.lookup(deg2rad(100), t.vol_max());
  const auto over = t.lookup(deg2rad(100), 2 * t.vol_max());
  EXPECT_EQ(top.A, over.A);
  EXPECT_EQ(over.dA_dvol, 0.0);
}

TEST(Tables, QueryOutsideThetaRangeFails) {
  const auto& t = cylinder_tables();
  EXPECT_THROW(t.lookup(-0.1, 1e-5), InputError);
  EXPECT_THROW(t.lookup(4.0, 1e-5), InputError);
  EXPECT_THROW(t.lookup(1.0, -1e-9), InputError);
}

TEST(Tables, TooCoarseGridFails) {
  EXPECT_THROW(build_tables(rectangle_profile(0.06, 0.10), deg2rad(1.0), 0.01), InputError);
}

TEST(Tables, InvariantsHoldOnGrid) {
  for (const auto& prof : {rectangle_profile(0.06, 0.10), oval_profile(0.045, 0.06, 0.015)}) {
    const auto t = build_tables(prof, deg2rad(1.0), 0.001);
    for (std::size_t i = 0; i < t.n_theta(); ++i) {
      for (std::size_t j = 0; j < t.n_vol(); ++j) {
        ASSERT_GE(t.A(i, j), 0.0);
        ASSERT_GE(t.dh(i, j), 0.0);
        if ((t.A(i, j) > 0) != (t.dh(i, j) > 0)) {
          // Only allowed at the first wetted level.
          ASSERT_GT(j, 0u);
          EXPECT_EQ(t.A(i, j - 1), 0.0);
          EXPECT_EQ(t.dh(i, j - 1), 0.0);
        }
        if (t.theta_at(i) >= kHalfPi - 1e-12 && j > 0) {
          EXPECT_GE(t.A(i, j), t.A(i, j - 1)) << prof.id() << " " << i << " " << j;
        }
      }
    }
  }
}

TEST(Tables, RefinementChangesAreaLittle) {
  const auto prof = rectangle_profile(2 * kR, kH);
  const auto coarse = build_tables(prof, deg2rad(1.0), 0.002);
  const auto fine = build_tables(prof, deg2rad(1.0), 0.001);
  double amax = 0.0, worst = 0.0;
  for (std::size_t i = 0; i < coarse.n_theta(); ++i) {
    for (std::size_t j = 0; j < coarse.n_vol(); ++j) {
      amax = std::max(amax, fine.A(i, j));
      worst = std::max(worst, std::abs(fine.A(i, j) - coarse.A(i, j)));
    }
  }
  EXPECT_LT(worst, 0.05 * amax);
}

TEST(Tables, LookupIsLipschitz) {
  const auto& t = cylinder_tables();
  double Lt = 0.0, Lv = 0.0;
  for (std::size_t i = 0; i + 1 < t.n_theta(); ++i) {
    for (std::size_t j = 0; j + 1 < t.n_vol(); ++j) {
      Lt = std::max(Lt, std::abs(t.A(i + 1, j) - t.A(i, j)) / t.theta_step());
      Lv = std::max(Lv, std::abs(t.A(i, j + 1) - t.A(i, j)) / t.vol_step());
    }
  }
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> th(0.0, t.theta_max()), vo(0.0, t.vol_max());
  for (int k = 0; k < 2000; ++k) {
    const double a = th(rng), v = vo(rng);
    const double b = std::clamp(a + 1e-3 * (th(rng) / t.theta_max() - 0.5), 0.0, t.theta_max());
    const double w = std::clamp(v + 1e-6 * (vo(rng) / t.vol_max() - 0.5), 0.0, t.vol_max());
    const double dA = std::abs(t.lookup(a, v).A - t.lookup(b, w).A);
    EXPECT_LE(dA, Lt * std::abs(a - b) + Lv * std::abs(v - w) + 1e-15);
  }
}

TEST(Tables, PartialsMatchInterpolantSlopes) {
  const auto& t = cylinder_tables();
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> th(0.02, t.theta_max() - 0.02), vo(0.01, 0.99);
  for (int k = 0; k < 200; ++k) {
    const double a = th(rng), v = vo(rng) * t.vol_max();
    const auto s = t.lookup(a, v);
    // Stay inside one interpolation cell.
    const double ht = 1e-7, hv = 1e-12;
    const double ft = (t.lookup(a + ht, v).A - t.lookup(a - ht, v).A) / (2 * ht);
    const double fv = (t.lookup(a, v + hv).A - t.lookup(a, v - hv).A) / (2 * hv);
    EXPECT_NEAR(s.dA_dtheta, ft, 1e-6 * (1 + std::abs(ft)));
    EXPECT_NEAR(s.dA_dvol, fv, 1e-4 * (1 + std::abs(fv)));
  }
}

TEST(Tables, BinaryRoundTripIsExact) {
  const auto& t = cylinder_tables();
  const auto path = std::filesystem::temp_directory_path() / "pourplan_tables_roundtrip.bin";
  t.save(path.string());
  const auto u = GeomTables::load(path.string());
  EXPECT_TRUE(u == t);
  std::filesystem::remove(path);
}

TEST(Tables, ParallelBuildMatchesSerial) {
  const auto prof = oval_profile(0.045, 0.06, 0.015);
  const auto a = build_tables(prof, deg2rad(5.0), 0.0015, {.threads = 1});
  const auto b = build_tables(prof, deg2rad(5.0), 0.0015, {.threads = 3});
  EXPECT_TRUE(a == b);
}
