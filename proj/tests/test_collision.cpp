#include "pourplan/collision.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace pourplan;

namespace {

Pose at(const Vec3& p, const Mat3& R = Mat3::Identity()) {
  Pose T = Pose::Identity();
  T.linear() = R;
  T.translation() = p;
  return T;
}

Mat3 random_rotation(std::mt19937& rng) {
  std::normal_distribution<double> n;
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return q.normalized().toRotationMatrix();
}

Shape random_shape(std::mt19937& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.4);
  switch (std::uniform_int_distribution<int>(0, 2)(rng)) {
    case 0:
      return Shape::sphere(u(rng));
    case 1:
      return Shape::capsule(Vec3(0, 0, -u(rng)), Vec3(0, 0, u(rng)), u(rng));
    default:
      return Shape::box(Vec3(u(rng), u(rng), u(rng)));
  }
}

void expect_consistent(const Contact& c) {
  EXPECT_NEAR(c.n.norm(), 1.0, 1e-12);
  EXPECT_NEAR(c.n.dot(c.a - c.b), -c.d, 1e-9);
}

}  // namespace

TEST(CheckPair, OverlappingSpheres) {
  const auto c = check_pair(Shape::sphere(0.5), at({0, 0, 0}), Shape::sphere(0.5), at({0.6, 0, 0}));
  ASSERT_TRUE(c);
  EXPECT_NEAR(c->d, 0.4, 1e-15);
  EXPECT_NEAR(c->n.x(), -1.0, 1e-15);
  EXPECT_FALSE(c->degenerate);
  expect_consistent(*c);
}

TEST(CheckPair, FarSpheresWithMargin) {
  EXPECT_FALSE(check_pair(Shape::sphere(0.5), at({0, 0, 0}), Shape::sphere(0.5), at({2, 0, 0}), 0.1));
  const auto near = check_pair(Shape::sphere(0.5), at({0, 0, 0}), Shape::sphere(0.5), at({1.05, 0, 0}), 0.1);
  ASSERT_TRUE(near);
  EXPECT_NEAR(near->d, -0.05, 1e-15);
  expect_consistent(*near);
}

TEST(CheckPair, CoincidentCentersAreDegenerate) {
  const auto c = check_pair(Shape::sphere(0.5), at({1, 2, 3}), Shape::sphere(0.5), at({1, 2, 3}));
  ASSERT_TRUE(c);
  EXPECT_TRUE(c->degenerate);
  EXPECT_EQ(c->n, Vec3::UnitZ());
  EXPECT_DOUBLE_EQ(c->d, 1.0);
}

TEST(CheckPair, SphereOnBoxFace) {
  const auto c = check_pair(Shape::sphere(0.1), at({0, 0, 0.55}), Shape::box(Vec3(1, 1, 0.5)), at({0, 0, 0}));
  ASSERT_TRUE(c);
  EXPECT_NEAR(c->d, 0.05, 1e-12);
  EXPECT_NEAR(c->n.z(), 1.0, 1e-12);
  expect_consistent(*c);
}

TEST(CheckPair, SphereCentreInsideBox) {
  const auto c = check_pair(Shape::sphere(0.1), at({0.9, 0, 0}), Shape::box(Vec3(1, 1, 1)), at({0, 0, 0}));
  ASSERT_TRUE(c);
  EXPECT_NEAR(c->d, 0.2, 1e-12);
  EXPECT_NEAR(c->n.x(), 1.0, 1e-12);
  expect_consistent(*c);
}

TEST(CheckPair, CapsuleAcrossBoxEdge) {
  // Capsule lying along y, resting into the top of a unit box.
  const auto cap = Shape::capsule(Vec3(0, -2, 0), Vec3(0, 2, 0), 0.1);
  const auto c = check_pair(cap, at({0.3, 0, 1.05}), Shape::box(Vec3(1, 1, 1)), at({0, 0, 0}));
  ASSERT_TRUE(c);
  EXPECT_NEAR(c->d, 0.05, 1e-9);
  EXPECT_NEAR(c->n.z(), 1.0, 1e-9);
  expect_consistent(*c);
}

TEST(CheckPair, CapsuleThroughBoxUsesMinimumTranslation) {
  // Segment pierces the box along x near its top face.
  const auto cap = Shape::capsule(Vec3(-3, 0, 0), Vec3(3, 0, 0), 0.1);
  const auto c = check_pair(cap, at({0, 0, 0.8}), Shape::box(Vec3(1, 1, 1)), at({0, 0, 0}));
  ASSERT_TRUE(c);
  EXPECT_NEAR(c->d, 0.3, 1e-12);
  EXPECT_NEAR(c->n.z(), 1.0, 1e-12);
  expect_consistent(*c);
}

TEST(CheckPair, CapsuleCapsuleParallel) {
  const auto a = Shape::capsule(Vec3(0, 0, -1), Vec3(0, 0, 1), 0.2);
  const auto c = check_pair(a, at({0, 0, 0}), a, at({0.3, 0, 0.5}));
  ASSERT_TRUE(c);
  EXPECT_NEAR(c->d, 0.1, 1e-12);
  EXPECT_NEAR(c->n.x(), -1.0, 1e-12);
  expect_consistent(*c);
}

TEST(CheckPair, BoxBoxStacked) {
  const auto c = check_pair(Shape::box(Vec3(0.5, 0.5, 0.5)), at({0.1, 0, 0.9}), Shape::box(Vec3(1, 1, 0.5)),
                            at({0, 0, 0}));
  ASSERT_TRUE(c);
  EXPECT_NEAR(c->d, 0.1, 1e-12);
  EXPECT_NEAR(c->n.z(), 1.0, 1e-12);
  expect_consistent(*c);
}

TEST(CheckPair, ShapeLocalPoseIsApplied) {
  const auto s = Shape::sphere(0.1, Vec3(1, 0, 0));
  const auto c = check_pair(s, at({0, 0, 0}), Shape::sphere(0.1), at({1.15, 0, 0}));
  ASSERT_TRUE(c);
  EXPECT_NEAR(c->d, 0.05, 1e-15);
}

TEST(CheckPair, SwapNegatesNormal) {
  std::mt19937 rng(1);
  std::uniform_real_distribution<double> u(-0.4, 0.4);
  for (int k = 0; k < 300; ++k) {
    const Shape A = random_shape(rng), B = random_shape(rng);
    const Pose pa = at({u(rng), u(rng), u(rng)}, random_rotation(rng));
    const Pose pb = at({u(rng), u(rng), u(rng)}, random_rotation(rng));
    const auto ab = check_pair(A, pa, B, pb, 10.0);
    const auto ba = check_pair(B, pb, A, pa, 10.0);
    ASSERT_TRUE(ab && ba);
    EXPECT_NEAR(ab->d, ba->d, 1e-9);
    if (ab->d > 1e-6 && !ab->degenerate) {
      EXPECT_NEAR((ab->n + ba->n).norm(), 0.0, 1e-6);
    }
    expect_consistent(*ab);
    expect_consistent(*ba);
  }
}

TEST(CheckPair, DepthIsOneLipschitz) {
  std::mt19937 rng(2);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  std::normal_distribution<double> n;
  for (int k = 0; k < 1000; ++k) {
    const Shape A = random_shape(rng), B = random_shape(rng);
    const Pose pa = at({u(rng), u(rng), u(rng)}, random_rotation(rng));
    const Pose pb = at({u(rng), u(rng), u(rng)}, random_rotation(rng));
    const Vec3 delta = 1e-3 * Vec3(n(rng), n(rng), n(rng));
    const auto c0 = check_pair(A, pa, B, pb, 10.0);
    const auto c1 = check_pair(A, at(pa.translation() + delta, pa.linear()), B, pb, 10.0);
    ASSERT_TRUE(c0 && c1);
    // Box-box separation is only a lower bound; compare penetrating cases.
    const bool box_pair = std::holds_alternative<Box>(A.geom) && std::holds_alternative<Box>(B.geom);
    if (box_pair && (c0->d < 0 || c1->d < 0)) continue;
    EXPECT_LE(std::abs(c1->d - c0->d), delta.norm() * (1 + 1e-6) + 1e-10);
  }
}

TEST(CheckPair, SeparatedPairsReportNegativeDepth) {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  for (int k = 0; k < 200; ++k) {
    const Shape A = random_shape(rng), B = random_shape(rng);
    const Pose pa = at({u(rng), u(rng), u(rng)}, random_rotation(rng));
    const Pose pb = at({3 + u(rng), u(rng), u(rng)}, random_rotation(rng));
    const auto c = check_pair(A, pa, B, pb, 10.0);
    ASSERT_TRUE(c);
    EXPECT_LT(c->d, 0.0);
  }
}

TEST(DeepestContacts, NoPenetrationGivesNothing) {
  const std::vector<Obstacle> obs = {{"box", Shape::box(Vec3(0.1, 0.1, 0.1), at({5, 0, 0}))}};
  const std::vector<std::vector<Shape>> bodies = {{Shape::sphere(0.1)}, {Shape::sphere(0.1)}};
  const std::vector<Pose> poses = {at({0, 0, 0}), at({1, 0, 0})};
  EXPECT_TRUE(deepest_contacts(obs, bodies, poses).empty());
}

TEST(DeepestContacts, KeepsDeepestFeaturePerPair) {
  // One body with two spheres penetrating the same box by 0.02 and 0.05.
  const std::vector<Obstacle> obs = {{"box", Shape::box(Vec3(1, 1, 0.5))}};
  const std::vector<std::vector<Shape>> bodies = {
      {Shape::sphere(0.1, Vec3(-0.5, 0, 0.58)), Shape::sphere(0.1, Vec3(0.5, 0, 0.55))}};
  const std::vector<Pose> poses = {at({0, 0, 0})};
  const auto cs = deepest_contacts(obs, bodies, poses);
  ASSERT_EQ(cs.size(), 1u);
  EXPECT_NEAR(cs[0].contact.d, 0.05, 1e-12);
  EXPECT_EQ(cs[0].body, 0);
  EXPECT_EQ(cs[0].obstacle, 0);
}

TEST(DeepestContacts, OneContactPerBody) {
  const std::vector<Obstacle> obs = {{"box", Shape::box(Vec3(1, 1, 0.5))}};
  const std::vector<std::vector<Shape>> bodies = {{Shape::sphere(0.1)}, {Shape::sphere(0.1)}};
  const std::vector<Pose> poses = {at({-0.5, 0, 0.55}), at({0.5, 0, 0.58})};
  const auto cs = deepest_contacts(obs, bodies, poses);
  ASSERT_EQ(cs.size(), 2u);
  EXPECT_EQ(cs[0].body, 0);
  EXPECT_EQ(cs[1].body, 1);
}

TEST(DeepestContacts, SelfPairsFollowMask) {
  const std::vector<std::vector<Shape>> bodies = {{Shape::sphere(0.1)}, {Shape::sphere(0.1)}, {Shape::sphere(0.1)}};
  const std::vector<Pose> poses = {at({0, 0, 0}), at({0.15, 0, 0}), at({0.05, 0, 0})};
  const std::vector<std::pair<int, int>> mask = {{0, 2}};
  const auto cs = deepest_contacts({}, bodies, poses, 0.0, mask);
  ASSERT_EQ(cs.size(), 1u);
  EXPECT_EQ(cs[0].body, 0);
  EXPECT_EQ(cs[0].other_body, 2);
  EXPECT_EQ(cs[0].obstacle, -1);
}
