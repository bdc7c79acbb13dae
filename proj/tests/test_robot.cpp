#include "pourplan/robot.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace pourplan;

namespace {

KinematicChain mixed_chain() {
  // Six revolute joints in varied orientations plus one prismatic joint.
  return load_chain(nlohmann::json::parse(R"({
    "base": {"xyz": [0.1, -0.2, 0.05], "rpy": [0.1, 0.0, 0.3]},
    "joints": [
      {"axis": [0, 0, 1], "limits": [-3, 3], "max_velocity": 2},
      {"axis": [0, 1, 0], "offset": {"xyz": [0, 0, 0.25]}, "limits": [-2, 2], "max_velocity": 2},
      {"type": "prismatic", "axis": [0, 0, 1], "offset": {"xyz": [0, 0, 0.1]}, "limits": [0, 0.2], "max_velocity": 0.3},
      {"axis": [0, 1, 0], "offset": {"xyz": [0, 0, 0.3], "rpy": [0.2, 0.1, 0]}, "limits": [-2.5, 2.5], "max_velocity": 2},
      {"axis": [1, 0, 0], "offset": {"xyz": [0.02, 0, 0.28]}, "limits": [-3, 3], "max_velocity": 3},
      {"axis": [0, 1, 0], "offset": {"xyz": [0, 0, 0.05]}, "limits": [-2, 2], "max_velocity": 3},
      {"axis": [0, 0, 1], "offset": {"xyz": [0, 0, 0.04]}, "limits": [-3, 3], "max_velocity": 3}
    ],
    "grasp": {"xyz": [0.07, 0, -0.05], "rpy": [0, 0.3, 0]},
    "self_collision": "none"
  })"));
}

VecX random_q(const KinematicChain& c, std::mt19937& rng) {
  VecX q(static_cast<Eigen::Index>(c.dof()));
  for (std::size_t i = 0; i < c.dof(); ++i) {
    std::uniform_real_distribution<double> u(c.joints[i].lower, c.joints[i].upper);
    q(static_cast<Eigen::Index>(i)) = u(rng);
  }
  return q;
}

}  // namespace

TEST(ForwardKinematics, HomePoseComposesOffsets) {
  const auto c = mixed_chain();
  const auto fk = forward_kinematics(c, VecX::Zero(7));
  Pose T = c.base;
  for (const auto& j : c.joints) T = T * j.offset;
  T = T * c.grasp;
  EXPECT_TRUE(fk.container().isApprox(T, 1e-14));
}

TEST(ForwardKinematics, SingleRevoluteQuarterTurn) {
  KinematicChain c;
  c.joints.push_back({"j", JointType::Revolute, Vec3::UnitZ(), Pose::Identity(), -4, 4, 1, {}});
  c.grasp.translation() = Vec3(1, 0, 0);
  VecX q(1);
  q << kHalfPi;
  const Vec3 p = forward_kinematics(c, q).container().translation();
  EXPECT_NEAR(p.x(), 0.0, 1e-15);
  EXPECT_NEAR(p.y(), 1.0, 1e-15);
  EXPECT_NEAR(p.z(), 0.0, 1e-15);
}

TEST(ForwardKinematics, DimensionMismatch) {
  const auto c = mixed_chain();
  EXPECT_THROW(forward_kinematics(c, VecX::Zero(6)), InputError);
}

TEST(ForwardKinematics, BodiesMoveRigidly) {
  const auto c = mixed_chain();
  std::mt19937 rng(4);
  const std::vector<Vec3> pts = {{0.1, 0, 0}, {0, 0.2, 0.1}, {-0.05, 0.03, 0.3}};
  for (int k = 0; k < 50; ++k) {
    const auto fk = forward_kinematics(c, random_q(c, rng));
    for (const Pose& T : fk.bodies) {
      for (std::size_t a = 0; a < pts.size(); ++a) {
        for (std::size_t b = a + 1; b < pts.size(); ++b) {
          EXPECT_NEAR((T * pts[a] - T * pts[b]).norm(), (pts[a] - pts[b]).norm(), 1e-14);
        }
      }
    }
  }
}

TEST(LeanAzimuth, ConventionAnchors) {
  Pose T = Pose::Identity();
  EXPECT_EQ(lean_azimuth(T).theta, 0.0);
  EXPECT_EQ(lean_azimuth(T).phi, 0.0);
  T.linear() = rot_y(kHalfPi);
  EXPECT_NEAR(lean_azimuth(T).theta, kHalfPi, 1e-15);
  EXPECT_NEAR(lean_azimuth(T).phi, 0.0, 1e-15);
  T.linear() = lean_rotation(2 * kPi / 3, -kHalfPi);
  EXPECT_NEAR(lean_azimuth(T).theta, 2 * kPi / 3, 1e-15);
  EXPECT_NEAR(lean_azimuth(T).phi, -kHalfPi, 1e-15);
}

TEST(Jacobians, MatchCentralDifferences) {
  const auto c = mixed_chain();
  std::mt19937 rng(7);
  const double h = 1e-6;
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const VecX q = random_q(c, rng);
    const auto jac = jacobians(c, q);
    const Pose C = forward_kinematics(c, q).container();
    const auto lean = lean_azimuth(C);
    MatX fd(8, 7);
    for (int i = 0; i < 7; ++i) {
      VecX qp = q, qm = q;
      qp(i) += h;
      qm(i) -= h;
      const Pose Cp = forward_kinematics(c, qp).container(), Cm = forward_kinematics(c, qm).container();
      fd.block<3, 1>(0, i) = (Cp.translation() - Cm.translation()) / (2 * h);
      const Eigen::AngleAxisd aa(Cp.linear() * Cm.linear().transpose());
      fd.block<3, 1>(3, i) = aa.angle() * aa.axis() / (2 * h);
      fd(6, i) = (lean_azimuth(Cp).theta - lean_azimuth(Cm).theta) / (2 * h);
      double dphi = lean_azimuth(Cp).phi - lean_azimuth(Cm).phi;
      if (dphi > kPi) dphi -= 2 * kPi;
      if (dphi < -kPi) dphi += 2 * kPi;
      fd(7, i) = dphi / (2 * h);
    }
    MatX an(8, 7);
    an.topRows(6) = jac.J;
    an.row(6) = jac.dtheta_dq.transpose();
    an.row(7) = jac.dphi_dq.transpose();
    if (std::sin(lean.theta) < 0.05) continue;  // phi ill-conditioned near the axis
    worst = std::max(worst, (an - fd).cwiseAbs().maxCoeff() / std::max(1.0, an.cwiseAbs().maxCoeff()));
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(Jacobians, PrismaticColumnIsAxis) {
  const auto c = mixed_chain();
  std::mt19937 rng(8);
  const VecX q = random_q(c, rng);
  const auto fk = forward_kinematics(c, q);
  const auto jac = jacobians(c, q);
  const Vec3 axis = fk.joint_frames[2].linear() * c.joints[2].axis;
  EXPECT_TRUE(Vec3(jac.J.block<3, 1>(0, 2)).isApprox(axis, 1e-14));
  EXPECT_TRUE(Vec3(jac.J.block<3, 1>(3, 2)).isZero());
}

TEST(Jacobians, UprightPoseIsDegenerate) {
  KinematicChain c;
  c.joints.push_back({"pitch", JointType::Revolute, Vec3::UnitY(), Pose::Identity(), -3, 3, 1, {}});
  c.joints.push_back({"yaw", JointType::Revolute, Vec3::UnitZ(), Pose::Identity(), -3, 3, 1, {}});
  const auto jac = jacobians(c, VecX::Zero(2));
  EXPECT_TRUE(jac.phi_degenerate);
  EXPECT_TRUE(jac.dphi_dq.isZero());
  EXPECT_NEAR(jac.dtheta_dq(0), 1.0, 1e-15);
  VecX q(2);
  q << 0.3, 0.2;
  EXPECT_FALSE(jacobians(c, q).phi_degenerate);
}

TEST(Jacobians, PointJacobianMatchesDifferences) {
  const auto c = mixed_chain();
  std::mt19937 rng(9);
  const VecX q = random_q(c, rng);
  const auto fk = forward_kinematics(c, q);
  const Vec3 local(0.03, -0.02, 0.1);
  for (int body = 0; body < static_cast<int>(c.n_bodies()); ++body) {
    const MatX J = point_jacobian(c, fk, body, fk.bodies[static_cast<std::size_t>(body)] * local);
    for (int i = 0; i < 7; ++i) {
      VecX qp = q, qm = q;
      qp(i) += 1e-6;
      qm(i) -= 1e-6;
      const Vec3 fd = (forward_kinematics(c, qp).bodies[static_cast<std::size_t>(body)] * local -
                       forward_kinematics(c, qm).bodies[static_cast<std::size_t>(body)] * local) /
                      2e-6;
      EXPECT_NEAR((Vec3(J.col(i)) - fd).norm(), 0.0, 1e-8) << body << " " << i;
    }
  }
}

TEST(InverseKinematics, ReachesReachablePose) {
  const auto c = mixed_chain();
  std::mt19937 rng(10);
  for (int k = 0; k < 10; ++k) {
    const VecX goal = random_q(c, rng);
    const Pose target = forward_kinematics(c, goal).container();
    VecX start = goal + 0.2 * VecX::Ones(7);
    start = start.cwiseMax(c.lower()).cwiseMin(c.upper());
    const auto r = solve_ik(c, start, target);
    EXPECT_TRUE(r.converged) << r.position_error << " " << r.rotation_error;
    EXPECT_TRUE(forward_kinematics(c, r.q).container().isApprox(target, 1e-6));
  }
}

TEST(RobotConfig, RejectsBadLimits) {
  auto j = nlohmann::json::parse(R"({"joints": [{"axis": [0,0,1], "limits": [1, -1], "max_velocity": 1}]})");
  EXPECT_THROW(load_chain(j), InputError);
  j["joints"][0]["limits"] = {-1, 1};
  j["joints"][0]["max_velocity"] = 0;
  EXPECT_THROW(load_chain(j), InputError);
}

TEST(RobotConfig, ShapesRoundTrip) {
  const Shape s = Shape::box(Vec3(0.1, 0.2, 0.3), Pose(Eigen::Translation3d(1, 2, 3) * Eigen::AngleAxisd(0.4, Vec3::UnitY())));
  const Shape t = load_shape(shape_json(s));
  EXPECT_TRUE(t.local.isApprox(s.local, 1e-14));
  EXPECT_EQ(std::get<Box>(t.geom).half_extents, Vec3(0.1, 0.2, 0.3));
}
