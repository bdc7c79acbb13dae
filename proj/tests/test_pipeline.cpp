#include "pourplan/pipeline.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace pourplan;
namespace fs = std::filesystem;

namespace {

const std::string kBench = std::string(POURPLAN_DATA_DIR) + "/bench";

const ProblemFile& bench() {
  static const ProblemFile pf = load_problem_file(kBench + "/problem.json", false);
  return pf;
}

// Bench problem with one key replaced, in the temp dir with absolute paths.
std::string patched_problem(const std::string& key, const nlohmann::json& value) {
  std::ifstream in(kBench + "/problem.json");
  nlohmann::json j;
  in >> j;
  for (const char* k : {"robot", "world", "profile", "tables", "coefficients"}) {
    j[k] = kBench + "/" + j[k].get<std::string>();
  }
  if (value.is_null()) {
    j.erase(key);
  } else {
    j[key] = value;
  }
  const std::string path = (fs::temp_directory_path() / "pourplan_patched_problem.json").string();
  std::ofstream(path) << j.dump();
  return path;
}

}  // namespace

TEST(ProblemFile, LoadsBenchProblem) {
  const ProblemFile& pf = bench();
  EXPECT_EQ(pf.problem.N, 100u);
  EXPECT_EQ(pf.problem.tau, 5.0);
  EXPECT_EQ(pf.problem.mode, PenaltyMode::AL);
  EXPECT_EQ(pf.problem.weights.transfer, 1e4);
  EXPECT_EQ(pf.problem.weights.guide, 10.0);
  EXPECT_EQ(pf.problem.weights.reg, 0.1);
  EXPECT_EQ(pf.problem.safety_margin, 0.01);
  EXPECT_EQ(pf.problem.chain.dof(), 6u);
  EXPECT_DOUBLE_EQ(pf.problem.initial.vol, 0.8 * pf.profile.area() * pf.profile.slab_depth());
  EXPECT_EQ(pf.tables_path, (fs::path(kBench) / "cylinder.tables").lexically_normal().string());
  ASSERT_TRUE(pf.start_pose);
  EXPECT_FALSE(pf.q_start);
  EXPECT_TRUE(pf.start_pose->translation().isApprox(Vec3(0.30, 0.0, 0.05)));
  EXPECT_DOUBLE_EQ(pf.pre_pour.lean, kHalfPi);
  EXPECT_EQ(pf.settle, 2.0);
  EXPECT_EQ(pf.oracle.at("cell").get<double>(), 0.0025);
  EXPECT_FALSE(pf.problem.world.obstacles.empty());
}

TEST(ProblemFile, RejectsBadValues) {
  EXPECT_THROW(load_problem_file(patched_problem("fill", 1.5), false), InputError);
  EXPECT_THROW(load_problem_file(patched_problem("start", nullptr), false), InputError);
  EXPECT_THROW(load_problem_file(patched_problem("mode", "L2"), false), InputError);
  EXPECT_THROW(load_problem_file(patched_problem("start", {{"q", {0.0, 1.0}}}), false), InputError);
  EXPECT_THROW(load_problem_file(kBench + "/missing.json", false), InputError);
}

TEST(ProblemFile, DirectStartConfiguration) {
  const ProblemFile pf = load_problem_file(patched_problem("start", {{"q", {0.0, 0.1, 0.2, 0.3, 0.4, 0.5}}}), false);
  ASSERT_TRUE(pf.q_start);
  EXPECT_EQ(start_configuration(pf), (VecX(6) << 0.0, 0.1, 0.2, 0.3, 0.4, 0.5).finished());
}

TEST(Settings, ReadsEveryField) {
  const SolverSettings s = load_settings(nlohmann::json::parse(
      R"({"k0": 0.5, "eps": 1e-5, "mu0": 7, "eta0": 3, "max_outer": 12, "max_inner": 4, "penalty_growth": 5})"));
  EXPECT_EQ(s.k0, 0.5);
  EXPECT_EQ(s.eps, 1e-5);
  EXPECT_EQ(s.mu0, 7.0);
  EXPECT_EQ(s.eta0, 3.0);
  EXPECT_EQ(s.max_outer, 12);
  EXPECT_EQ(s.max_inner, 4);
  EXPECT_EQ(s.penalty_growth, 5.0);
  EXPECT_EQ(s.k_up, SolverSettings{}.k_up);
  EXPECT_THROW(load_settings(nlohmann::json::parse(R"({"eps": -1})")), InputError);
  EXPECT_THROW(load_settings(nlohmann::json::parse(R"({"max_outer": "many"})")), InputError);
  const SolverSettings b = load_settings_file(kBench + "/settings.json");
  EXPECT_EQ(b.max_outer, 200);
}

TEST(InitialTrajectory, ReachesStartAndPrePour) {
  const ProblemFile& pf = bench();
  const MatX Q = initial_trajectory(pf);
  ASSERT_EQ(Q.cols(), 100);
  const Pose start = forward_kinematics(pf.problem.chain, Q.col(0)).container();
  const Pose end = forward_kinematics(pf.problem.chain, Q.col(99)).container();
  EXPECT_LT((start.translation() - Vec3(0.30, 0.0, 0.05)).norm(), 1e-6);
  EXPECT_LT((end.translation() - pf.pre_pour.position).norm(), 1e-6);
  const auto lean = lean_angles(pf.problem, Q);
  EXPECT_NEAR(lean.front(), 0.0, 1e-6);
  EXPECT_NEAR(lean.back(), kHalfPi, 1e-6);
  // Straight line in joint space.
  for (Eigen::Index i = 1; i < 99; ++i) {
    EXPECT_LT((Q.col(i) - (Q.col(0) + (Q.col(99) - Q.col(0)) * (i / 99.0))).norm(), 1e-12);
  }
  EXPECT_LE(limit_violation(pf.problem, Q).joint, 0.0);
}

TEST(InitialTrajectory, UnreachablePoseIsInputError) {
  const ProblemFile& pf = bench();
  const Pose far(Eigen::Translation3d(3.0, 0.0, 0.0));
  EXPECT_THROW(ik_any(pf.problem.chain, far, {pf.problem.chain.lower()}, "far"), InputError);
}

TEST(TrajectoryMotion, FollowsContainerAndHoldsLastPose) {
  const ProblemFile& pf = bench();
  const MatX Q = initial_trajectory(pf);
  std::vector<double> t;
  for (Eigen::Index i = 0; i < Q.cols(); ++i) t.push_back(0.05 * static_cast<double>(i));
  const sim::Motion m = trajectory_motion(pf.problem.chain, t, Q, 1.5);
  EXPECT_DOUBLE_EQ(m.end(), t.back() + 1.5);
  const Pose c = forward_kinematics(pf.problem.chain, Q.col(40)).container();
  const sim::PlanarPose p = m.at(t[40]);
  EXPECT_NEAR(p.x, c.translation().x(), 1e-12);
  EXPECT_NEAR(p.z, c.translation().z(), 1e-12);
  const sim::PlanarPose last = m.at(t.back()), held = m.at(m.end());
  EXPECT_EQ(last.x, held.x);
  EXPECT_EQ(last.theta, held.theta);
  EXPECT_NEAR(std::abs(held.theta), kHalfPi, 1e-6);
  EXPECT_THROW(trajectory_motion(pf.problem.chain, {0.0}, Q, 0.0), InputError);
}

TEST(FitDomain, CoversTheSweptContainerAndExtras) {
  const ContainerProfile cup = rectangle_profile(0.06, 0.10);
  sim::PourSpec ps;
  ps.pivot = {0.2, 0.3};
  ps.theta_max = deg2rad(150.0);
  ps.ramp_time = 1.0;
  const sim::Motion m = sim::pour_motion(cup, ps);
  sim::SimConfig base;
  base.cell = 0.0025;
  const std::vector<Vec2> extra{{0.6, 0.0}, {0.7, 0.1}};
  const double margin = 0.03;
  const sim::SimConfig cfg = fit_domain(base, cup, m, extra, margin);
  const Vec2 lo = cfg.domain_min, hi = lo + cfg.cell * Vec2(cfg.nx, cfg.nz);
  EXPECT_NEAR(std::remainder(lo.x(), cfg.cell), 0.0, 1e-12);
  EXPECT_NEAR(std::remainder(lo.y(), cfg.cell), 0.0, 1e-12);
  const double pad = margin + cfg.wall() - 1e-12;
  auto inside = [&](const Vec2& v) {
    return v.x() - lo.x() >= pad && hi.x() - v.x() >= pad && v.y() - lo.y() >= pad && hi.y() - v.y() >= pad;
  };
  for (double t = m.start(); t <= m.end(); t += cfg.frame_dt) {
    for (const Vec2& v : cup.vertices()) EXPECT_TRUE(inside(sim::to_world(m.at(t), v))) << t;
  }
  for (const Vec2& v : extra) EXPECT_TRUE(inside(v));
  // Tight: one cell more than needed at most on the far sides.
  EXPECT_LT(hi.x() - 0.7, margin + cfg.wall() + cfg.cell + 1e-12);
}

TEST(Validation, StillCupKeepsEverything) {
  const ContainerProfile cup = rectangle_profile(0.06, 0.10);
  World w;
  w.target.region = {{0.3, 0.0}, {0.4, 0.0}, {0.4, 0.1}, {0.3, 0.1}};
  const sim::Motion m(std::vector<sim::MotionKey>{{0.0, {0.0, 0.01, 0.0}}, {0.1, {0.0, 0.01, 0.0}}});
  const auto v = validate_motion(cup, m, w, sim::SimConfig{}, 0.02);
  ASSERT_FALSE(v.frames.empty());
  const auto& f = v.frames.back();
  EXPECT_EQ(f.target, 0u);
  EXPECT_EQ(f.free, 0u);
  EXPECT_EQ(f.held, v.run.frames.back().pos.size());
  EXPECT_EQ(v.quality, 0.0);

  const auto path = fs::temp_directory_path() / "pourplan_landing.csv";
  save_landing_csv(path.string(), v.frames);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "t[s],held[particles],free[particles],target[particles],quality[fraction]");
  std::size_t rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, v.frames.size());
  fs::remove(path);
}
