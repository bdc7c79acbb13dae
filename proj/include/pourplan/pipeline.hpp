#pragma once
// Problem and settings files, the default initial trajectory, and oracle
// validation of a planned trajectory.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pourplan/common.hpp"
#include "pourplan/container_geom.hpp"
#include "pourplan/fluid_model.hpp"
#include "pourplan/optimizer.hpp"
#include "pourplan/oracle_sim.hpp"
#include "pourplan/robot.hpp"
#include "pourplan/world.hpp"

namespace pourplan {

/// Container pose the initial trajectory ends at: origin position plus lean.
struct PrePour {
  Vec3 position = Vec3::Zero();
  double lean = kHalfPi;
  double azimuth = 0.0;

  Pose pose() const {
    Pose p = Pose::Identity();
    p.translation() = position;
    p.linear() = lean_rotation(lean, azimuth);
    return p;
  }
};

struct ProblemFile {
  PlanningProblem problem;
  ContainerProfile profile;
  std::string path, robot_path, world_path, profile_path, tables_path, coeffs_path;
  std::string coeffs_container_id;
  std::optional<VecX> q_start;  ///< given directly, or
  std::optional<Pose> start_pose;  ///< reached by IK
  PrePour pre_pour;
  std::vector<VecX> ik_seeds;
  double fill = 0.8;
  nlohmann::json oracle = nlohmann::json::object();  ///< SimConfig overrides for validation
  double settle = 2.0;         ///< s the final pose is held in validation
  double domain_margin = 0.05; ///< m around the swept container and the target
};

namespace detail {

inline nlohmann::json read_json_file(const std::string& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + what + ": " + path);
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(what + " " + path + ": " + e.what());
  }
}

inline std::string resolve(const std::string& base_file, const std::string& rel) {
  const std::filesystem::path p(rel);
  if (p.is_absolute()) return rel;
  return (std::filesystem::path(base_file).parent_path() / p).lexically_normal().string();
}

inline VecX json_vecx(const nlohmann::json& j) {
  if (!j.is_array()) throw InputError("expected an array of numbers");
  VecX v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

}  // namespace detail

/// Reads a problem file. Paths inside it are relative to the file. The tables
/// and coefficient files are loaded only when `load_model` is set, so a
/// problem can be read before they exist.
inline ProblemFile load_problem_file(const std::string& path, bool load_model = true) {
  const nlohmann::json j = detail::read_json_file(path, "problem file");
  try {
    ProblemFile pf{.problem = {},
                   .profile = load_profile_file(detail::resolve(path, j.at("profile").get<std::string>()))};
    pf.path = path;
    pf.robot_path = detail::resolve(path, j.at("robot").get<std::string>());
    pf.world_path = detail::resolve(path, j.at("world").get<std::string>());
    pf.profile_path = detail::resolve(path, j.at("profile").get<std::string>());
    pf.tables_path = detail::resolve(path, j.at("tables").get<std::string>());
    pf.coeffs_path = detail::resolve(path, j.at("coefficients").get<std::string>());

    PlanningProblem& pb = pf.problem;
    pb.chain = load_chain_file(pf.robot_path);
    pb.world = load_world_file(pf.world_path);
    if (load_model) {
      pb.tables = GeomTables::load(pf.tables_path);
      const CoefficientFile cf = load_coefficients(pf.coeffs_path);
      pb.coeffs = cf.coeffs;
      pf.coeffs_container_id = cf.container_id;
    }
    pb.N = j.value("N", pb.N);
    pb.tau = j.value("tau", pb.tau);
    pb.theta_final = j.value("theta_final", pb.theta_final);
    pb.mode = penalty_mode_from_string(j.value("mode", to_string(pb.mode)));
    if (j.contains("weights")) {
      const auto& w = j["weights"];
      pb.weights.transfer = w.value("transfer", pb.weights.transfer);
      pb.weights.guide = w.value("guide", pb.weights.guide);
      pb.weights.reg = w.value("reg", pb.weights.reg);
    }
    pb.safety_margin = j.value("safety_margin", pb.safety_margin);
    pb.query_margin = j.value("query_margin", pb.query_margin);

    pf.fill = j.value("fill", pf.fill);
    if (!(pf.fill > 0.0 && pf.fill < 1.0)) throw InputError("problem file: fill must be in (0, 1)");
    pb.initial.vol = j.contains("initial_volume") ? j["initial_volume"].get<double>()
                                                  : pf.fill * pf.profile.area() * pf.profile.slab_depth();

    const auto& start = j.at("start");
    if (start.contains("q")) {
      pf.q_start = detail::json_vecx(start["q"]);
      if (pf.q_start->size() != static_cast<Eigen::Index>(pb.chain.dof())) {
        throw InputError("problem file: start q has the wrong size");
      }
    } else {
      pf.start_pose = detail::json_pose(start.at("pose"));
    }
    const auto& pre = j.at("pre_pour");
    pf.pre_pour.position = detail::json_vec3(pre.at("xyz"));
    pf.pre_pour.lean = pre.value("lean", pb.theta_final);
    pf.pre_pour.azimuth = pre.value("azimuth", 0.0);
    for (const auto& s : j.value("ik_seeds", nlohmann::json::array())) {
      pf.ik_seeds.push_back(detail::json_vecx(s));
      if (pf.ik_seeds.back().size() != static_cast<Eigen::Index>(pb.chain.dof())) {
        throw InputError("problem file: IK seed has the wrong size");
      }
    }
    if (j.contains("validation")) {
      const auto& v = j["validation"];
      pf.settle = v.value("settle", pf.settle);
      pf.domain_margin = v.value("domain_margin", pf.domain_margin);
      pf.oracle = v.value("oracle", nlohmann::json::object());
    }
    if (!(pf.settle >= 0.0) || !(pf.domain_margin >= 0.0)) {
      throw InputError("problem file: settle time and domain margin must be non-negative");
    }
    return pf;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("problem file " + path + ": " + e.what());
  }
}

inline SolverSettings load_settings(const nlohmann::json& j) {
  try {
    SolverSettings s;
    s.k0 = j.value("k0", s.k0);
    s.k_min = j.value("k_min", s.k_min);
    s.k_max = j.value("k_max", s.k_max);
    s.k_up = j.value("k_up", s.k_up);
    s.k_down = j.value("k_down", s.k_down);
    s.gain_low = j.value("gain_low", s.gain_low);
    s.gain_high = j.value("gain_high", s.gain_high);
    s.eps = j.value("eps", s.eps);
    s.eta0 = j.value("eta0", s.eta0);
    s.mu0 = j.value("mu0", s.mu0);
    s.penalty_growth = j.value("penalty_growth", s.penalty_growth);
    s.penalty_max = j.value("penalty_max", s.penalty_max);
    s.max_outer = j.value("max_outer", s.max_outer);
    s.max_inner = j.value("max_inner", s.max_inner);
    s.clearance_tol = j.value("clearance_tol", s.clearance_tol);
    s.verbose = j.value("verbose", s.verbose);
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("solver settings: ") + e.what());
  }
}

inline SolverSettings load_settings_file(const std::string& path) {
  return load_settings(detail::read_json_file(path, "solver settings"));
}

/// IK from each seed in turn; the first converged solution wins. Throws when
/// none converges.
inline VecX ik_any(const KinematicChain& chain, const Pose& target, const std::vector<VecX>& seeds,
                   const std::string& what) {
  IkResult best;
  best.position_error = std::numeric_limits<double>::infinity();
  for (const VecX& s : seeds) {
    IkResult r = solve_ik(chain, s, target);
    if (r.converged) return r.q;
    if (r.position_error < best.position_error) best = r;
  }
  std::ostringstream msg;
  msg << what << " pose is out of reach (best position error " << best.position_error << " m)";
  throw InputError(msg.str());
}

namespace detail {

// Mid-range seed followed by a coarse grid over the first joints.
inline std::vector<VecX> default_seeds(const KinematicChain& chain, const std::vector<VecX>& user) {
  std::vector<VecX> seeds = user;
  const VecX lo = chain.lower(), hi = chain.upper();
  const VecX mid = 0.5 * (lo + hi);
  seeds.push_back(mid);
  const Eigen::Index d = mid.size();
  for (double a : {0.25, 0.5, 0.75}) {
    for (double b : {0.25, 0.5, 0.75}) {
      for (double c : {0.1, 0.5, 0.9}) {
        VecX s = mid;
        if (d > 1) s(1) = lo(1) + a * (hi(1) - lo(1));
        if (d > 2) s(2) = lo(2) + b * (hi(2) - lo(2));
        if (d > 3) s(3) = lo(3) + c * (hi(3) - lo(3));
        seeds.push_back(s);
      }
    }
  }
  return seeds;
}

}  // namespace detail

inline VecX start_configuration(const ProblemFile& pf) {
  if (pf.q_start) return *pf.q_start;
  return ik_any(pf.problem.chain, *pf.start_pose, detail::default_seeds(pf.problem.chain, pf.ik_seeds), "start");
}

/// Straight line in joint space from the start to the pre-pour pose, which
/// carries the full lean; the pre-pour IK is seeded from the start first.
inline MatX initial_trajectory(const ProblemFile& pf) {
  const VecX qs = start_configuration(pf);
  std::vector<VecX> seeds{qs};
  for (const VecX& s : detail::default_seeds(pf.problem.chain, pf.ik_seeds)) seeds.push_back(s);
  const VecX qe = ik_any(pf.problem.chain, pf.pre_pour.pose(), seeds, "pre-pour");
  return linear_trajectory(qs, qe, pf.problem.N);
}

// ---------------------------------------------------------------------------
// Oracle validation

/// Planar container motion of a joint trajectory, holding the last pose for
/// `settle` seconds.
inline sim::Motion trajectory_motion(const KinematicChain& chain, const std::vector<double>& times, const MatX& Q,
                                     double settle) {
  if (times.size() != static_cast<std::size_t>(Q.cols())) throw InputError("trajectory: times and poses differ");
  std::vector<sim::MotionKey> keys;
  for (Eigen::Index i = 0; i < Q.cols(); ++i) {
    keys.push_back({times[static_cast<std::size_t>(i)], sim::planar_pose(forward_kinematics(chain, Q.col(i)).container())});
  }
  if (settle > 0.0) keys.push_back({times.back() + settle, keys.back().pose});
  return sim::Motion(std::move(keys));
}

/// Oracle grid covering every pose of the container in `motion` and the target
/// region, padded by `margin`, snapped to whole cells.
inline sim::SimConfig fit_domain(sim::SimConfig cfg, const ContainerProfile& prof, const sim::Motion& motion,
                                 const std::vector<Vec2>& extra, double margin) {
  Vec2 lo = Vec2::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
  auto grow = [&](const Vec2& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  };
  const double t0 = motion.start(), t1 = motion.end();
  const int samples = std::max(2, static_cast<int>(std::ceil((t1 - t0) / cfg.frame_dt)) + 1);
  for (int k = 0; k < samples; ++k) {
    const double t = t0 + (t1 - t0) * k / (samples - 1);
    const sim::PlanarPose pose = motion.at(t);
    for (const Vec2& v : prof.vertices()) grow(sim::to_world(pose, v));
  }
  for (const Vec2& v : extra) grow(v);
  lo -= Vec2::Constant(margin + cfg.wall());
  hi += Vec2::Constant(margin + cfg.wall());
  cfg.domain_min = (lo / cfg.cell).array().floor().matrix() * cfg.cell;
  cfg.nx = static_cast<int>(std::ceil((hi.x() - cfg.domain_min.x()) / cfg.cell));
  cfg.nz = static_cast<int>(std::ceil((hi.y() - cfg.domain_min.y()) / cfg.cell));
  return cfg;
}

struct FrameLanding {
  double t = 0.0;
  std::size_t held = 0, free = 0, target = 0;  ///< particles in the container, elsewhere, inside T
  double quality = 0.0;
};

struct ValidationResult {
  double quality = 0.0;
  std::vector<FrameLanding> frames;
  sim::SimRun run;
};

inline ValidationResult validate_motion(const ContainerProfile& prof, const sim::Motion& motion,
                                        const World& world, const sim::SimConfig& base, double margin) {
  sim::SimConfig cfg = base;
  cfg.obstacles = sim::obstacle_rects(world);
  cfg.target_region = world.target.region;
  cfg.duration = motion.end() - motion.start();
  cfg = fit_domain(cfg, prof, motion, world.target.region, margin);
  ValidationResult out;
  out.run = sim::simulate_pour(prof, motion, cfg);
  for (const auto& f : out.run.frames) {
    FrameLanding fl;
    fl.t = f.t;
    for (std::size_t p = 0; p < f.pos.size(); ++p) {
      if (poly::contains(world.target.region, f.pos[p])) {
        ++fl.target;
      } else if (sim::inside_container(out.run, f, p)) {
        ++fl.held;
      } else {
        ++fl.free;
      }
    }
    fl.quality = sim::quality(f, world.target.region);
    out.frames.push_back(fl);
  }
  out.quality = out.frames.empty() ? 0.0 : out.frames.back().quality;
  return out;
}

/// Oracle run of a planned trajectory with the problem's fill and validation
/// settings.
inline ValidationResult validate_plan(const ProblemFile& pf, const std::vector<double>& times, const MatX& Q,
                                      std::uint64_t seed = 0) {
  sim::SimConfig base = sim::SimConfig::from_json(pf.oracle);
  base.fill = pf.fill;
  base.seed = seed;
  return validate_motion(pf.profile, trajectory_motion(pf.problem.chain, times, Q, pf.settle), pf.problem.world, base,
                         pf.domain_margin);
}

inline void save_landing_csv(const std::string& path, const std::vector<FrameLanding>& frames) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write landing file: " + path);
  out << "t[s],held[particles],free[particles],target[particles],quality[fraction]\n";
  out.precision(17);
  for (const auto& f : frames) {
    out << f.t << ',' << f.held << ',' << f.free << ',' << f.target << ',' << f.quality << '\n';
  }
}

}  // namespace pourplan
