#pragma once

// Spacetime trajectory optimization for pouring. The joint trajectory Q
// (dof x N, one column per timestep) and the fluid trajectory P are updated
// alternately: P is re-predicted from Q, then a trust-region QP step improves
// Q with P held fixed.

#include "pourplan/collision.hpp"
#include "pourplan/container_geom.hpp"
#include "pourplan/fluid_model.hpp"
#include "pourplan/qp.hpp"
#include "pourplan/robot.hpp"
#include "pourplan/world.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace pourplan {

enum class PenaltyMode { L1, AL };

inline std::string to_string(PenaltyMode m) { return m == PenaltyMode::L1 ? "L1" : "AL"; }
inline PenaltyMode penalty_mode_from_string(const std::string& s) {
  if (s == "L1" || s == "l1") return PenaltyMode::L1;
  if (s == "AL" || s == "al") return PenaltyMode::AL;
  throw InputError("unknown penalty mode '" + s + "' (expected L1 or AL)");
}

struct Weights {
  double transfer = 1.0;
  double guide = 1.0;
  double reg = 0.1;
};

struct PlanningProblem {
  KinematicChain chain;
  World world;
  GeomTables tables;
  OutflowCoeffs coeffs;
  FluidState initial;
  std::size_t N = 100;
  double tau = 4.0;
  double theta_final = kHalfPi;
  PenaltyMode mode = PenaltyMode::AL;
  Weights weights;
  double safety_margin = 0.01;  ///< required separation in the collision rows
  double query_margin = 0.05;   ///< pairs closer than this (beyond the safety margin) become rows

  double dt() const { return tau / static_cast<double>(N - 1); }

  void validate() const {
    if (N < 3) throw InputError("planning problem: N must be at least 3");
    if (!(tau > 0.0)) throw InputError("planning problem: tau must be positive");
    if (!world.target.center.allFinite()) throw InputError("planning problem: target centre must be finite");
    if (!(initial.vol > 0.0)) throw InputError("planning problem: initial volume must be positive");
    if (!(theta_final >= 0.0 && theta_final <= tables.theta_max())) {
      throw InputError("planning problem: final lean outside the table range");
    }
    if (!(safety_margin >= 0.0) || !(query_margin >= 0.0)) throw InputError("planning problem: negative margin");
    chain.validate();
  }
};

struct SolverSettings {
  double k0 = 1e-2;       ///< initial trust-region damping
  double k_min = 1e-8;
  double k_max = 1e8;
  double k_up = 2.0;
  double k_down = 2.0;
  double gain_low = 0.25;
  double gain_high = 0.75;
  double eps = 1e-4;      ///< step size (max-norm) that counts as converged
  double eta0 = 10.0;     ///< L1 weight
  double mu0 = 100.0;     ///< AL weight
  double penalty_growth = 10.0;
  double penalty_max = 1e8;
  int max_outer = 100;
  int max_inner = 10;
  double clearance_tol = 1e-6;
  bool verbose = false;

  void validate() const {
    if (!(k0 > 0.0) || !(k_min > 0.0) || !(k_max >= k0)) throw InputError("solver settings: k must be positive");
    if (!(eps > 0.0)) throw InputError("solver settings: eps must be positive");
    if (!(eta0 > 0.0) || !(mu0 > 0.0)) throw InputError("solver settings: penalty weights must be positive");
    if (!(k_up > 1.0) || !(k_down > 1.0) || !(penalty_growth > 1.0)) {
      throw InputError("solver settings: growth factors must exceed 1");
    }
    if (max_outer < 1 || max_inner < 1) throw InputError("solver settings: iteration caps must be positive");
  }
};

// ---------------------------------------------------------------------------
// Smoothness

struct QuadraticTerm {
  double value = 0.0;
  VecX gradient;  ///< over vec(Q), timestep-major
  SpMat hessian;
};

inline void check_trajectory(const MatX& Q, std::size_t dof, std::size_t N) {
  if (static_cast<std::size_t>(Q.rows()) != dof || static_cast<std::size_t>(Q.cols()) != N) {
    throw InputError("trajectory must be " + std::to_string(dof) + " x " + std::to_string(N) + ", got " +
                     std::to_string(Q.rows()) + " x " + std::to_string(Q.cols()));
  }
  if (!Q.allFinite()) throw InputError("trajectory contains non-finite values");
}

/// 1/2 sum_i |q_{i-1} - 2 q_i + q_{i+1}|^2
inline QuadraticTerm smoothness_cost(const MatX& Q) {
  const Eigen::Index d = Q.rows(), N = Q.cols();
  if (N < 3) throw InputError("smoothness_cost: need at least 3 timesteps");
  QuadraticTerm out;
  out.gradient = VecX::Zero(d * N);
  std::vector<Triplet> trip;
  trip.reserve(static_cast<std::size_t>(9 * d * (N - 2)));
  const double c[3] = {1.0, -2.0, 1.0};
  for (Eigen::Index i = 1; i + 1 < N; ++i) {
    const VecX lap = Q.col(i - 1) - 2.0 * Q.col(i) + Q.col(i + 1);
    out.value += 0.5 * lap.squaredNorm();
    for (int a = 0; a < 3; ++a) {
      out.gradient.segment((i - 1 + a) * d, d) += c[a] * lap;
      for (int b = 0; b < 3; ++b) {
        for (Eigen::Index j = 0; j < d; ++j) trip.emplace_back((i - 1 + a) * d + j, (i - 1 + b) * d + j, c[a] * c[b]);
      }
    }
  }
  out.hessian.resize(d * N, d * N);
  out.hessian.setFromTriplets(trip.begin(), trip.end());
  return out;
}

// ---------------------------------------------------------------------------
// Transfer objective

/// Landing of the stream predicted at one timestep, with derivatives in q.
struct CurveTerm {
  bool valid = false;  ///< the curve reaches the target altitude
  double t = 0.0;
  double A = 0.0;
  Vec3 landing = Vec3::Zero();
  Vec3 residual = Vec3::Zero();  ///< landing - O_T
  VecX dA;                       ///< dA/dq
  MatX Jr;                       ///< d residual / dq, 3 x dof
  LeanAzimuth lean;
};

inline CurveTerm curve_term(const PlanningProblem& pb, const VecX& q, const FluidState& state) {
  const ChainPoses poses = forward_kinematics(pb.chain, q);
  const ChainJacobians jac = jacobians(pb.chain, q, &poses);
  const Pose& C = poses.container();
  CurveTerm out;
  out.lean = lean_azimuth(C);
  const double th = out.lean.theta, ph = out.lean.phi;
  const GeomSample g = pb.tables.lookup(th, state.vol);
  const QuadraticCurve curve = flight_curve(state, out.lean, C, pb.tables);
  const Vec3& OT = pb.world.target.center;
  const auto t = time_to_altitude(curve, OT);
  if (!t) return out;
  const double vz_land = curve.velocity(*t).z();
  if (std::abs(vz_land) < 1e-9) return out;  // grazing: flight time not differentiable
  out.valid = true;
  out.t = *t;
  out.A = g.A;
  out.landing = curve.at(*t);
  out.residual = out.landing - OT;

  const Mat3 Rz = rot_z(ph);
  Mat3 dRz;
  dRz << -std::sin(ph), -std::cos(ph), 0, std::cos(ph), -std::sin(ph), 0, 0, 0, 0;
  const Vec3 dir = outflow_direction_local(th);
  const Vec3 ddir = th > kHalfPi ? Vec3(std::cos(th), 0.0, -std::sin(th)) : Vec3::Zero();
  const VecX& dth = jac.dtheta_dq;
  const VecX& dph = jac.dphi_dq;
  const MatX dV = state.v_out * ((dRz * dir) * dph.transpose() + (Rz * ddir) * dth.transpose());
  const MatX dE = (dRz * g.e) * dph.transpose() + (Rz * g.de_dtheta) * dth.transpose() + jac.J.topRows(3);
  const RowVecX dt = -(dE.row(2) + out.t * dV.row(2)) / vz_land;
  out.Jr = dE + out.t * dV + curve.velocity(out.t) * dt;
  out.dA = g.dA_dtheta * dth;
  return out;
}

struct ObjectiveTerm {
  double value = 0.0;  ///< weighted transfer + weighted guide
  double transfer = 0.0;
  double guide = 0.0;
  VecX gradient;
  SpMat hessian;  ///< Gauss-Newton, block diagonal
};

/// sum_i A_i |C_i(t_i) - O_T|^2 + (theta_N - theta_final)^2, weighted, with P fixed.
inline ObjectiveTerm transfer_objective(const MatX& Q, std::span<const FluidState> P, const PlanningProblem& pb) {
  const std::size_t dof = pb.chain.dof(), N = static_cast<std::size_t>(Q.cols());
  check_trajectory(Q, dof, N);
  if (P.size() != N) throw InputError("transfer_objective: fluid trajectory length differs from Q");
  const auto d = static_cast<Eigen::Index>(dof);
  ObjectiveTerm out;
  out.gradient = VecX::Zero(d * static_cast<Eigen::Index>(N));
  std::vector<Triplet> trip;
  auto add_block = [&](std::size_t i, const MatX& B) {
    const auto o = static_cast<Eigen::Index>(i) * d;
    for (Eigen::Index r = 0; r < d; ++r)
      for (Eigen::Index c = 0; c < d; ++c)
        if (B(r, c) != 0.0) trip.emplace_back(o + r, o + c, B(r, c));
  };
  const double wt = pb.weights.transfer, wg = pb.weights.guide;
  for (std::size_t i = 0; i < N; ++i) {
    const CurveTerm ct = curve_term(pb, Q.col(static_cast<Eigen::Index>(i)), P[i]);
    if (!ct.valid) continue;
    const double r2 = ct.residual.squaredNorm();
    out.transfer += ct.A * r2;
    out.gradient.segment(static_cast<Eigen::Index>(i) * d, d) +=
        wt * (ct.dA * r2 + 2.0 * ct.A * ct.Jr.transpose() * ct.residual);
    if (ct.A > 0.0) add_block(i, 2.0 * wt * ct.A * ct.Jr.transpose() * ct.Jr);
  }
  {
    const VecX qN = Q.col(static_cast<Eigen::Index>(N - 1));
    const ChainPoses poses = forward_kinematics(pb.chain, qN);
    const ChainJacobians jac = jacobians(pb.chain, qN, &poses);
    const double err = lean_azimuth(poses.container()).theta - pb.theta_final;
    out.guide = err * err;
    out.gradient.segment(static_cast<Eigen::Index>(N - 1) * d, d) += wg * 2.0 * err * jac.dtheta_dq;
    add_block(N - 1, 2.0 * wg * jac.dtheta_dq * jac.dtheta_dq.transpose());
  }
  out.value = wt * out.transfer + wg * out.guide;
  out.hessian.resize(d * static_cast<Eigen::Index>(N), d * static_cast<Eigen::Index>(N));
  out.hessian.setFromTriplets(trip.begin(), trip.end());
  return out;
}

// ---------------------------------------------------------------------------
// Collision penalty

/// A contact frozen at detection time: the witness points ride on their
/// bodies and the normal stays fixed while Q moves.
struct CollisionConstraint {
  std::size_t step = 0;
  int body = -1;
  int obstacle = -1;    ///< >= 0 for an obstacle contact
  int other_body = -1;  ///< >= 0 for a self contact
  Vec3 a_local = Vec3::Zero();  ///< on `body`, in its frame
  Vec3 b_local = Vec3::Zero();  ///< on `other_body` in its frame, or a world point
  Vec3 n = Vec3::UnitZ();       ///< world, from b towards a
  double lambda = 0.0;

  auto key() const { return std::make_tuple(step, body, obstacle, other_body); }
};

struct ContactRow {
  double C = 0.0;  ///< separation along n minus the safety margin; >= 0 is satisfied
  VecX grad;       ///< dC/dq_step
};

inline ContactRow linearize(const CollisionConstraint& cc, const KinematicChain& chain, const ChainPoses& poses,
                            double safety_margin) {
  const Vec3 a = poses.bodies[static_cast<std::size_t>(cc.body)] * cc.a_local;
  MatX J = point_jacobian(chain, poses, cc.body, a);
  Vec3 b = cc.b_local;
  if (cc.other_body >= 0) {
    b = poses.bodies[static_cast<std::size_t>(cc.other_body)] * cc.b_local;
    J -= point_jacobian(chain, poses, cc.other_body, b);
  }
  return {cc.n.dot(a - b) - safety_margin, J.transpose() * cc.n};
}

struct PenaltyParams {
  double eta = 10.0;
  double mu = 100.0;
};

/// Penalty of one row at value C, minimised over its slack.
inline double penalty_value(PenaltyMode mode, double C, double lambda, const PenaltyParams& p) {
  if (mode == PenaltyMode::L1) return p.eta * std::max(0.0, -C);
  if (C >= lambda / (2.0 * p.mu)) return -lambda * lambda / (4.0 * p.mu);
  return p.mu * C * C - lambda * C;
}

inline double penalty_slope(PenaltyMode mode, double C, double lambda, const PenaltyParams& p) {
  if (mode == PenaltyMode::L1) return C < 0.0 ? -p.eta : 0.0;
  if (C >= lambda / (2.0 * p.mu)) return 0.0;
  return 2.0 * p.mu * C - lambda;
}

struct PenaltyTerm {
  double value = 0.0;
  double max_violation = 0.0;  ///< max(0, -C) over rows
  VecX gradient;               ///< over vec(Q)
  std::vector<ContactRow> rows;
};

inline PenaltyTerm collision_penalty(std::span<const CollisionConstraint> contacts, const MatX& Q,
                                     const PlanningProblem& pb, const PenaltyParams& params) {
  const auto d = static_cast<Eigen::Index>(pb.chain.dof());
  check_trajectory(Q, pb.chain.dof(), static_cast<std::size_t>(Q.cols()));
  PenaltyTerm out;
  out.gradient = VecX::Zero(Q.size());
  out.rows.reserve(contacts.size());
  std::size_t cached = std::numeric_limits<std::size_t>::max();
  ChainPoses poses;
  for (const auto& cc : contacts) {
    if (cc.step >= static_cast<std::size_t>(Q.cols())) throw InputError("collision_penalty: step out of range");
    if (cc.step != cached) {
      poses = forward_kinematics(pb.chain, Q.col(static_cast<Eigen::Index>(cc.step)));
      cached = cc.step;
    }
    ContactRow row = linearize(cc, pb.chain, poses, pb.safety_margin);
    out.value += penalty_value(pb.mode, row.C, cc.lambda, params);
    out.max_violation = std::max(out.max_violation, -row.C);
    out.gradient.segment(static_cast<Eigen::Index>(cc.step) * d, d) +=
        penalty_slope(pb.mode, row.C, cc.lambda, params) * row.grad;
    out.rows.push_back(std::move(row));
  }
  return out;
}

/// Contacts within the query margin at every timestep but the fixed first one.
inline std::vector<CollisionConstraint> detect_contacts(const PlanningProblem& pb, const MatX& Q) {
  std::vector<CollisionConstraint> out;
  const auto shapes = pb.chain.body_shapes();
  const double margin = pb.safety_margin + pb.query_margin;
  for (Eigen::Index i = 1; i < Q.cols(); ++i) {
    const ChainPoses poses = forward_kinematics(pb.chain, Q.col(i));
    const auto pcs = deepest_contacts(pb.world.obstacles, shapes, poses.bodies, margin, pb.chain.self_pairs);
    for (const auto& pc : pcs) {
      CollisionConstraint cc;
      cc.step = static_cast<std::size_t>(i);
      cc.body = pc.body;
      cc.obstacle = pc.obstacle;
      cc.other_body = pc.other_body;
      cc.n = pc.contact.n;
      cc.a_local = poses.bodies[static_cast<std::size_t>(pc.body)].inverse() * pc.contact.a;
      cc.b_local = pc.other_body >= 0 ? Vec3(poses.bodies[static_cast<std::size_t>(pc.other_body)].inverse() *
                                             pc.contact.b)
                                      : pc.contact.b;
      out.push_back(cc);
    }
  }
  return out;
}

/// Smallest separation over all timesteps and checked pairs; `horizon` when
/// nothing is closer than that.
inline double min_clearance(const PlanningProblem& pb, const MatX& Q, double horizon = 1.0,
                            std::size_t* worst_step = nullptr) {
  const auto shapes = pb.chain.body_shapes();
  double best = horizon;
  for (Eigen::Index i = 0; i < Q.cols(); ++i) {
    const ChainPoses poses = forward_kinematics(pb.chain, Q.col(i));
    for (const auto& pc : deepest_contacts(pb.world.obstacles, shapes, poses.bodies, horizon, pb.chain.self_pairs)) {
      if (-pc.contact.d < best) {
        best = -pc.contact.d;
        if (worst_step) *worst_step = static_cast<std::size_t>(i);
      }
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Trajectory helpers

inline std::vector<double> lean_angles(const PlanningProblem& pb, const MatX& Q) {
  std::vector<double> th(static_cast<std::size_t>(Q.cols()));
  for (Eigen::Index i = 0; i < Q.cols(); ++i) {
    th[static_cast<std::size_t>(i)] = lean_azimuth(forward_kinematics(pb.chain, Q.col(i)).container()).theta;
  }
  return th;
}

inline FluidTrajectory predict_fluid(const PlanningProblem& pb, const MatX& Q) {
  const auto th = lean_angles(pb, Q);
  return rollout(pb.initial, th, pb.dt(), pb.tables, pb.coeffs);
}

/// Fraction of the initial volume whose predicted stream falls through the
/// target opening.
inline double predicted_pour_fraction(const PlanningProblem& pb, const MatX& Q, std::span<const FluidState> P) {
  double caught = 0.0;
  for (std::size_t i = 1; i < P.size(); ++i) {
    const double dv = P[i - 1].vol - P[i].vol;
    if (dv <= 0.0) continue;
    const ChainPoses poses = forward_kinematics(pb.chain, Q.col(static_cast<Eigen::Index>(i)));
    const QuadraticCurve c = flight_curve(P[i], lean_azimuth(poses.container()), poses.container(), pb.tables);
    const auto t = time_to_altitude(c, pb.world.target.center);
    if (t && pb.world.target.catches(c.at(*t))) caught += dv;
  }
  return caught / pb.initial.vol;
}

/// Joint-space straight line from q_start to q_end over N timesteps.
inline MatX linear_trajectory(const VecX& q_start, const VecX& q_end, std::size_t N) {
  if (q_start.size() != q_end.size()) throw InputError("linear_trajectory: pose size mismatch");
  MatX Q(q_start.size(), static_cast<Eigen::Index>(N));
  for (std::size_t i = 0; i < N; ++i) {
    const double s = N > 1 ? static_cast<double>(i) / static_cast<double>(N - 1) : 0.0;
    Q.col(static_cast<Eigen::Index>(i)) = (1.0 - s) * q_start + s * q_end;
  }
  return Q;
}

struct LimitViolation {
  double joint = 0.0;     ///< worst excursion outside [lower, upper]
  double velocity = 0.0;  ///< worst |dq/dt| excess over the velocity limit
};

inline LimitViolation limit_violation(const PlanningProblem& pb, const MatX& Q) {
  LimitViolation v;
  const VecX lo = pb.chain.lower(), hi = pb.chain.upper(), vmax = pb.chain.max_velocity();
  for (Eigen::Index i = 0; i < Q.cols(); ++i) {
    v.joint = std::max({v.joint, (lo - Q.col(i)).maxCoeff(), (Q.col(i) - hi).maxCoeff()});
    if (i > 0) {
      const VecX rate = (Q.col(i) - Q.col(i - 1)).cwiseAbs() / pb.dt();
      v.velocity = std::max(v.velocity, (rate - vmax).maxCoeff());
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// Planner

struct PlanReport {
  bool converged = false;
  int outer_iterations = 0;
  int inner_iterations = 0;
  int qp_solves = 0;
  int rejected_steps = 0;
  double reg_cost = 0.0;
  double transfer_cost = 0.0;
  double guide_cost = 0.0;
  double penalty = 0.0;
  double min_clearance = 0.0;
  double joint_violation = 0.0;
  double velocity_violation = 0.0;
  double predicted_pour_fraction = 0.0;
  double final_volume = 0.0;
  double final_theta = 0.0;
  double k = 0.0, eta = 0.0, mu = 0.0;
  std::size_t speed_clamps = 0, volume_clamps = 0;
  Weights weights;
  PenaltyMode mode = PenaltyMode::AL;
  double seconds = 0.0;

  nlohmann::json to_json() const {
    return {{"converged", converged},
            {"outer_iterations", outer_iterations},
            {"inner_iterations", inner_iterations},
            {"qp_solves", qp_solves},
            {"rejected_steps", rejected_steps},
            {"costs", {{"reg", reg_cost}, {"transfer", transfer_cost}, {"guide", guide_cost}, {"penalty", penalty}}},
            {"weights", {{"transfer", weights.transfer}, {"guide", weights.guide}, {"reg", weights.reg}}},
            {"penalty_mode", to_string(mode)},
            {"min_clearance_m", min_clearance},
            {"joint_limit_violation", joint_violation},
            {"velocity_limit_violation", velocity_violation},
            {"predicted_pour_fraction", predicted_pour_fraction},
            {"final_volume_m3", final_volume},
            {"final_theta_deg", rad2deg(final_theta)},
            {"damping_k", k},
            {"eta", eta},
            {"mu", mu},
            {"speed_clamps", speed_clamps},
            {"volume_clamps", volume_clamps},
            {"seconds", seconds}};
  }

  std::string str() const {
    std::ostringstream s;
    s << (converged ? "converged" : "NOT converged") << " after " << outer_iterations << " outer / "
      << inner_iterations << " inner iterations (" << qp_solves << " QP solves, " << rejected_steps
      << " rejected)\n"
      << "costs: reg " << reg_cost << ", transfer " << transfer_cost << ", guide " << guide_cost << ", penalty "
      << penalty << "\n"
      << "weights: transfer " << weights.transfer << ", guide " << weights.guide << ", reg " << weights.reg
      << "; penalty " << to_string(mode) << "\n"
      << "min clearance " << min_clearance << " m; limit violations: joint " << joint_violation << ", velocity "
      << velocity_violation << "\n"
      << "predicted pour fraction " << predicted_pour_fraction << "; final volume " << final_volume
      << " m^3; final lean " << rad2deg(final_theta) << " deg\n";
    return s.str();
  }
};

struct PlanResult {
  MatX Q;
  FluidTrajectory P;
  PlanReport report;
};

namespace detail {

struct Merit {
  double reg = 0.0, objective = 0.0, penalty = 0.0;
  double total() const { return reg + objective + penalty; }
};

inline Merit evaluate_merit(const PlanningProblem& pb, const MatX& Q, std::span<const FluidState> P,
                            std::span<const CollisionConstraint> contacts, const PenaltyParams& pp) {
  Merit m;
  m.reg = pb.weights.reg * smoothness_cost(Q).value;
  m.objective = transfer_objective(Q, P, pb).value;
  m.penalty = collision_penalty(contacts, Q, pb, pp).value;
  return m;
}

/// Model of the merit at Q + delta, with the penalty evaluated on the linearized rows.
struct Model {
  VecX g;   ///< smooth gradient over the free timesteps
  SpMat H;  ///< smooth Hessian over the free timesteps
  std::vector<ContactRow> rows;
  double base_smooth = 0.0;

  double predicted(const VecX& delta, std::span<const CollisionConstraint> contacts, PenaltyMode mode,
                   const PenaltyParams& pp, Eigen::Index dof) const {
    double m = base_smooth + g.dot(delta) + 0.5 * delta.dot(H * delta);
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const auto o = static_cast<Eigen::Index>(contacts[j].step - 1) * dof;
      m += penalty_value(mode, rows[j].C + rows[j].grad.dot(delta.segment(o, dof)), contacts[j].lambda, pp);
    }
    return m;
  }
};

inline SpMat drop_first_block(const SpMat& H, Eigen::Index d) {
  const Eigen::Index n = H.rows() - d;
  std::vector<Triplet> trip;
  trip.reserve(static_cast<std::size_t>(H.nonZeros()));
  for (Eigen::Index c = 0; c < H.outerSize(); ++c)
    for (SpMat::InnerIterator it(H, c); it; ++it)
      if (it.row() >= d && it.col() >= d) trip.emplace_back(it.row() - d, it.col() - d, it.value());
  SpMat out(n, n);
  out.setFromTriplets(trip.begin(), trip.end());
  return out;
}

}  // namespace detail

/// Alternating trust-region SQP on Q with fluid re-prediction. q_1 (the
/// first column of Q0) is held fixed.
inline PlanResult plan(const PlanningProblem& pb, const SolverSettings& set, const MatX& Q0) {
  const auto start_clock = std::chrono::steady_clock::now();
  pb.validate();
  set.validate();
  const std::size_t N = pb.N;
  const auto d = static_cast<Eigen::Index>(pb.chain.dof());
  check_trajectory(Q0, pb.chain.dof(), N);
  {
    const LimitViolation lv = limit_violation(pb, Q0);
    if (lv.joint > 1e-9) throw InputError("plan: initial trajectory violates joint limits");
    if (lv.velocity > 1e-9) throw InputError("plan: initial trajectory violates velocity limits (increase tau)");
  }
  const Eigen::Index nf = d * static_cast<Eigen::Index>(N - 1);
  const VecX lo = pb.chain.lower(), hi = pb.chain.upper();
  const VecX vstep = pb.chain.max_velocity() * pb.dt();

  MatX Q = Q0;
  double k = set.k0;
  PenaltyParams pp{set.eta0, set.mu0};
  double prev_violation = std::numeric_limits<double>::infinity();
  std::map<std::tuple<std::size_t, int, int, int>, double> multipliers;
  PlanReport rep;
  rep.weights = pb.weights;
  rep.mode = pb.mode;

  MatX best_Q = Q;
  double best_clear = -std::numeric_limits<double>::infinity();
  double best_merit = std::numeric_limits<double>::infinity();

  for (int outer = 1; outer <= set.max_outer; ++outer) {
    rep.outer_iterations = outer;
    std::vector<CollisionConstraint> contacts = detect_contacts(pb, Q);
    for (auto& cc : contacts) {
      if (auto it = multipliers.find(cc.key()); it != multipliers.end()) cc.lambda = it->second;
    }
    const MatX Q_outer = Q;

    for (int inner = 1; inner <= set.max_inner; ++inner) {
      ++rep.inner_iterations;
      const FluidTrajectory P = predict_fluid(pb, Q);
      const QuadraticTerm reg = smoothness_cost(Q);
      const ObjectiveTerm obj = transfer_objective(Q, P.states, pb);
      const PenaltyTerm pen = collision_penalty(contacts, Q, pb, pp);

      detail::Model model;
      model.base_smooth = pb.weights.reg * reg.value + obj.value;
      model.g = (pb.weights.reg * reg.gradient + obj.gradient).tail(nf);
      model.H = detail::drop_first_block(SpMat(pb.weights.reg * reg.hessian + obj.hessian), d);
      model.rows = pen.rows;
      const double merit0 = model.base_smooth + pen.value;

      // QP in x = [delta; slack per contact row].
      const auto m = static_cast<Eigen::Index>(contacts.size());
      const Eigen::Index n = nf + m;
      bool inner_done = false;
      while (true) {
        QPProblem qp;
        std::vector<Triplet> H;
        for (Eigen::Index c = 0; c < model.H.outerSize(); ++c)
          for (SpMat::InnerIterator it(model.H, c); it; ++it) H.emplace_back(it.row(), it.col(), it.value());
        for (Eigen::Index r = 0; r < nf; ++r) H.emplace_back(r, r, k);
        qp.g = VecX::Zero(n);
        qp.g.head(nf) = model.g;
        qp.lb = VecX::Constant(n, -std::numeric_limits<double>::infinity());
        qp.ub = VecX::Constant(n, std::numeric_limits<double>::infinity());
        for (std::size_t i = 1; i < N; ++i) {
          const VecX q = Q.col(static_cast<Eigen::Index>(i));
          const auto o = static_cast<Eigen::Index>(i - 1) * d;
          qp.lb.segment(o, d) = (lo - q).cwiseMin(0.0);
          qp.ub.segment(o, d) = (hi - q).cwiseMax(0.0);
        }
        std::vector<Triplet> G;
        std::vector<double> h;
        auto add_row = [&](const std::vector<std::pair<Eigen::Index, double>>& coef, double rhs) {
          const auto r = static_cast<Eigen::Index>(h.size());
          for (const auto& [c, v] : coef) G.emplace_back(r, c, v);
          h.push_back(rhs);
        };
        for (std::size_t i = 1; i < N; ++i) {
          for (Eigen::Index j = 0; j < d; ++j) {
            const auto ci = static_cast<Eigen::Index>(i - 1) * d + j;
            const double diff = Q(j, static_cast<Eigen::Index>(i)) - Q(j, static_cast<Eigen::Index>(i - 1));
            const double bound = std::max(vstep(j), std::abs(diff));
            std::vector<std::pair<Eigen::Index, double>> up{{ci, 1.0}}, dn{{ci, -1.0}};
            if (i > 1) {
              up.emplace_back(ci - d, -1.0);
              dn.emplace_back(ci - d, 1.0);
            }
            add_row(up, bound - diff);
            add_row(dn, bound + diff);
          }
        }
        for (Eigen::Index j = 0; j < m; ++j) {
          const auto& cc = contacts[static_cast<std::size_t>(j)];
          const auto& row = model.rows[static_cast<std::size_t>(j)];
          const auto o = static_cast<Eigen::Index>(cc.step - 1) * d;
          const Eigen::Index s = nf + j;
          qp.lb(s) = 0.0;
          if (pb.mode == PenaltyMode::L1) {
            // t >= -(C + grad' delta)
            qp.g(s) = pp.eta;
            std::vector<std::pair<Eigen::Index, double>> coef{{s, -1.0}};
            for (Eigen::Index a = 0; a < d; ++a) coef.emplace_back(o + a, -row.grad(a));
            add_row(coef, row.C);
          } else {
            // mu (C + grad' delta - s)^2 - lambda (C + grad' delta - s)
            const double lin = 2.0 * pp.mu * row.C - cc.lambda;
            for (Eigen::Index a = 0; a < d; ++a) {
              qp.g(o + a) += lin * row.grad(a);
              for (Eigen::Index b = 0; b < d; ++b) H.emplace_back(o + a, o + b, 2.0 * pp.mu * row.grad(a) * row.grad(b));
              H.emplace_back(o + a, s, -2.0 * pp.mu * row.grad(a));
              H.emplace_back(s, o + a, -2.0 * pp.mu * row.grad(a));
            }
            H.emplace_back(s, s, 2.0 * pp.mu);
            qp.g(s) = -lin;
          }
        }
        qp.H.resize(n, n);
        qp.H.setFromTriplets(H.begin(), H.end());
        qp.G.resize(static_cast<Eigen::Index>(h.size()), n);
        qp.G.setFromTriplets(G.begin(), G.end());
        qp.h = Eigen::Map<const VecX>(h.data(), static_cast<Eigen::Index>(h.size()));

        VecX delta;
        ++rep.qp_solves;
        try {
          delta = solve_qp(qp, {1e-9, 200, true}).x.head(nf);
        } catch (const ComputeError&) {
          ++rep.rejected_steps;
          k = std::min(set.k_max, k * set.k_up);
          if (k >= set.k_max) {
            inner_done = true;
            break;
          }
          continue;
        }
        if (delta.cwiseAbs().maxCoeff() < set.eps) {
          inner_done = true;
          break;
        }
        MatX Qc = Q;
        for (std::size_t i = 1; i < N; ++i) {
          Qc.col(static_cast<Eigen::Index>(i)) += delta.segment(static_cast<Eigen::Index>(i - 1) * d, d);
        }
        const double pred = merit0 - model.predicted(delta, contacts, pb.mode, pp, d);
        const double actual = merit0 - detail::evaluate_merit(pb, Qc, P.states, contacts, pp).total();
        const double gain = pred > 0.0 ? actual / pred : -1.0;
        if (actual > 0.0 && gain > 0.0) {
          Q = Qc;
          if (gain > set.gain_high) k = std::max(set.k_min, k / set.k_down);
          else if (gain < set.gain_low) k = std::min(set.k_max, k * set.k_up);
          break;
        }
        ++rep.rejected_steps;
        if (k >= set.k_max) {
          inner_done = true;
          break;
        }
        k = std::min(set.k_max, k * set.k_up);
      }
      if (inner_done) break;
    }

    // Multiplier and penalty-weight updates on the frozen contact set.
    const PenaltyTerm pen = collision_penalty(contacts, Q, pb, pp);
    for (std::size_t j = 0; j < contacts.size(); ++j) {
      auto& cc = contacts[j];
      if (pb.mode == PenaltyMode::AL) cc.lambda = std::max(0.0, cc.lambda - 2.0 * pp.mu * pen.rows[j].C);
      multipliers[cc.key()] = cc.lambda;
    }
    const double violation = pen.max_violation;
    if (violation > 1e-9 && violation > 0.5 * prev_violation) {
      pp.eta = std::min(set.penalty_max, pp.eta * set.penalty_growth);
      pp.mu = std::min(set.penalty_max, pp.mu * set.penalty_growth);
    }
    prev_violation = violation;

    const double clear = min_clearance(pb, Q);
    const FluidTrajectory P = predict_fluid(pb, Q);
    const double merit =
        pb.weights.reg * smoothness_cost(Q).value + transfer_objective(Q, P.states, pb).value;
    const bool feasible = clear >= -set.clearance_tol;
    const bool best_feasible = best_clear >= -set.clearance_tol;
    if ((feasible && (!best_feasible || merit < best_merit)) || (!feasible && !best_feasible && clear > best_clear)) {
      best_Q = Q;
      best_clear = clear;
      best_merit = merit;
    }
    const double step = (Q - Q_outer).cwiseAbs().maxCoeff();
    if (set.verbose) {
      std::fprintf(stderr, "outer %d: step %.3g clearance %.4g merit %.6g k %.3g mu %.3g\n", outer, step, clear,
                   merit, k, pp.mu);
    }
    if (step < set.eps && feasible) {
      rep.converged = true;
      best_Q = Q;
      break;
    }
  }

  PlanResult res;
  res.Q = best_Q;
  res.P = predict_fluid(pb, res.Q);
  rep.reg_cost = smoothness_cost(res.Q).value;
  const ObjectiveTerm obj = transfer_objective(res.Q, res.P.states, pb);
  rep.transfer_cost = obj.transfer;
  rep.guide_cost = obj.guide;
  {
    auto contacts = detect_contacts(pb, res.Q);
    for (auto& cc : contacts) {
      if (auto it = multipliers.find(cc.key()); it != multipliers.end()) cc.lambda = it->second;
    }
    rep.penalty = collision_penalty(contacts, res.Q, pb, pp).value;
  }
  rep.min_clearance = min_clearance(pb, res.Q);
  const LimitViolation lv = limit_violation(pb, res.Q);
  rep.joint_violation = lv.joint;
  rep.velocity_violation = lv.velocity;
  rep.predicted_pour_fraction = predicted_pour_fraction(pb, res.Q, res.P.states);
  rep.final_volume = res.P.states.back().vol;
  rep.final_theta = lean_angles(pb, res.Q).back();
  rep.k = k;
  rep.eta = pp.eta;
  rep.mu = pp.mu;
  rep.speed_clamps = res.P.counters.speed_clamps;
  rep.volume_clamps = res.P.counters.volume_clamps;
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_clock).count();
  res.report = rep;
  return res;
}

// ---------------------------------------------------------------------------
// Trajectory files

/// Columns: t, q_0..q_{dof-1}, theta, phi, vol, v_out, landing_x/y/z (empty
/// when the stream never reaches the target altitude).
inline void save_trajectory_csv(const std::string& path, const PlanningProblem& pb, const MatX& Q,
                                std::span<const FluidState> P) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write trajectory: " + path);
  out.precision(17);
  out << "t[s]";
  for (std::size_t j = 0; j < pb.chain.dof(); ++j) out << ",q" << j << "[rad]";
  out << ",theta[rad],phi[rad],vol[m3],v_out[m/s],landing_x[m],landing_y[m],landing_z[m]\n";
  for (Eigen::Index i = 0; i < Q.cols(); ++i) {
    const ChainPoses poses = forward_kinematics(pb.chain, Q.col(i));
    const LeanAzimuth la = lean_azimuth(poses.container());
    const FluidState& s = P[static_cast<std::size_t>(i)];
    out << static_cast<double>(i) * pb.dt();
    for (Eigen::Index j = 0; j < Q.rows(); ++j) out << "," << Q(j, i);
    out << "," << la.theta << "," << la.phi << "," << s.vol << "," << s.v_out;
    const QuadraticCurve c = flight_curve(s, la, poses.container(), pb.tables);
    if (auto t = time_to_altitude(c, pb.world.target.center)) {
      const Vec3 p = c.at(*t);
      out << "," << p.x() << "," << p.y() << "," << p.z() << "\n";
    } else {
      out << ",,,\n";
    }
  }
  if (!out) throw InputError("failed writing trajectory: " + path);
}

struct TrajectoryFile {
  std::vector<double> t;
  MatX Q;
};

inline TrajectoryFile load_trajectory_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open trajectory: " + path);
  std::string line;
  if (!std::getline(in, line)) throw InputError("trajectory " + path + ": empty file");
  std::size_t dof = 0;
  {
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) {
      if (col.size() > 1 && col[0] == 'q') ++dof;
    }
  }
  if (dof == 0) throw InputError("trajectory " + path + ": no joint columns");
  TrajectoryFile tf;
  std::vector<VecX> cols;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    while (vals.size() < dof + 1 && std::getline(ss, cell, ',')) {
      try {
        vals.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw InputError("trajectory " + path + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    if (vals.size() != dof + 1) throw InputError("trajectory " + path + ":" + std::to_string(lineno) + ": short row");
    tf.t.push_back(vals[0]);
    cols.push_back(Eigen::Map<const VecX>(vals.data() + 1, static_cast<Eigen::Index>(dof)));
  }
  tf.Q.resize(static_cast<Eigen::Index>(dof), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) tf.Q.col(static_cast<Eigen::Index>(i)) = cols[i];
  return tf;
}

}  // namespace pourplan
