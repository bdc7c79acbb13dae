#pragma once

// Serial kinematic chain carrying the source container.
//
// Body indexing: 0 is the fixed base, body j+1 moves with joint j, and the
// last body (dof()+1) is the grasped container.

#include "pourplan/collision.hpp"
#include "pourplan/common.hpp"
#include "pourplan/fluid_model.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace pourplan {

enum class JointType { Revolute, Prismatic };

struct Joint {
  std::string name;
  JointType type = JointType::Revolute;
  Vec3 axis = Vec3::UnitZ();        ///< unit axis in the joint frame
  Pose offset = Pose::Identity();   ///< parent body frame to joint frame at q = 0
  double lower = -kPi, upper = kPi;
  double max_velocity = 1.0;        ///< rad/s or m/s
  std::vector<Shape> shapes;        ///< collision shapes of the body this joint moves
};

class KinematicChain {
 public:
  Pose base = Pose::Identity();
  std::vector<Shape> base_shapes;
  std::vector<Joint> joints;
  Pose grasp = Pose::Identity();  ///< last body frame to container frame
  std::vector<Shape> container_shapes;
  std::vector<std::pair<int, int>> self_pairs;

  std::size_t dof() const { return joints.size(); }
  std::size_t n_bodies() const { return joints.size() + 2; }
  int container_body() const { return static_cast<int>(joints.size()) + 1; }

  std::vector<std::vector<Shape>> body_shapes() const {
    std::vector<std::vector<Shape>> out;
    out.push_back(base_shapes);
    for (const Joint& j : joints) out.push_back(j.shapes);
    out.push_back(container_shapes);
    return out;
  }

  VecX lower() const {
    VecX v(static_cast<Eigen::Index>(dof()));
    for (std::size_t i = 0; i < dof(); ++i) v(static_cast<Eigen::Index>(i)) = joints[i].lower;
    return v;
  }
  VecX upper() const {
    VecX v(static_cast<Eigen::Index>(dof()));
    for (std::size_t i = 0; i < dof(); ++i) v(static_cast<Eigen::Index>(i)) = joints[i].upper;
    return v;
  }
  VecX max_velocity() const {
    VecX v(static_cast<Eigen::Index>(dof()));
    for (std::size_t i = 0; i < dof(); ++i) v(static_cast<Eigen::Index>(i)) = joints[i].max_velocity;
    return v;
  }

  bool within_limits(const VecX& q, double tol = 0.0) const {
    for (std::size_t i = 0; i < dof(); ++i) {
      const double v = q(static_cast<Eigen::Index>(i));
      if (v < joints[i].lower - tol || v > joints[i].upper + tol) return false;
    }
    return true;
  }

  void validate() const {
    if (joints.empty()) throw InputError("robot: chain has no joints");
    for (const Joint& j : joints) {
      if (!(j.lower < j.upper)) throw InputError("robot: joint '" + j.name + "' has an empty limit interval");
      if (!(j.max_velocity > 0)) throw InputError("robot: joint '" + j.name + "' needs a positive velocity limit");
      if (std::abs(j.axis.norm() - 1.0) > 1e-9) throw InputError("robot: joint '" + j.name + "' axis not unit");
      for (const Shape& s : j.shapes) s.validate();
    }
    for (const Shape& s : base_shapes) s.validate();
    for (const Shape& s : container_shapes) s.validate();
    for (const auto& [a, b] : self_pairs) {
      if (a < 0 || b < 0 || a >= static_cast<int>(n_bodies()) || b >= static_cast<int>(n_bodies()) || a == b) {
        throw InputError("robot: bad self-collision pair");
      }
    }
  }
};

/// World poses of every body.
struct ChainPoses {
  std::vector<Pose> bodies;
  /// Joint frames (before the joint motion), one per joint.
  std::vector<Pose> joint_frames;

  const Pose& container() const { return bodies.back(); }
};

inline ChainPoses forward_kinematics(const KinematicChain& chain, const VecX& q) {
  if (static_cast<std::size_t>(q.size()) != chain.dof()) {
    throw InputError("forward_kinematics: expected " + std::to_string(chain.dof()) + " joint values, got " +
                     std::to_string(q.size()));
  }
  ChainPoses out;
  out.bodies.reserve(chain.n_bodies());
  out.joint_frames.reserve(chain.dof());
  Pose T = chain.base;
  out.bodies.push_back(T);
  for (std::size_t i = 0; i < chain.dof(); ++i) {
    const Joint& j = chain.joints[i];
    T = T * j.offset;
    out.joint_frames.push_back(T);
    const double v = q(static_cast<Eigen::Index>(i));
    if (j.type == JointType::Revolute) {
      T.rotate(Eigen::AngleAxisd(v, j.axis));
    } else {
      T.translate(v * j.axis);
    }
    out.bodies.push_back(T);
  }
  out.bodies.push_back(T * chain.grasp);
  return out;
}

/// Leaning angle and tilt azimuth of the container axis (local z).
inline LeanAzimuth lean_azimuth(const Pose& container) {
  const Vec3 a = container.linear().col(2);
  const double rho = std::hypot(a.x(), a.y());
  LeanAzimuth l;
  l.theta = std::atan2(rho, a.z());
  l.phi = rho < 1e-12 ? 0.0 : std::atan2(a.y(), a.x());
  if (l.phi <= -kPi) l.phi += 2 * kPi;
  return l;
}

/// Linear-velocity Jacobian (3 x dof) of a world point rigidly attached to `body`.
inline MatX point_jacobian(const KinematicChain& chain, const ChainPoses& poses, int body, const Vec3& point) {
  MatX J = MatX::Zero(3, static_cast<Eigen::Index>(chain.dof()));
  const int moving = std::min(body, static_cast<int>(chain.dof()));
  for (int i = 0; i < moving; ++i) {
    const Joint& j = chain.joints[static_cast<std::size_t>(i)];
    const Pose& F = poses.joint_frames[static_cast<std::size_t>(i)];
    const Vec3 w = F.linear() * j.axis;
    J.col(i) = j.type == JointType::Revolute ? Vec3(w.cross(point - F.translation())) : w;
  }
  return J;
}

/// Angular-velocity Jacobian (3 x dof) of `body`.
inline MatX angular_jacobian(const KinematicChain& chain, const ChainPoses& poses, int body) {
  MatX J = MatX::Zero(3, static_cast<Eigen::Index>(chain.dof()));
  const int moving = std::min(body, static_cast<int>(chain.dof()));
  for (int i = 0; i < moving; ++i) {
    const Joint& j = chain.joints[static_cast<std::size_t>(i)];
    if (j.type == JointType::Revolute) J.col(i) = poses.joint_frames[static_cast<std::size_t>(i)].linear() * j.axis;
  }
  return J;
}

struct ChainJacobians {
  MatX J;          ///< 6 x dof geometric Jacobian at the container origin (linear rows first)
  VecX dtheta_dq;
  VecX dphi_dq;
  bool phi_degenerate = false;  ///< container axis vertical: azimuth undefined
};

inline ChainJacobians jacobians(const KinematicChain& chain, const VecX& q, const ChainPoses* pre = nullptr) {
  const ChainPoses local = pre ? ChainPoses{} : forward_kinematics(chain, q);
  const ChainPoses& poses = pre ? *pre : local;
  const int cb = chain.container_body();
  const Pose& C = poses.container();
  ChainJacobians out;
  const auto n = static_cast<Eigen::Index>(chain.dof());
  out.J.resize(6, n);
  out.J.topRows(3) = point_jacobian(chain, poses, cb, C.translation());
  out.J.bottomRows(3) = angular_jacobian(chain, poses, cb);
  // The axis a moves as da = w x a.
  const Vec3 a = C.linear().col(2);
  MatX da(3, n);
  for (Eigen::Index i = 0; i < n; ++i) da.col(i) = Vec3(out.J.block<3, 1>(3, i)).cross(a);
  const double rho2 = a.x() * a.x() + a.y() * a.y();
  const double rho = std::sqrt(rho2);
  out.dtheta_dq.resize(n);
  out.dphi_dq.resize(n);
  if (rho < 1e-9) {
    // theta = atan2(rho, az) with rho ~ |ax| along the phi = 0 convention.
    out.phi_degenerate = true;
    out.dtheta_dq = da.row(0).transpose() * (a.z() >= 0 ? 1.0 : -1.0);
    out.dphi_dq.setZero();
    return out;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const double drho = (a.x() * da(0, i) + a.y() * da(1, i)) / rho;
    out.dtheta_dq(i) = (a.z() * drho - rho * da(2, i)) / (rho2 + a.z() * a.z());
    out.dphi_dq(i) = (a.x() * da(1, i) - a.y() * da(0, i)) / rho2;
  }
  return out;
}

/// Rotation that leans the container by theta towards azimuth phi.
inline Mat3 lean_rotation(double theta, double phi) { return rot_z(phi) * rot_y(theta); }

struct IkResult {
  VecX q;
  double position_error = 0.0;
  double rotation_error = 0.0;
  bool converged = false;
};

/// Damped least-squares inverse kinematics for a full container pose, with
/// joint limits enforced by clamping.
inline IkResult solve_ik(const KinematicChain& chain, const VecX& q0, const Pose& target, int max_iter = 500,
                         double tol = 1e-9) {
  IkResult r;
  r.q = q0;
  const VecX lo = chain.lower(), hi = chain.upper();
  double lambda = 1e-3;
  auto error = [&](const VecX& q) {
    const Pose C = forward_kinematics(chain, q).container();
    Eigen::Matrix<double, 6, 1> e;
    e.head<3>() = target.translation() - C.translation();
    const Eigen::AngleAxisd aa(target.linear() * C.linear().transpose());
    e.tail<3>() = aa.angle() * aa.axis();
    return e;
  };
  auto e = error(r.q);
  for (int it = 0; it < max_iter && e.norm() > tol; ++it) {
    const auto jac = jacobians(chain, r.q);
    const MatX& J = jac.J;
    const MatX JJt = J * J.transpose() + lambda * MatX::Identity(6, 6);
    const VecX step = J.transpose() * JJt.ldlt().solve(e);
    const VecX cand = (r.q + step).cwiseMax(lo).cwiseMin(hi);
    const auto ec = error(cand);
    if (ec.norm() < e.norm()) {
      r.q = cand;
      e = ec;
      lambda = std::max(1e-9, lambda * 0.3);
    } else {
      lambda *= 10.0;
      if (lambda > 1e6) break;
    }
  }
  r.position_error = e.head<3>().norm();
  r.rotation_error = e.tail<3>().norm();
  r.converged = e.norm() <= std::max(tol, 1e-7);
  return r;
}

// ---------------------------------------------------------------------------
// Config files

namespace detail {

inline Vec3 json_vec3(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw InputError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

/// {"xyz": [..], "rpy": [..]} with R = Rz(yaw) Ry(pitch) Rx(roll).
inline Pose json_pose(const nlohmann::json& j) {
  Pose p = Pose::Identity();
  if (j.is_null()) return p;
  if (j.contains("xyz")) p.translation() = json_vec3(j.at("xyz"));
  if (j.contains("rpy")) {
    const Vec3 r = json_vec3(j.at("rpy"));
    p.linear() = (Eigen::AngleAxisd(r.z(), Vec3::UnitZ()) * Eigen::AngleAxisd(r.y(), Vec3::UnitY()) *
                  Eigen::AngleAxisd(r.x(), Vec3::UnitX()))
                     .toRotationMatrix();
  }
  return p;
}

inline nlohmann::json pose_json(const Pose& p) {
  const Vec3 t = p.translation();
  const Mat3 R = p.linear();
  // Inverse of Rz Ry Rx.
  const double pitch = std::asin(std::clamp(-R(2, 0), -1.0, 1.0));
  const double roll = std::atan2(R(2, 1), R(2, 2));
  const double yaw = std::atan2(R(1, 0), R(0, 0));
  return {{"xyz", {t.x(), t.y(), t.z()}}, {"rpy", {roll, pitch, yaw}}};
}

}  // namespace detail

inline Shape load_shape(const nlohmann::json& j) {
  const std::string type = j.at("type").get<std::string>();
  Shape s;
  if (type == "sphere") {
    s = Shape{Sphere{j.at("radius").get<double>()}, detail::json_pose(j.value("pose", nlohmann::json()))};
  } else if (type == "capsule") {
    s = Shape{Capsule{detail::json_vec3(j.at("p0")), detail::json_vec3(j.at("p1")), j.at("radius").get<double>()},
              detail::json_pose(j.value("pose", nlohmann::json()))};
  } else if (type == "box") {
    s = Shape{Box{detail::json_vec3(j.at("half_extents"))}, detail::json_pose(j.value("pose", nlohmann::json()))};
  } else {
    throw InputError("unknown shape type '" + type + "'");
  }
  s.validate();
  return s;
}

inline nlohmann::json shape_json(const Shape& s) {
  nlohmann::json j = std::visit(
      [](const auto& g) -> nlohmann::json {
        using T = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<T, Sphere>) {
          return {{"type", "sphere"}, {"radius", g.radius}};
        } else if constexpr (std::is_same_v<T, Capsule>) {
          return {{"type", "capsule"},
                  {"radius", g.radius},
                  {"p0", {g.p0.x(), g.p0.y(), g.p0.z()}},
                  {"p1", {g.p1.x(), g.p1.y(), g.p1.z()}}};
        } else {
          return {{"type", "box"}, {"half_extents", {g.half_extents.x(), g.half_extents.y(), g.half_extents.z()}}};
        }
      },
      s.geom);
  j["pose"] = detail::pose_json(s.local);
  return j;
}

inline std::vector<std::pair<int, int>> nonadjacent_pairs(const KinematicChain& chain) {
  std::vector<std::pair<int, int>> out;
  const auto shapes = chain.body_shapes();
  const int n = static_cast<int>(chain.n_bodies());
  for (int i = 0; i < n; ++i) {
    for (int j = i + 2; j < n; ++j) {
      if (!shapes[static_cast<std::size_t>(i)].empty() && !shapes[static_cast<std::size_t>(j)].empty()) {
        out.emplace_back(i, j);
      }
    }
  }
  return out;
}

inline KinematicChain load_chain(const nlohmann::json& j) {
  try {
    KinematicChain c;
    c.base = detail::json_pose(j.value("base", nlohmann::json()));
    for (const auto& s : j.value("base_shapes", nlohmann::json::array())) c.base_shapes.push_back(load_shape(s));
    for (const auto& jj : j.at("joints")) {
      Joint joint;
      joint.name = jj.value("name", "joint" + std::to_string(c.joints.size()));
      const std::string type = jj.value("type", std::string("revolute"));
      if (type == "revolute") {
        joint.type = JointType::Revolute;
      } else if (type == "prismatic") {
        joint.type = JointType::Prismatic;
      } else {
        throw InputError("robot: unknown joint type '" + type + "'");
      }
      joint.axis = detail::json_vec3(jj.at("axis"));
      if (joint.axis.norm() <= 0) throw InputError("robot: zero joint axis");
      joint.axis.normalize();
      joint.offset = detail::json_pose(jj.value("offset", nlohmann::json()));
      const auto lim = jj.at("limits");
      joint.lower = lim.at(0).get<double>();
      joint.upper = lim.at(1).get<double>();
      joint.max_velocity = jj.at("max_velocity").get<double>();
      for (const auto& s : jj.value("shapes", nlohmann::json::array())) joint.shapes.push_back(load_shape(s));
      c.joints.push_back(std::move(joint));
    }
    c.grasp = detail::json_pose(j.value("grasp", nlohmann::json()));
    for (const auto& s : j.value("container_shapes", nlohmann::json::array())) {
      c.container_shapes.push_back(load_shape(s));
    }
    const auto sc = j.value("self_collision", nlohmann::json("nonadjacent"));
    if (sc.is_string()) {
      if (sc.get<std::string>() == "nonadjacent") {
        c.self_pairs = nonadjacent_pairs(c);
      } else if (sc.get<std::string>() != "none") {
        throw InputError("robot: self_collision must be 'nonadjacent', 'none' or a pair list");
      }
    } else {
      for (const auto& p : sc) c.self_pairs.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
    }
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("robot config: ") + e.what());
  }
}

inline KinematicChain load_chain_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open robot config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("robot config " + path + ": " + e.what());
  }
  return load_chain(j);
}

}  // namespace pourplan
