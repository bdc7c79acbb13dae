#pragma once

// Ground-truth liquid simulator: 2D FLIP/PIC on a staggered grid in the world
// x-z plane. The source container is a moving solid; static obstacles are
// rotated rectangles. Also holds the post-processing that turns particle
// frames into training samples and pour quality.

#include "pourplan/container_geom.hpp"
#include "pourplan/fluid_model.hpp"
#include "pourplan/polygon.hpp"
#include "pourplan/world.hpp"

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace pourplan::sim {

/// Container origin in the x-z plane and its signed lean (positive tips
/// the opening towards +x).
struct PlanarPose {
  double x = 0.0, z = 0.0, theta = 0.0;
};

inline Vec2 to_world(const PlanarPose& p, const Vec2& local) { return Vec2(p.x, p.z) + tilt2(p.theta, local); }
inline Vec2 to_local(const PlanarPose& p, const Vec2& world) { return untilt2(p.theta, world - Vec2(p.x, p.z)); }

/// In-plane pose of a 3D container frame (azimuth folded into the sign of theta).
inline PlanarPose planar_pose(const Pose& container) {
  const Vec3 a = container.linear().col(2);
  return {container.translation().x(), container.translation().z(), std::atan2(a.x(), a.z())};
}

struct MotionKey {
  double t = 0.0;
  PlanarPose pose;
};

/// Piecewise-linear pose schedule, held constant outside its time range.
class Motion {
 public:
  Motion() = default;
  explicit Motion(std::vector<MotionKey> keys) : keys_(std::move(keys)) {
    if (keys_.empty()) throw InputError("motion: no keys");
    for (std::size_t i = 0; i < keys_.size(); ++i) {
      const auto& k = keys_[i];
      if (!std::isfinite(k.t) || !std::isfinite(k.pose.x) || !std::isfinite(k.pose.z) || !std::isfinite(k.pose.theta)) {
        throw InputError("motion: non-finite key " + std::to_string(i));
      }
      if (i > 0 && !(k.t > keys_[i - 1].t)) throw InputError("motion: times must increase (key " + std::to_string(i) + ")");
    }
  }

  const std::vector<MotionKey>& keys() const { return keys_; }
  double start() const { return keys_.front().t; }
  double end() const { return keys_.back().t; }

  PlanarPose at(double t) const {
    if (t <= keys_.front().t) return keys_.front().pose;
    if (t >= keys_.back().t) return keys_.back().pose;
    const auto it = std::upper_bound(keys_.begin(), keys_.end(), t, [](double v, const MotionKey& k) { return v < k.t; });
    const MotionKey& b = *it;
    const MotionKey& a = *(it - 1);
    const double s = (t - a.t) / (b.t - a.t);
    return {a.pose.x + s * (b.pose.x - a.pose.x), a.pose.z + s * (b.pose.z - a.pose.z),
            a.pose.theta + s * (b.pose.theta - a.pose.theta)};
  }

 private:
  std::vector<MotionKey> keys_;
};

inline void save_motion_csv(const std::string& path, const Motion& m) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write motion: " + path);
  out.precision(17);
  out << "t[s],x[m],z[m],theta[rad]\n";
  for (const auto& k : m.keys()) out << k.t << "," << k.pose.x << "," << k.pose.z << "," << k.pose.theta << "\n";
}

inline Motion load_motion_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open motion: " + path);
  std::string line;
  std::getline(in, line);
  std::vector<MotionKey> keys;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::array<double, 4> v{};
    std::size_t pos = 0;
    for (int c = 0; c < 4; ++c) {
      const std::size_t next = line.find(',', pos);
      const std::string cell = line.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
      try {
        v[static_cast<std::size_t>(c)] = std::stod(cell);
      } catch (const std::exception&) {
        throw InputError("motion " + path + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
      if (next == std::string::npos && c < 3) {
        throw InputError("motion " + path + ":" + std::to_string(lineno) + ": expected 4 columns");
      }
      pos = next + 1;
    }
    keys.push_back({v[0], {v[1], v[2], v[3]}});
  }
  return Motion(std::move(keys));
}

/// Rotates the container about its profile centroid, held at `pivot`, from
/// upright to `theta_max` with a smooth ramp.
struct PourSpec {
  double theta_max = deg2rad(120.0);
  double ramp_time = 3.0;
  double hold_before = 0.2;
  double hold_after = 0.5;
  Vec2 pivot = Vec2::Zero();
};

inline Motion pour_motion(const ContainerProfile& prof, const PourSpec& spec, double key_dt = 0.01) {
  require(spec.ramp_time > 0 && spec.hold_before >= 0 && spec.hold_after >= 0, "pour motion: bad timing");
  const Vec2 c = poly::centroid(prof.vertices());
  const double total = spec.hold_before + spec.ramp_time + spec.hold_after;
  std::vector<MotionKey> keys;
  const auto n = static_cast<std::size_t>(std::ceil(total / key_dt));
  for (std::size_t i = 0; i <= n; ++i) {
    const double t = std::min(total, static_cast<double>(i) * key_dt);
    const double s = std::clamp((t - spec.hold_before) / spec.ramp_time, 0.0, 1.0);
    const double th = spec.theta_max * s * s * (3.0 - 2.0 * s);
    const Vec2 o = spec.pivot - tilt2(th, c);
    keys.push_back({t, {o.x(), o.y(), th}});
    if (t >= total) break;
  }
  return Motion(std::move(keys));
}

/// Rotated rectangle in the x-z plane.
struct ObstacleRect {
  Vec2 center = Vec2::Zero();
  Vec2 half = Vec2::Zero();
  double angle = 0.0;  ///< same sense as a container lean

  Vec2 local(const Vec2& p) const { return untilt2(angle, p - center); }
  bool inside(const Vec2& p) const {
    const Vec2 l = local(p);
    return std::abs(l.x()) < half.x() && std::abs(l.y()) < half.y();
  }
};

/// Slices the box obstacles of a world at y = 0. Boxes must only be rotated
/// about the y axis.
inline std::vector<ObstacleRect> obstacle_rects(const World& w) {
  std::vector<ObstacleRect> out;
  for (const auto& o : w.obstacles) {
    const auto* b = std::get_if<Box>(&o.shape.geom);
    if (!b) throw InputError("oracle: obstacle '" + o.name + "' must be a box");
    const Mat3 R = o.shape.local.linear();
    if (std::abs(R(1, 1) - 1.0) > 1e-9) throw InputError("oracle: obstacle '" + o.name + "' is not upright in y");
    const Vec3 c = o.shape.local.translation();
    if (std::abs(c.y()) >= b->half_extents.y()) continue;
    out.push_back({{c.x(), c.z()}, {b->half_extents.x(), b->half_extents.z()}, std::atan2(R(0, 2), R(0, 0))});
  }
  return out;
}

struct SimConfig {
  double cell = 0.0025;  ///< m
  Vec2 domain_min{-0.08, 0.0};
  int nx = 64, nz = 64;
  double dt = 0.002;        ///< largest step, s
  double frame_dt = 0.01;   ///< s between stored frames
  double duration = 3.0;    ///< s
  double viscosity = 0.001; ///< dynamic, Pa s
  double density = 1000.0;
  double gravity = kGravity;
  double fill = 0.8;        ///< initial fraction of the container area
  double flip = 0.95;       ///< FLIP share of the particle update
  double cfl = 1.0;         ///< cells per substep
  double wall_thickness = 0.0;  ///< 0 means two cells
  /// Particles outside the source and target below this height stop moving.
  double freeze_height = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 0;
  int max_substeps_per_frame = 500;
  std::vector<ObstacleRect> obstacles;
  std::vector<Vec2> target_region;

  Vec2 domain_max() const { return domain_min + cell * Vec2(nx, nz); }
  double wall() const { return wall_thickness > 0 ? wall_thickness : 2.0 * cell; }
  double freeze_z() const { return std::isnan(freeze_height) ? domain_min.y() + 2.0 * cell : freeze_height; }

  void validate() const {
    require(cell > 0 && nx >= 4 && nz >= 4, "sim config: bad grid");
    require(dt > 0 && frame_dt > 0 && duration > 0, "sim config: times must be positive");
    require(viscosity >= 0 && density > 0 && gravity >= 0, "sim config: bad material");
    require(fill > 0 && fill < 1, "sim config: fill must be in (0, 1)");
    require(flip >= 0 && flip <= 1, "sim config: flip ratio must be in [0, 1]");
    require(cfl > 0 && cfl <= 1.0, "sim config: cfl must be in (0, 1]");
    require(max_substeps_per_frame >= 1, "sim config: substep cap must be positive");
    require(viscosity / density * dt / (cell * cell) <= 0.25, "sim config: explicit viscosity unstable at this dt");
  }

  nlohmann::json to_json() const {
    nlohmann::json obs = nlohmann::json::array();
    for (const auto& o : obstacles) {
      obs.push_back({{"center", {o.center.x(), o.center.y()}}, {"half", {o.half.x(), o.half.y()}}, {"angle", o.angle}});
    }
    nlohmann::json region = nlohmann::json::array();
    for (const auto& v : target_region) region.push_back({v.x(), v.y()});
    return {{"cell", cell},
            {"domain_min", {domain_min.x(), domain_min.y()}},
            {"nx", nx},
            {"nz", nz},
            {"dt", dt},
            {"frame_dt", frame_dt},
            {"duration", duration},
            {"viscosity", viscosity},
            {"density", density},
            {"gravity", gravity},
            {"fill", fill},
            {"flip", flip},
            {"cfl", cfl},
            {"wall_thickness", wall()},
            {"freeze_height", freeze_z()},
            {"seed", seed},
            {"max_substeps_per_frame", max_substeps_per_frame},
            {"obstacles", obs},
            {"target_region", region}};
  }

  /// Missing keys keep the values already in `base`.
  static SimConfig from_json(const nlohmann::json& j, SimConfig base) {
    try {
      SimConfig c = std::move(base);
      c.cell = j.value("cell", c.cell);
      if (j.contains("domain_min")) c.domain_min = {j["domain_min"].at(0).get<double>(), j["domain_min"].at(1).get<double>()};
      c.nx = j.value("nx", c.nx);
      c.nz = j.value("nz", c.nz);
      c.dt = j.value("dt", c.dt);
      c.frame_dt = j.value("frame_dt", c.frame_dt);
      c.duration = j.value("duration", c.duration);
      c.viscosity = j.value("viscosity", c.viscosity);
      c.density = j.value("density", c.density);
      c.gravity = j.value("gravity", c.gravity);
      c.fill = j.value("fill", c.fill);
      c.flip = j.value("flip", c.flip);
      c.cfl = j.value("cfl", c.cfl);
      c.wall_thickness = j.value("wall_thickness", c.wall_thickness);
      c.freeze_height = j.value("freeze_height", c.freeze_height);
      c.seed = j.value("seed", c.seed);
      c.max_substeps_per_frame = j.value("max_substeps_per_frame", c.max_substeps_per_frame);
      if (j.contains("obstacles")) {
        c.obstacles.clear();
        for (const auto& o : j["obstacles"]) {
          c.obstacles.push_back({{o.at("center").at(0).get<double>(), o.at("center").at(1).get<double>()},
                                 {o.at("half").at(0).get<double>(), o.at("half").at(1).get<double>()},
                                 o.value("angle", 0.0)});
        }
      }
      if (j.contains("target_region")) {
        c.target_region.clear();
        for (const auto& v : j["target_region"]) c.target_region.emplace_back(v.at(0).get<double>(), v.at(1).get<double>());
      }
      return c;
    } catch (const nlohmann::json::exception& e) {
      throw InputError(std::string("sim config: ") + e.what());
    }
  }
  static SimConfig from_json(const nlohmann::json& j) { return from_json(j, SimConfig{}); }
};

enum Stage : std::uint8_t { kSource = 0, kFree = 1, kTarget = 2 };

struct ParticleSet {
  double t = 0.0;
  PlanarPose pose;
  std::vector<Vec2> pos;
  std::vector<Vec2> vel;
  std::vector<std::uint8_t> stage;
};

struct SimStats {
  std::size_t substeps = 0;
  std::size_t advection_splits = 0;  ///< substeps whose advection was split to respect the CFL bound
  int max_pressure_iterations = 0;
  double seconds = 0.0;  ///< wall time; not stored in frame files
};

struct SimRun {
  SimConfig config;
  std::string container_id;
  std::vector<Vec2> profile;  ///< container interior, local
  Vec2 lip = Vec2::Zero();
  double particle_volume = 0.0;  ///< m^3 per particle (planar slab of the profile width)
  std::vector<ParticleSet> frames;
  SimStats stats;
};

// ---------------------------------------------------------------------------
// Container as a moving solid

/// The wall is a band of the given thickness just outside the profile,
/// topped flat at the opening height.
class ContainerSolid {
 public:
  ContainerSolid(const ContainerProfile& prof, double thickness)
      : interior_(prof.vertices()), t_(thickness), top_(prof.opening_height()) {
    const std::size_t n = interior_.size();
    const std::size_t l = prof.lip_index();
    // The opening edge joins the lip to its mirror; the wall is everything else.
    const bool next_is_mirror = (interior_[(l + 1) % n] - prof.lip_mirror()).norm() < 1e-9;
    const std::size_t first = next_is_mirror ? (l + 1) % n : l;
    for (std::size_t k = 0; k < n; ++k) walls_.push_back(interior_[(first + k) % n]);
    for (const Vec2& v : interior_) reach_ = std::max(reach_, v.norm());
    reach_ += t_;
  }

  bool interior(const Vec2& local) const { return poly::contains(interior_, local); }
  double reach() const { return reach_; }
  const std::vector<Vec2>& walls() const { return walls_; }

  /// Closest point on the wall polyline.
  Vec2 closest(const Vec2& local) const {
    Vec2 best = walls_.front();
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + 1 < walls_.size(); ++i) {
      const Vec2 c = poly::closest_on_segment(walls_[i], walls_[i + 1], local);
      const double d = (c - local).squaredNorm();
      if (d < bd) {
        bd = d;
        best = c;
      }
    }
    return best;
  }

  bool in_wall(const Vec2& local) const {
    if (local.y() > top_ || interior(local)) return false;
    return (closest(local) - local).norm() < t_;
  }

  /// Moves a point out of the wall. Points that were inside the container go
  /// back inside; others leave by the nearer of the outer face and the top.
  /// Returns the push direction (local).
  Vec2 push_out(Vec2& local, bool from_inside, double eps) const {
    const Vec2 c = closest(local);
    Vec2 out = local - c;
    const double d = out.norm();
    out = d > 1e-14 ? Vec2(out / d) : outward_normal_at(c);
    if (from_inside) {
      local = c - eps * out;
      return -out;
    }
    const double up = top_ - local.y() + eps;
    if (up < t_ - d + eps) {
      local.y() = top_ + eps;
      return Vec2(0.0, 1.0);
    }
    local = c + (t_ + eps) * out;
    return out;
  }

 private:
  Vec2 outward_normal_at(const Vec2& c) const {
    for (std::size_t i = 0; i + 1 < walls_.size(); ++i) {
      const Vec2 e = walls_[i + 1] - walls_[i];
      if ((poly::closest_on_segment(walls_[i], walls_[i + 1], c) - c).norm() < 1e-12 && e.norm() > 0) {
        return Vec2(e.y(), -e.x()).normalized();
      }
    }
    return Vec2(0.0, -1.0);
  }

  std::vector<Vec2> interior_;
  std::vector<Vec2> walls_;
  double t_ = 0.0;
  double top_ = 0.0;
  double reach_ = 0.0;
};

/// Height below which the profile holds `fraction` of its area.
inline double fill_level(const ContainerProfile& prof, double fraction) {
  const double target = fraction * prof.area();
  double lo = prof.bottom(), hi = prof.bottom() + prof.height();
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    const auto part = poly::clip_below(prof.vertices(), mid);
    const double a = part.size() >= 3 ? poly::signed_area(part) : 0.0;
    (a < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// ---------------------------------------------------------------------------
// Simulator

class Simulator {
 public:
  Simulator(const ContainerProfile& prof, Motion motion, SimConfig cfg)
      : cfg_(std::move(cfg)), motion_(std::move(motion)), solid_(prof, cfg_.wall()), h_(cfg_.cell) {
    cfg_.validate();
    nx_ = cfg_.nx;
    nz_ = cfg_.nz;
    u_.assign(static_cast<std::size_t>((nx_ + 1) * nz_), 0.0);
    w_.assign(static_cast<std::size_t>(nx_ * (nz_ + 1)), 0.0);
    cell_.assign(static_cast<std::size_t>(nx_ * nz_), kAir);
    static_solid_.assign(cell_.size(), 0);
    for (int j = 0; j < nz_; ++j) {
      for (int i = 0; i < nx_; ++i) {
        const Vec2 c = center(i, j);
        for (const auto& o : cfg_.obstacles) {
          if (o.inside(c)) static_solid_[idx(i, j)] = 1;
        }
      }
    }
    run_.config = cfg_;
    run_.container_id = prof.id();
    run_.profile = prof.vertices();
    run_.lip = prof.lip();
    seed_particles(prof);
  }

  SimRun run() {
    const auto t0 = std::chrono::steady_clock::now();
    record();
    const auto n_frames = static_cast<std::size_t>(std::llround(cfg_.duration / cfg_.frame_dt));
    for (std::size_t f = 1; f <= n_frames; ++f) {
      const double t_frame = static_cast<double>(f) * cfg_.frame_dt + motion_.start();
      int substeps = 0;
      while (t_ < t_frame - 1e-12) {
        if (++substeps > cfg_.max_substeps_per_frame) {
          throw ComputeError("oracle: more than " + std::to_string(cfg_.max_substeps_per_frame) +
                             " substeps in frame " + std::to_string(f) + " (t = " + std::to_string(t_) +
                             " s); flow too fast for the grid");
        }
        // Equal pieces up to the frame time, so no sliver steps.
        const double left = t_frame - t_;
        substep(left / std::ceil(left / stable_dt() - 1e-9));
      }
      t_ = t_frame;
      record();
    }
    run_.stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return std::move(run_);
  }

 private:
  enum CellType : std::uint8_t { kAir = 0, kFluid = 1, kSolid = 2 };
  static constexpr double kRestDensity = 4.0;  // particles per cell at seeding
  static constexpr double kDensityGain = 0.5;

  std::size_t idx(int i, int j) const { return static_cast<std::size_t>(i + nx_ * j); }
  std::size_t uidx(int i, int j) const { return static_cast<std::size_t>(i + (nx_ + 1) * j); }
  std::size_t widx(int i, int j) const { return static_cast<std::size_t>(i + nx_ * j); }
  Vec2 center(int i, int j) const { return cfg_.domain_min + h_ * Vec2(i + 0.5, j + 0.5); }

  void seed_particles(const ContainerProfile& prof) {
    const PlanarPose p0 = motion_.at(motion_.start());
    t_ = motion_.start();
    const double level = fill_level(prof, cfg_.fill);
    std::mt19937_64 rng(cfg_.seed);
    std::uniform_real_distribution<double> jitter(-0.2, 0.2);
    // 2 x 2 jittered particles per cell of a local lattice aligned with the container.
    const double q = 0.5 * h_;
    const double xmin = -0.5 * prof.width();
    for (double z = prof.bottom() + 0.5 * q; z < level; z += q) {
      for (double x = xmin + 0.5 * q; x < -xmin; x += q) {
        const Vec2 l(x + jitter(rng) * q, std::min(level - 1e-9, z + jitter(rng) * q));
        if (!solid_.interior(l) || (solid_.closest(l) - l).norm() < 0.1 * q) continue;
        pos_.push_back(to_world(p0, l));
        vel_.emplace_back(0.0, 0.0);
        stage_.push_back(kSource);
        inside_.push_back(1);
        frozen_.push_back(0);
      }
    }
    if (pos_.empty()) throw InputError("oracle: fill produced no particles; refine the grid");
    const auto in_domain = [&](const Vec2& p) {
      return (p.array() > cfg_.domain_min.array()).all() && (p.array() < cfg_.domain_max().array()).all();
    };
    for (const Vec2& p : pos_) {
      if (!in_domain(p)) throw InputError("oracle: initial fill lies outside the simulation domain");
    }
    run_.particle_volume = cfg_.fill * prof.area() * prof.slab_depth() / static_cast<double>(pos_.size());
  }

  void record() {
    ParticleSet s;
    s.t = t_;
    s.pose = motion_.at(t_);
    s.pos = pos_;
    s.vel = vel_;
    s.stage = stage_;
    run_.frames.push_back(std::move(s));
  }

  double stable_dt() const {
    double vmax = 0.0;
    for (std::size_t p = 0; p < pos_.size(); ++p) {
      if (!frozen_[p]) vmax = std::max(vmax, vel_[p].norm());
    }
    const PlanarPose a = motion_.at(t_), b = motion_.at(t_ + cfg_.dt);
    const double solid = (std::hypot(b.x - a.x, b.z - a.z) + std::abs(b.theta - a.theta) * solid_.reach()) / cfg_.dt;
    const double lim = cfg_.cfl * h_;
    return std::min(cfg_.dt, lim / (vmax + solid + std::sqrt(cfg_.gravity * lim) + 1e-12));
  }

  // Rigid velocity of the container at world point p over the current step.
  Vec2 solid_velocity(const Vec2& p) const {
    const Vec2 r = p - Vec2(pose0_.x, pose0_.z);
    return Vec2(rate_[0], rate_[1]) + rate_[2] * Vec2(r.y(), -r.x());
  }

  // Bilinear sample of a face field with sample points at (i + ox, j + oz) * h.
  double sample(const std::vector<double>& f, int ni, int nj, double ox, double oz, const Vec2& p) const {
    const double fx = (p.x() - cfg_.domain_min.x()) / h_ - ox;
    const double fz = (p.y() - cfg_.domain_min.y()) / h_ - oz;
    const int i0 = std::clamp(static_cast<int>(std::floor(fx)), 0, ni - 2);
    const int j0 = std::clamp(static_cast<int>(std::floor(fz)), 0, nj - 2);
    const double sx = std::clamp(fx - i0, 0.0, 1.0), sz = std::clamp(fz - j0, 0.0, 1.0);
    auto at = [&](int i, int j) { return f[static_cast<std::size_t>(i + ni * j)]; };
    return (1 - sx) * (1 - sz) * at(i0, j0) + sx * (1 - sz) * at(i0 + 1, j0) + (1 - sx) * sz * at(i0, j0 + 1) +
           sx * sz * at(i0 + 1, j0 + 1);
  }
  Vec2 velocity_at(const std::vector<double>& u, const std::vector<double>& w, const Vec2& p) const {
    return {sample(u, nx_ + 1, nz_, 0.0, 0.5, p), sample(w, nx_, nz_ + 1, 0.5, 0.0, p)};
  }

  void splat(std::vector<double>& f, std::vector<double>& wt, int ni, int nj, double ox, double oz, const Vec2& p,
             double v) const {
    const double fx = (p.x() - cfg_.domain_min.x()) / h_ - ox;
    const double fz = (p.y() - cfg_.domain_min.y()) / h_ - oz;
    const int i0 = std::clamp(static_cast<int>(std::floor(fx)), 0, ni - 2);
    const int j0 = std::clamp(static_cast<int>(std::floor(fz)), 0, nj - 2);
    const double sx = std::clamp(fx - i0, 0.0, 1.0), sz = std::clamp(fz - j0, 0.0, 1.0);
    const double ws[4] = {(1 - sx) * (1 - sz), sx * (1 - sz), (1 - sx) * sz, sx * sz};
    const int di[4] = {0, 1, 0, 1}, dj[4] = {0, 0, 1, 1};
    for (int k = 0; k < 4; ++k) {
      const auto id = static_cast<std::size_t>(i0 + di[k] + ni * (j0 + dj[k]));
      f[id] += ws[k] * v;
      wt[id] += ws[k];
    }
  }

  bool solid_cell(int i, int j) const {
    if (i < 0 || j < 0 || i >= nx_ || j >= nz_) return true;
    return cell_[idx(i, j)] == kSolid;
  }
  bool air_cell(int i, int j) const { return !solid_cell(i, j) && cell_[idx(i, j)] == kAir; }
  bool fluid_cell(int i, int j) const {
    if (i < 0 || j < 0 || i >= nx_ || j >= nz_) return false;
    return cell_[idx(i, j)] == kFluid;
  }

  // Velocity of the solid bounding face between two cells (0 for static solids).
  double solid_face_velocity(int ia, int ja, int ib, int jb, const Vec2& face, int comp) const {
    auto container = [&](int i, int j) {
      return i >= 0 && j >= 0 && i < nx_ && j < nz_ && container_solid_[idx(i, j)];
    };
    if (container(ia, ja) || container(ib, jb)) return solid_velocity(face)(comp);
    return 0.0;
  }

  void classify_cells() {
    container_solid_.assign(cell_.size(), 0);
    const Vec2 o(pose0_.x, pose0_.z);
    const double reach = solid_.reach() + h_;
    for (int j = 0; j < nz_; ++j) {
      for (int i = 0; i < nx_; ++i) {
        const Vec2 c = center(i, j);
        bool s = static_solid_[idx(i, j)] != 0;
        if ((c - o).norm() < reach && solid_.in_wall(to_local(pose0_, c))) {
          container_solid_[idx(i, j)] = 1;
          s = true;
        }
        cell_[idx(i, j)] = s ? kSolid : kAir;
      }
    }
    density_.assign(cell_.size(), 0.0);
    std::vector<double> dw(cell_.size(), 0.0);
    for (std::size_t p = 0; p < pos_.size(); ++p) {
      if (!frozen_[p]) splat(density_, dw, nx_, nz_, 0.5, 0.5, pos_[p], 1.0);
    }
    density_.swap(dw);
    for (std::size_t p = 0; p < pos_.size(); ++p) {
      if (frozen_[p]) continue;
      const int i = static_cast<int>(std::floor((pos_[p].x() - cfg_.domain_min.x()) / h_));
      const int j = static_cast<int>(std::floor((pos_[p].y() - cfg_.domain_min.y()) / h_));
      if (i < 0 || j < 0 || i >= nx_ || j >= nz_) continue;
      if (cell_[idx(i, j)] == kAir) cell_[idx(i, j)] = kFluid;
    }
    close_bubbles();
  }

  // Small air pockets enclosed by liquid act as zero-pressure holes that the
  // projection fills violently; treat them as liquid so they collapse. Large
  // enclosed regions, such as a vessel under a falling sheet, stay air.
  void close_bubbles() {
    static constexpr std::size_t kMaxBubbleCells = 16;
    std::vector<std::uint8_t> seen(cell_.size(), 0);
    std::vector<int> stack, comp;
    for (std::size_t start = 0; start < cell_.size(); ++start) {
      if (cell_[start] != kAir || seen[start]) continue;
      stack.assign(1, static_cast<int>(start));
      comp.clear();
      seen[start] = 1;
      bool edge = false;
      while (!stack.empty()) {
        const int c = stack.back();
        stack.pop_back();
        comp.push_back(c);
        const int i = c % nx_, j = c / nx_;
        edge = edge || i == 0 || j == 0 || i == nx_ - 1 || j == nz_ - 1;
        const int nb[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
        for (const auto& n : nb) {
          if (n[0] < 0 || n[1] < 0 || n[0] >= nx_ || n[1] >= nz_) continue;
          const std::size_t k = idx(n[0], n[1]);
          if (cell_[k] == kAir && !seen[k]) {
            seen[k] = 1;
            stack.push_back(static_cast<int>(k));
          }
        }
      }
      if (!edge && comp.size() <= kMaxBubbleCells) {
        for (int c : comp) cell_[static_cast<std::size_t>(c)] = kFluid;
      }
    }
  }

  void particles_to_grid() {
    std::fill(u_.begin(), u_.end(), 0.0);
    std::fill(w_.begin(), w_.end(), 0.0);
    std::vector<double> uw(u_.size(), 0.0), ww(w_.size(), 0.0);
    for (std::size_t p = 0; p < pos_.size(); ++p) {
      if (frozen_[p]) continue;
      splat(u_, uw, nx_ + 1, nz_, 0.0, 0.5, pos_[p], vel_[p].x());
      splat(w_, ww, nx_, nz_ + 1, 0.5, 0.0, pos_[p], vel_[p].y());
    }
    uvalid_.assign(u_.size(), 0);
    wvalid_.assign(w_.size(), 0);
    for (std::size_t k = 0; k < u_.size(); ++k) {
      if (uw[k] > 0) {
        u_[k] /= uw[k];
        uvalid_[k] = 1;
      }
    }
    for (std::size_t k = 0; k < w_.size(); ++k) {
      if (ww[k] > 0) {
        w_[k] /= ww[k];
        wvalid_[k] = 1;
      }
    }
  }

  static void extrapolate(std::vector<double>& f, std::vector<std::uint8_t> valid, int ni, int nj, int layers) {
    for (int l = 0; l < layers; ++l) {
      std::vector<std::uint8_t> next = valid;
      for (int j = 0; j < nj; ++j) {
        for (int i = 0; i < ni; ++i) {
          const auto k = static_cast<std::size_t>(i + ni * j);
          if (valid[k]) continue;
          double sum = 0.0;
          int cnt = 0;
          const int di[4] = {-1, 1, 0, 0}, dj[4] = {0, 0, -1, 1};
          for (int n = 0; n < 4; ++n) {
            const int a = i + di[n], b = j + dj[n];
            if (a < 0 || b < 0 || a >= ni || b >= nj) continue;
            const auto kn = static_cast<std::size_t>(a + ni * b);
            if (valid[kn]) {
              sum += f[kn];
              ++cnt;
            }
          }
          if (cnt) {
            f[k] = sum / cnt;
            next[k] = 1;
          }
        }
      }
      valid.swap(next);
    }
    for (std::size_t k = 0; k < f.size(); ++k) {
      if (!valid[k]) f[k] = 0.0;
    }
  }

  void enforce_solid_faces() {
    for (int j = 0; j < nz_; ++j) {
      for (int i = 0; i <= nx_; ++i) {
        if (solid_cell(i - 1, j) || solid_cell(i, j)) {
          const Vec2 face = cfg_.domain_min + h_ * Vec2(i, j + 0.5);
          u_[uidx(i, j)] = (i == 0 || i == nx_) ? 0.0 : solid_face_velocity(i - 1, j, i, j, face, 0);
        }
      }
    }
    for (int j = 0; j <= nz_; ++j) {
      for (int i = 0; i < nx_; ++i) {
        if (solid_cell(i, j - 1) || solid_cell(i, j)) {
          const Vec2 face = cfg_.domain_min + h_ * Vec2(i + 0.5, j);
          w_[widx(i, j)] = (j == 0 || j == nz_) ? 0.0 : solid_face_velocity(i, j - 1, i, j, face, 1);
        }
      }
    }
  }

  void apply_viscosity(double dt) {
    const double nu = cfg_.viscosity / cfg_.density;
    if (nu <= 0.0) return;
    const double k = nu * dt / (h_ * h_);
    auto diffuse = [&](std::vector<double>& f, int ni, int nj) {
      const std::vector<double> g = f;
      for (int j = 1; j + 1 < nj; ++j) {
        for (int i = 1; i + 1 < ni; ++i) {
          const auto c = static_cast<std::size_t>(i + ni * j);
          f[c] += k * (g[c - 1] + g[c + 1] + g[c - static_cast<std::size_t>(ni)] + g[c + static_cast<std::size_t>(ni)] -
                       4.0 * g[c]);
        }
      }
    };
    diffuse(u_, nx_ + 1, nz_);
    diffuse(w_, nx_, nz_ + 1);
  }

  void project(double dt) {
    std::vector<int> index(cell_.size(), -1);
    int n = 0;
    for (std::size_t c = 0; c < cell_.size(); ++c) {
      if (cell_[c] == kFluid) index[c] = n++;
    }
    if (n == 0) return;
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(5 * n));
    VecX rhs(n);
    for (int j = 0; j < nz_; ++j) {
      for (int i = 0; i < nx_; ++i) {
        const int r = index[idx(i, j)];
        if (r < 0) continue;
        double div = u_[uidx(i + 1, j)] - u_[uidx(i, j)] + w_[widx(i, j + 1)] - w_[widx(i, j)];
        // Spread overfull cells back towards the seeding density.
        double excess = std::clamp(density_[idx(i, j)] / kRestDensity - 1.0, -0.5, 0.5);
        bool enclosed = true;
        for (int k = 0; k < 4; ++k) enclosed = enclosed && !air_cell(i + (k == 0) - (k == 1), j + (k == 2) - (k == 3));
        if (!enclosed) excess = std::max(excess, 0.0);
        div -= kDensityGain * excess * h_ / cfg_.dt;
        rhs(r) = -div * h_;
        double diag = 1e-10;
        const int di[4] = {-1, 1, 0, 0}, dj[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int a = i + di[k], b = j + dj[k];
          if (solid_cell(a, b)) continue;
          diag += 1.0;
          if (fluid_cell(a, b)) trip.emplace_back(r, index[idx(a, b)], -1.0);
        }
        trip.emplace_back(r, r, diag);
      }
    }
    Eigen::SparseMatrix<double> A(n, n);
    A.setFromTriplets(trip.begin(), trip.end());
    Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper, Eigen::IncompleteCholesky<double>> cg;
    cg.setTolerance(1e-9);
    cg.setMaxIterations(1000);
    cg.compute(A);
    const VecX p = cg.solve(rhs);
    run_.stats.max_pressure_iterations = std::max(run_.stats.max_pressure_iterations, static_cast<int>(cg.iterations()));
    if (!p.allFinite()) throw ComputeError("oracle: pressure solve diverged at t = " + std::to_string(t_));
    // p here is pressure * dt / (density * h); the face update is a plain difference.
    auto pr = [&](int i, int j) {
      if (i < 0 || j < 0 || i >= nx_ || j >= nz_) return 0.0;
      const int r = index[idx(i, j)];
      return r >= 0 ? p(r) : 0.0;
    };
    for (int j = 0; j < nz_; ++j) {
      for (int i = 1; i < nx_; ++i) {
        if (solid_cell(i - 1, j) || solid_cell(i, j)) continue;
        if (!fluid_cell(i - 1, j) && !fluid_cell(i, j)) continue;
        u_[uidx(i, j)] -= (pr(i, j) - pr(i - 1, j)) / h_;
      }
    }
    for (int j = 1; j < nz_; ++j) {
      for (int i = 0; i < nx_; ++i) {
        if (solid_cell(i, j - 1) || solid_cell(i, j)) continue;
        if (!fluid_cell(i, j - 1) && !fluid_cell(i, j)) continue;
        w_[widx(i, j)] -= (pr(i, j) - pr(i, j - 1)) / h_;
      }
    }
  }

  void mark_valid_after_projection() {
    uvalid_.assign(u_.size(), 0);
    wvalid_.assign(w_.size(), 0);
    for (int j = 0; j < nz_; ++j)
      for (int i = 0; i <= nx_; ++i)
        if (fluid_cell(i - 1, j) || fluid_cell(i, j)) uvalid_[uidx(i, j)] = 1;
    for (int j = 0; j <= nz_; ++j)
      for (int i = 0; i < nx_; ++i)
        if (fluid_cell(i, j - 1) || fluid_cell(i, j)) wvalid_[widx(i, j)] = 1;
  }

  void collide(std::size_t p) {
    const double eps = 0.05 * h_;
    Vec2& x = pos_[p];
    Vec2& v = vel_[p];
    const Vec2 o(pose1_.x, pose1_.z);
    if ((x - o).norm() < solid_.reach() + h_) {
      Vec2 l = to_local(pose1_, x);
      if (solid_.in_wall(l)) {
        const Vec2 nl = solid_.push_out(l, inside_[p] != 0, eps);
        x = to_world(pose1_, l);
        const Vec2 n = tilt2(pose1_.theta, nl);
        const Vec2 r = x - o;
        const Vec2 vs = Vec2(rate_[0], rate_[1]) + rate_[2] * Vec2(r.y(), -r.x());
        const double vn = (v - vs).dot(n);
        if (vn < 0) v -= vn * n;
      }
    }
    for (const auto& ob : cfg_.obstacles) {
      if (!ob.inside(x)) continue;
      const Vec2 l = ob.local(x);
      const double dx = ob.half.x() - std::abs(l.x()), dz = ob.half.y() - std::abs(l.y());
      Vec2 nl = dx < dz ? Vec2(l.x() >= 0 ? 1.0 : -1.0, 0.0) : Vec2(0.0, l.y() >= 0 ? 1.0 : -1.0);
      const Vec2 lp = dx < dz ? Vec2(nl.x() * (ob.half.x() + eps), l.y()) : Vec2(l.x(), nl.y() * (ob.half.y() + eps));
      x = ob.center + tilt2(ob.angle, lp);
      const Vec2 n = tilt2(ob.angle, nl);
      const double vn = v.dot(n);
      if (vn < 0) v -= vn * n;
    }
    const Vec2 lo = cfg_.domain_min + Vec2::Constant(eps), hi = cfg_.domain_max() - Vec2::Constant(eps);
    for (int a = 0; a < 2; ++a) {
      if (x(a) < lo(a)) {
        x(a) = lo(a);
        v(a) = std::max(v(a), 0.0);
      } else if (x(a) > hi(a)) {
        x(a) = hi(a);
        v(a) = std::min(v(a), 0.0);
      }
    }
  }

  void substep(double dt) {
    pose0_ = motion_.at(t_);
    pose1_ = motion_.at(t_ + dt);
    rate_ = {(pose1_.x - pose0_.x) / dt, (pose1_.z - pose0_.z) / dt, (pose1_.theta - pose0_.theta) / dt};

    classify_cells();
    particles_to_grid();
    extrapolate(u_, uvalid_, nx_ + 1, nz_, 2);
    extrapolate(w_, wvalid_, nx_, nz_ + 1, 2);
    enforce_solid_faces();
    const std::vector<double> u_old = u_, w_old = w_;

    for (auto& v : w_) v -= cfg_.gravity * dt;
    apply_viscosity(dt);
    enforce_solid_faces();
    project(dt);
    mark_valid_after_projection();
    extrapolate(u_, uvalid_, nx_ + 1, nz_, 4);
    extrapolate(w_, wvalid_, nx_, nz_ + 1, 4);
    enforce_solid_faces();

    double umax = 0.0;
    for (double v : u_) umax = std::max(umax, std::abs(v));
    for (double v : w_) umax = std::max(umax, std::abs(v));
    int pieces = 1;
    if (umax * dt > cfg_.cfl * h_) {
      pieces = static_cast<int>(std::ceil(umax * dt / (cfg_.cfl * h_)));
      ++run_.stats.advection_splits;
      if (pieces > 16) {
        throw ComputeError("oracle: CFL violated by " + std::to_string(pieces) + "x at t = " + std::to_string(t_) +
                           " s even after splitting (max grid speed " + std::to_string(umax) + " m/s)");
      }
    }
    const double sub = dt / pieces;
    const bool have_target = cfg_.target_region.size() >= 3;
    const double freeze_z = cfg_.freeze_z();
    for (std::size_t p = 0; p < pos_.size(); ++p) {
      if (frozen_[p]) continue;
      const Vec2 pic = velocity_at(u_, w_, pos_[p]);
      const Vec2 old = velocity_at(u_old, w_old, pos_[p]);
      vel_[p] = cfg_.flip * (vel_[p] + pic - old) + (1.0 - cfg_.flip) * pic;
      Vec2 x = pos_[p];
      for (int k = 0; k < pieces; ++k) {
        const Vec2 mid = x + 0.5 * sub * velocity_at(u_, w_, x);
        x += sub * velocity_at(u_, w_, mid);
      }
      pos_[p] = x;
      collide(p);
      const bool inside = solid_.interior(to_local(pose1_, pos_[p]));
      if (inside_[p] && !inside && stage_[p] == kSource) stage_[p] = kFree;
      inside_[p] = inside ? 1 : 0;
      const bool in_target = have_target && poly::contains(cfg_.target_region, pos_[p]);
      if (in_target) stage_[p] = kTarget;
      if (!inside && !in_target && pos_[p].y() < freeze_z) {
        frozen_[p] = 1;
        vel_[p].setZero();
      }
    }
    t_ += dt;
    ++run_.stats.substeps;
  }

  SimConfig cfg_;
  Motion motion_;
  ContainerSolid solid_;
  double h_;
  int nx_ = 0, nz_ = 0;
  double t_ = 0.0;
  PlanarPose pose0_, pose1_;
  std::array<double, 3> rate_{};
  std::vector<double> u_, w_;
  std::vector<std::uint8_t> uvalid_, wvalid_;
  std::vector<std::uint8_t> cell_, static_solid_, container_solid_;
  std::vector<double> density_;  // tent-weighted particle count per cell
  std::vector<Vec2> pos_, vel_;
  std::vector<std::uint8_t> stage_, inside_, frozen_;
  SimRun run_;
};

inline SimRun simulate_pour(const ContainerProfile& prof, const Motion& motion, const SimConfig& cfg) {
  return Simulator(prof, motion, cfg).run();
}

// ---------------------------------------------------------------------------
// Post-processing

inline bool inside_container(const SimRun& run, const ParticleSet& f, std::size_t p) {
  return poly::contains(run.profile, to_local(f.pose, f.pos[p]));
}

inline double kinetic_energy(const SimRun& run, const ParticleSet& f) {
  const double m = run.particle_volume * run.config.density;
  double e = 0.0;
  for (const Vec2& v : f.vel) e += 0.5 * m * v.squaredNorm();
  return e;
}

struct DensitySample {
  double density = 0.0;  ///< mean tent-weighted particles per cell
  std::size_t cells = 0;
};

/// Particle density over grid cells whose 3 x 3 neighbourhood is all occupied,
/// counting only liquid held in the container. Compression or expansion by the
/// pressure solve shows up as a change in this density.
inline DensitySample interior_density(const SimRun& run, const ParticleSet& f) {
  const auto& c = run.config;
  const auto n = static_cast<std::size_t>(c.nx * c.nz);
  std::vector<double> weight(n, 0.0);
  std::vector<int> count(n, 0);
  auto cell = [&](int i, int j) { return static_cast<std::size_t>(i + c.nx * j); };
  for (std::size_t k = 0; k < f.pos.size(); ++k) {
    if (!inside_container(run, f, k)) continue;
    const Vec2 g = (f.pos[k] - c.domain_min) / c.cell;
    const int i = static_cast<int>(std::floor(g.x())), j = static_cast<int>(std::floor(g.y()));
    if (i >= 0 && j >= 0 && i < c.nx && j < c.nz) ++count[cell(i, j)];
    const double fx = g.x() - 0.5, fz = g.y() - 0.5;
    const int i0 = static_cast<int>(std::floor(fx)), j0 = static_cast<int>(std::floor(fz));
    const double sx = fx - i0, sz = fz - j0;
    for (int b = 0; b < 2; ++b) {
      for (int a = 0; a < 2; ++a) {
        const int ii = i0 + a, jj = j0 + b;
        if (ii < 0 || jj < 0 || ii >= c.nx || jj >= c.nz) continue;
        weight[cell(ii, jj)] += (a ? sx : 1 - sx) * (b ? sz : 1 - sz);
      }
    }
  }
  DensitySample out;
  double sum = 0.0;
  for (int j = 1; j + 1 < c.nz; ++j) {
    for (int i = 1; i + 1 < c.nx; ++i) {
      bool full = true;
      for (int b = -1; b <= 1 && full; ++b)
        for (int a = -1; a <= 1 && full; ++a) full = count[cell(i + a, j + b)] > 0;
      if (!full) continue;
      sum += weight[cell(i, j)];
      ++out.cells;
    }
  }
  out.density = out.cells ? sum / static_cast<double>(out.cells) : 0.0;
  return out;
}

/// Largest relative change of interior_density against the first frame, over
/// frames that keep at least `min_share` of the initial interior cells.
inline double volume_drift(const SimRun& run, double min_share = 0.25) {
  if (run.frames.empty()) throw InputError("volume drift: no frames");
  const DensitySample d0 = interior_density(run, run.frames.front());
  if (d0.cells == 0) throw InputError("volume drift: first frame has no interior cells");
  double worst = 0.0;
  for (const auto& f : run.frames) {
    const DensitySample d = interior_density(run, f);
    if (static_cast<double>(d.cells) < min_share * static_cast<double>(d0.cells)) continue;
    worst = std::max(worst, std::abs(d.density / d0.density - 1.0));
  }
  return worst;
}

/// Fraction of all particles whose position in the frame lies in `region`.
inline double quality(const ParticleSet& f, std::span<const Vec2> region) {
  if (f.pos.empty()) return 0.0;
  std::size_t in = 0;
  for (const Vec2& p : f.pos) in += poly::contains(region, p) ? 1 : 0;
  return static_cast<double>(in) / static_cast<double>(f.pos.size());
}

/// Head of the free surface over the pouring lip: a cubic (linear with few
/// columns) through the highest contained particle of each grid column,
/// evaluated at the lip. Returns {dh, used_linear_fit}.
inline std::pair<double, bool> surface_head(const SimRun& run, const ParticleSet& f) {
  const double h = run.config.cell;
  std::map<long, double> top;
  for (std::size_t p = 0; p < f.pos.size(); ++p) {
    if (!inside_container(run, f, p)) continue;
    const long col = std::lround(std::floor(f.pos[p].x() / h));
    auto [it, fresh] = top.try_emplace(col, f.pos[p].y());
    if (!fresh) it->second = std::max(it->second, f.pos[p].y());
  }
  const Vec2 lip_local = f.pose.theta >= 0 ? run.lip : Vec2(-run.lip.x(), run.lip.y());
  const Vec2 lip = to_world(f.pose, lip_local);
  if (top.size() < 2) return {0.0, true};
  const bool linear = top.size() < 4;
  const int deg = linear ? 1 : 3;
  const double x0 = lip.x();
  MatX M(static_cast<Eigen::Index>(top.size()), deg + 1);
  VecX y(M.rows());
  Eigen::Index r = 0;
  for (const auto& [col, z] : top) {
    const double x = ((static_cast<double>(col) + 0.5) * h - x0) / (10.0 * h);
    double pw = 1.0;
    for (int k = 0; k <= deg; ++k, pw *= x) M(r, k) = pw;
    y(r++) = z;
  }
  const VecX c = M.colPivHouseholderQr().solve(y);
  return {std::max(0.0, c(0) - lip.y()), linear};
}

/// One sample per frame in which particles leave the container: their mean
/// speed, the lean of that frame, the volume held in the previous frame and
/// the measured head. Each particle departs at most once.
inline std::vector<SampleRecord> extract_training_samples(const SimRun& run) {
  if (run.frames.size() < 2) throw InputError("extract: need at least 2 frames");
  const std::size_t n = run.frames.front().pos.size();
  std::vector<std::uint8_t> departed(n, 0);
  std::vector<std::uint8_t> prev_in(n);
  for (std::size_t p = 0; p < n; ++p) prev_in[p] = inside_container(run, run.frames.front(), p) ? 1 : 0;
  std::vector<SampleRecord> out;
  for (std::size_t k = 1; k < run.frames.size(); ++k) {
    const ParticleSet& f = run.frames[k];
    if (f.pos.size() != n) throw InputError("extract: particle count changes between frames");
    double speed = 0.0;
    std::size_t count = 0, held_before = 0;
    std::vector<std::uint8_t> cur_in(n);
    for (std::size_t p = 0; p < n; ++p) {
      cur_in[p] = inside_container(run, f, p) ? 1 : 0;
      held_before += prev_in[p];
      if (prev_in[p] && !cur_in[p] && !departed[p]) {
        departed[p] = 1;
        speed += f.vel[p].norm();
        ++count;
      }
    }
    if (count > 0) {
      SampleRecord r;
      r.t = f.t;
      r.sample.v_out_next = speed / static_cast<double>(count);
      r.sample.theta_next = std::abs(f.pose.theta);
      r.sample.vol = static_cast<double>(held_before) * run.particle_volume;
      const auto [dh, linear] = surface_head(run, f);
      r.sample.dh = dh;
      r.linear_fit = linear;
      out.push_back(r);
    }
    prev_in.swap(cur_in);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frame files

namespace detail {
template <class T>
void put(std::ostream& o, const T& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& i) {
  T v{};
  i.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!i) throw InputError("frames: truncated file");
  return v;
}
}  // namespace detail

inline constexpr char kFrameMagic[8] = {'P', 'O', 'U', 'R', 'F', 'R', 'M', '\0'};

inline void save_run(const std::string& path, const SimRun& run) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write frames: " + path);
  nlohmann::json meta = {{"container_id", run.container_id},
                         {"particle_volume", run.particle_volume},
                         {"lip", {run.lip.x(), run.lip.y()}},
                         {"config", run.config.to_json()},
                         {"stats",
                          {{"substeps", run.stats.substeps},
                           {"advection_splits", run.stats.advection_splits},
                           {"max_pressure_iterations", run.stats.max_pressure_iterations}}}};
  nlohmann::json prof = nlohmann::json::array();
  for (const Vec2& v : run.profile) prof.push_back({v.x(), v.y()});
  meta["profile"] = prof;
  const std::string m = meta.dump();
  out.write(kFrameMagic, 8);
  detail::put<std::uint32_t>(out, 1);
  detail::put<std::uint64_t>(out, m.size());
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  detail::put<std::uint64_t>(out, run.frames.size());
  for (const auto& f : run.frames) {
    detail::put(out, f.t);
    detail::put(out, f.pose.x);
    detail::put(out, f.pose.z);
    detail::put(out, f.pose.theta);
    detail::put<std::uint64_t>(out, f.pos.size());
    for (std::size_t p = 0; p < f.pos.size(); ++p) {
      detail::put(out, f.pos[p].x());
      detail::put(out, f.pos[p].y());
      detail::put(out, f.vel[p].x());
      detail::put(out, f.vel[p].y());
    }
    out.write(reinterpret_cast<const char*>(f.stage.data()), static_cast<std::streamsize>(f.stage.size()));
  }
  if (!out) throw InputError("failed writing frames: " + path);
}

inline SimRun load_run(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open frames: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kFrameMagic, 8) != 0) throw InputError("frames " + path + ": not a frame file");
  if (detail::get<std::uint32_t>(in) != 1) throw InputError("frames " + path + ": unsupported version");
  const auto mlen = detail::get<std::uint64_t>(in);
  if (mlen > (1u << 26)) throw InputError("frames " + path + ": corrupt header");
  std::string m(mlen, '\0');
  in.read(m.data(), static_cast<std::streamsize>(mlen));
  SimRun run;
  try {
    const auto meta = nlohmann::json::parse(m);
    run.container_id = meta.at("container_id").get<std::string>();
    run.particle_volume = meta.at("particle_volume").get<double>();
    run.lip = {meta.at("lip").at(0).get<double>(), meta.at("lip").at(1).get<double>()};
    run.config = SimConfig::from_json(meta.at("config"));
    for (const auto& v : meta.at("profile")) run.profile.emplace_back(v.at(0).get<double>(), v.at(1).get<double>());
    const auto& st = meta.at("stats");
    run.stats.substeps = st.at("substeps").get<std::size_t>();
    run.stats.advection_splits = st.at("advection_splits").get<std::size_t>();
    run.stats.max_pressure_iterations = st.at("max_pressure_iterations").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError("frames " + path + ": bad header: " + e.what());
  }
  const auto nf = detail::get<std::uint64_t>(in);
  for (std::uint64_t k = 0; k < nf; ++k) {
    ParticleSet f;
    f.t = detail::get<double>(in);
    f.pose.x = detail::get<double>(in);
    f.pose.z = detail::get<double>(in);
    f.pose.theta = detail::get<double>(in);
    const auto np = detail::get<std::uint64_t>(in);
    if (np > (1u << 24)) throw InputError("frames " + path + ": corrupt particle count");
    f.pos.resize(np);
    f.vel.resize(np);
    f.stage.resize(np);
    for (std::size_t p = 0; p < np; ++p) {
      f.pos[p].x() = detail::get<double>(in);
      f.pos[p].y() = detail::get<double>(in);
      f.vel[p].x() = detail::get<double>(in);
      f.vel[p].y() = detail::get<double>(in);
    }
    in.read(reinterpret_cast<char*>(f.stage.data()), static_cast<std::streamsize>(np));
    if (!in) throw InputError("frames " + path + ": truncated");
    run.frames.push_back(std::move(f));
  }
  return run;
}

}  // namespace pourplan::sim
