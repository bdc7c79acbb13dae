#pragma once

// Narrow-phase checks between spheres, capsules and boxes.
//
// Contact convention: n points from body B towards body A (the direction that
// separates A from B), d is the penetration depth (negative when the bodies
// are apart), and the witness points satisfy a - b = -d n.

#include "pourplan/common.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <optional>
#include <span>
#include <variant>
#include <vector>

namespace pourplan {

struct Sphere {
  double radius = 0.0;
};

/// Segment p0-p1 swept by a ball.
struct Capsule {
  Vec3 p0 = Vec3::Zero();
  Vec3 p1 = Vec3::Zero();
  double radius = 0.0;
};

struct Box {
  Vec3 half_extents = Vec3::Zero();
};

struct Shape {
  std::variant<Sphere, Capsule, Box> geom;
  Pose local = Pose::Identity();  ///< shape frame relative to its body

  static Shape sphere(double r, const Vec3& center = Vec3::Zero()) {
    Shape s{Sphere{r}};
    s.local.translation() = center;
    return s;
  }
  static Shape capsule(const Vec3& p0, const Vec3& p1, double r) { return Shape{Capsule{p0, p1, r}}; }
  static Shape box(const Vec3& half, const Pose& pose = Pose::Identity()) { return Shape{Box{half}, pose}; }

  void validate() const {
    std::visit(
        [](const auto& g) {
          using T = std::decay_t<decltype(g)>;
          if constexpr (std::is_same_v<T, Box>) {
            if (!(g.half_extents.minCoeff() > 0.0)) throw InputError("box: half extents must be positive");
          } else {
            if (!(g.radius > 0.0)) throw InputError("shape: radius must be positive");
          }
        },
        geom);
  }
};

struct Contact {
  Vec3 a = Vec3::Zero();  ///< witness point on the first body
  Vec3 b = Vec3::Zero();  ///< witness point on the second body
  Vec3 n = Vec3::UnitZ();
  double d = 0.0;
  bool degenerate = false;

  Contact swapped() const { return {b, a, -n, d, degenerate}; }
};

namespace detail {

inline Vec3 closest_on_segment(const Vec3& p0, const Vec3& p1, const Vec3& q) {
  const Vec3 d = p1 - p0;
  const double len2 = d.squaredNorm();
  if (len2 <= 0.0) return p0;
  return p0 + std::clamp((q - p0).dot(d) / len2, 0.0, 1.0) * d;
}

/// Closest points between segments p0-p1 and q0-q1.
inline std::pair<Vec3, Vec3> closest_segment_segment(const Vec3& p0, const Vec3& p1, const Vec3& q0,
                                                     const Vec3& q1) {
  const Vec3 d1 = p1 - p0, d2 = q1 - q0, r = p0 - q0;
  const double a = d1.squaredNorm(), e = d2.squaredNorm(), f = d2.dot(r);
  double s = 0.0, t = 0.0;
  constexpr double eps = 1e-18;
  if (a <= eps && e <= eps) return {p0, q0};
  if (a <= eps) {
    t = std::clamp(f / e, 0.0, 1.0);
  } else {
    const double c = d1.dot(r);
    if (e <= eps) {
      s = std::clamp(-c / a, 0.0, 1.0);
    } else {
      const double b = d1.dot(d2);
      const double denom = a * e - b * b;
      s = denom > eps * a * e ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.0;
      t = (b * s + f) / e;
      if (t < 0.0) {
        t = 0.0;
        s = std::clamp(-c / a, 0.0, 1.0);
      } else if (t > 1.0) {
        t = 1.0;
        s = std::clamp((b - c) / a, 0.0, 1.0);
      }
    }
  }
  return {p0 + s * d1, q0 + t * d2};
}

/// Contact between two balls (possibly the swept balls of capsules).
inline Contact ball_ball(const Vec3& ca, double ra, const Vec3& cb, double rb) {
  Contact c;
  const Vec3 diff = ca - cb;
  const double dist = diff.norm();
  if (dist < 1e-12) {
    c.n = Vec3::UnitZ();
    c.degenerate = true;
  } else {
    c.n = diff / dist;
  }
  c.d = ra + rb - dist;
  c.a = ca - ra * c.n;
  c.b = cb + rb * c.n;
  return c;
}

struct WorldBox {
  Vec3 c;
  Mat3 R;  // columns are the box axes
  Vec3 h;

  Vec3 to_local(const Vec3& p) const { return R.transpose() * (p - c); }
  Vec3 clamp_local(const Vec3& pl) const { return pl.cwiseMax(-h).cwiseMin(h); }
  double distance(const Vec3& p) const {
    const Vec3 pl = to_local(p);
    return (pl - clamp_local(pl)).norm();
  }
  double radius_along(const Vec3& u) const {
    return h.x() * std::abs(R.col(0).dot(u)) + h.y() * std::abs(R.col(1).dot(u)) + h.z() * std::abs(R.col(2).dot(u));
  }
  Vec3 support(const Vec3& v) const {
    Vec3 p = c;
    for (int k = 0; k < 3; ++k) p += (R.col(k).dot(v) >= 0 ? h(k) : -h(k)) * R.col(k);
    return p;
  }
};

/// Capsule (or sphere, when p0 == p1) against a box; A is the capsule.
inline Contact capsule_box(const Vec3& p0, const Vec3& p1, double r, const WorldBox& box) {
  // Distance from the box is convex along the segment: golden-section search.
  auto f = [&](double t) { return box.distance(p0 + t * (p1 - p0)); };
  double lo = 0.0, hi = 1.0;
  double tmin = 0.0, fmin = f(0.0);
  if ((p1 - p0).squaredNorm() > 0.0) {
    const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
    double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
    double f1 = f(x1), f2 = f(x2);
    for (int it = 0; it < 90 && hi - lo > 1e-14; ++it) {
      if (f1 < f2) {
        hi = x2;
        x2 = x1;
        f2 = f1;
        x1 = hi - gr * (hi - lo);
        f1 = f(x1);
      } else {
        lo = x1;
        x1 = x2;
        f1 = f2;
        x2 = lo + gr * (hi - lo);
        f2 = f(x2);
      }
    }
    for (double t : {0.0, 1.0, 0.5 * (lo + hi)}) {
      const double v = f(t);
      if (v < fmin) {
        fmin = v;
        tmin = t;
      }
    }
  }
  Contact c;
  if (fmin > 1e-12) {
    const Vec3 p = p0 + tmin * (p1 - p0);
    const Vec3 q = box.c + box.R * box.clamp_local(box.to_local(p));
    c.n = (p - q) / fmin;
    c.d = r - fmin;
    c.a = p - r * c.n;
    c.b = q;
    return c;
  }
  // Segment meets the box: separating-axis test over box normals and
  // segment x box-axis directions gives the minimum translation.
  const Vec3 m = 0.5 * (p0 + p1) - box.c;
  const Vec3 half = 0.5 * (p1 - p0);
  std::array<Vec3, 6> axes;
  std::size_t na = 0;
  for (int k = 0; k < 3; ++k) axes[na++] = box.R.col(k);
  for (int k = 0; k < 3; ++k) {
    const Vec3 u = half.cross(box.R.col(k));
    if (u.norm() > 1e-9 * std::max(1.0, half.norm())) axes[na++] = u.normalized();
  }
  double best = std::numeric_limits<double>::infinity();
  Vec3 best_n = Vec3::UnitZ();
  for (std::size_t k = 0; k < na; ++k) {
    const Vec3& u = axes[k];
    const double mu = m.dot(u);
    const double overlap = box.radius_along(u) + std::abs(half.dot(u)) - std::abs(mu);
    if (overlap < best) {
      best = overlap;
      best_n = mu >= 0 ? u : Vec3(-u);
    }
  }
  c.n = best_n;
  c.d = best + r;
  c.a = (p0.dot(c.n) <= p1.dot(c.n) ? p0 : p1) - r * c.n;
  c.b = c.a + c.d * c.n;
  return c;
}

/// Box A against box B by the separating-axis test. When apart, the reported
/// separation is the largest axis gap, a lower bound on the true distance.
inline Contact box_box(const WorldBox& A, const WorldBox& B) {
  std::vector<Vec3> axes;
  for (int k = 0; k < 3; ++k) axes.push_back(A.R.col(k));
  for (int k = 0; k < 3; ++k) axes.push_back(B.R.col(k));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const Vec3 u = A.R.col(i).cross(B.R.col(j));
      if (u.norm() > 1e-9) axes.push_back(u.normalized());
    }
  }
  const Vec3 dc = A.c - B.c;
  double best = std::numeric_limits<double>::infinity();
  Vec3 best_n = Vec3::UnitZ();
  for (const Vec3& u : axes) {
    const double mu = dc.dot(u);
    const double overlap = A.radius_along(u) + B.radius_along(u) - std::abs(mu);
    if (overlap < best) {
      best = overlap;
      best_n = mu >= 0 ? u : Vec3(-u);
    }
  }
  Contact c;
  c.n = best_n;
  c.d = best;
  c.a = A.support(-c.n);
  c.b = c.a + c.d * c.n;
  return c;
}

inline WorldBox world_box(const Box& b, const Pose& pose) { return {pose.translation(), pose.rotation(), b.half_extents}; }

inline Contact dispatch(const Shape& A, const Pose& pa, const Shape& B, const Pose& pb) {
  const Pose wa = pa * A.local;
  const Pose wb = pb * B.local;
  return std::visit(
      [&](const auto& ga, const auto& gb) -> Contact {
        using TA = std::decay_t<decltype(ga)>;
        using TB = std::decay_t<decltype(gb)>;
        auto seg = [](const auto& g, const Pose& w) -> std::pair<Vec3, Vec3> {
          if constexpr (std::is_same_v<std::decay_t<decltype(g)>, Capsule>) {
            return {w * g.p0, w * g.p1};
          } else {
            return {w.translation(), w.translation()};
          }
        };
        if constexpr (std::is_same_v<TA, Box> && std::is_same_v<TB, Box>) {
          return box_box(world_box(ga, wa), world_box(gb, wb));
        } else if constexpr (std::is_same_v<TB, Box>) {
          const auto [p0, p1] = seg(ga, wa);
          return capsule_box(p0, p1, ga.radius, world_box(gb, wb));
        } else if constexpr (std::is_same_v<TA, Box>) {
          const auto [q0, q1] = seg(gb, wb);
          return capsule_box(q0, q1, gb.radius, world_box(ga, wa)).swapped();
        } else {
          const auto [p0, p1] = seg(ga, wa);
          const auto [q0, q1] = seg(gb, wb);
          const auto [pa_, pb_] = closest_segment_segment(p0, p1, q0, q1);
          return ball_ball(pa_, ga.radius, pb_, gb.radius);
        }
      },
      A.geom, B.geom);
}

}  // namespace detail

/// Deepest contact between two shapes, or the closest-point record (d < 0)
/// when they are apart by no more than `margin`.
inline std::optional<Contact> check_pair(const Shape& A, const Pose& pose_a, const Shape& B, const Pose& pose_b,
                                         double margin = 0.0) {
  const Contact c = detail::dispatch(A, pose_a, B, pose_b);
  if (c.d >= 0.0 || -c.d <= margin) return c;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Robot-vs-world queries

struct Obstacle {
  std::string name;
  Shape shape;  ///< shape.local is its world pose
};

/// A contact between robot body `body` and obstacle `obstacle` (or, for
/// self-collision, robot body `other_body`, with obstacle == -1).
struct PairContact {
  int body = -1;
  int obstacle = -1;
  int other_body = -1;
  Contact contact;
};

/// Deepest contact per (body, obstacle) pair and per enabled self pair.
/// `bodies[k]` holds the shapes rigidly attached to pose `poses[k]`.
inline std::vector<PairContact> deepest_contacts(std::span<const Obstacle> obstacles,
                                                 std::span<const std::vector<Shape>> bodies,
                                                 std::span<const Pose> poses, double margin = 0.0,
                                                 std::span<const std::pair<int, int>> self_pairs = {}) {
  if (bodies.size() != poses.size()) throw InputError("deepest_contacts: body/pose count mismatch");
  std::vector<PairContact> out;
  auto deepest = [&](const std::vector<Shape>& sa, const Pose& pa, auto&& each_b) {
    std::optional<Contact> best;
    for (const Shape& s : sa) {
      each_b([&](const Shape& sb, const Pose& pb) {
        if (auto c = check_pair(s, pa, sb, pb, margin); c && (!best || c->d > best->d)) best = c;
      });
    }
    return best;
  };
  for (std::size_t k = 0; k < bodies.size(); ++k) {
    if (bodies[k].empty()) continue;
    for (std::size_t o = 0; o < obstacles.size(); ++o) {
      auto best = deepest(bodies[k], poses[k], [&](auto&& fn) { fn(obstacles[o].shape, Pose::Identity()); });
      if (best) out.push_back({static_cast<int>(k), static_cast<int>(o), -1, *best});
    }
  }
  for (const auto& [i, j] : self_pairs) {
    if (i < 0 || j < 0 || static_cast<std::size_t>(i) >= bodies.size() ||
        static_cast<std::size_t>(j) >= bodies.size()) {
      throw InputError("deepest_contacts: self pair index out of range");
    }
    auto best = deepest(bodies[static_cast<std::size_t>(i)], poses[static_cast<std::size_t>(i)], [&](auto&& fn) {
      for (const Shape& sb : bodies[static_cast<std::size_t>(j)]) fn(sb, poses[static_cast<std::size_t>(j)]);
    });
    if (best) out.push_back({i, -1, j, *best});
  }
  return out;
}

}  // namespace pourplan
