#pragma once

#include "pourplan/common.hpp"

#include <algorithm>
#include <limits>
#include <span>
#include <vector>

namespace pourplan::poly {

/// Shoelace area; positive for counter-clockwise vertex order. The polygon is
/// implicitly closed (last vertex connects back to the first).
inline double signed_area(std::span<const Vec2> pts) {
  double a = 0.0;
  for (std::size_t i = 0, n = pts.size(); i < n; ++i) {
    const Vec2& p = pts[i];
    const Vec2& q = pts[(i + 1) % n];
    a += p.x() * q.y() - q.x() * p.y();
  }
  return 0.5 * a;
}

inline Vec2 centroid(std::span<const Vec2> pts) {
  double a = 0.0, cx = 0.0, cy = 0.0;
  for (std::size_t i = 0, n = pts.size(); i < n; ++i) {
    const Vec2& p = pts[i];
    const Vec2& q = pts[(i + 1) % n];
    const double cr = p.x() * q.y() - q.x() * p.y();
    a += cr;
    cx += (p.x() + q.x()) * cr;
    cy += (p.y() + q.y()) * cr;
  }
  a *= 0.5;
  return {cx / (6.0 * a), cy / (6.0 * a)};
}

/// Even-odd point containment test.
inline bool contains(std::span<const Vec2> pts, const Vec2& p) {
  bool inside = false;
  for (std::size_t i = 0, n = pts.size(), j = n - 1; i < n; j = i++) {
    const Vec2& a = pts[i];
    const Vec2& b = pts[j];
    if ((a.y() > p.y()) != (b.y() > p.y())) {
      const double x = (b.x() - a.x()) * (p.y() - a.y()) / (b.y() - a.y()) + a.x();
      if (p.x() < x) inside = !inside;
    }
  }
  return inside;
}

inline Vec2 closest_on_segment(const Vec2& a, const Vec2& b, const Vec2& p) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 <= 0.0) return a;
  const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return a + t * ab;
}

/// Distance from p to an open polyline.
inline double distance_to_polyline(std::span<const Vec2> pts, const Vec2& p) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    best = std::min(best, (closest_on_segment(pts[i], pts[i + 1], p) - p).norm());
  }
  return best;
}

/// Distance from p to the boundary of a closed polygon.
inline double distance_to_boundary(std::span<const Vec2> pts, const Vec2& p) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0, n = pts.size(); i < n; ++i) {
    best = std::min(best, (closest_on_segment(pts[i], pts[(i + 1) % n], p) - p).norm());
  }
  return best;
}

namespace detail {
inline double cross(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

inline bool segments_intersect(const Vec2& p1, const Vec2& p2, const Vec2& q1, const Vec2& q2) {
  const double d1 = cross(q2 - q1, p1 - q1);
  const double d2 = cross(q2 - q1, p2 - q1);
  const double d3 = cross(p2 - p1, q1 - p1);
  const double d4 = cross(p2 - p1, q2 - p1);
  if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0))) {
    return true;
  }
  auto on_seg = [](const Vec2& a, const Vec2& b, const Vec2& c) {
    return std::min(a.x(), b.x()) <= c.x() && c.x() <= std::max(a.x(), b.x()) &&
           std::min(a.y(), b.y()) <= c.y() && c.y() <= std::max(a.y(), b.y());
  };
  if (d1 == 0 && on_seg(q1, q2, p1)) return true;
  if (d2 == 0 && on_seg(q1, q2, p2)) return true;
  if (d3 == 0 && on_seg(p1, p2, q1)) return true;
  if (d4 == 0 && on_seg(p1, p2, q2)) return true;
  return false;
}
}  // namespace detail

/// True when no two non-adjacent edges of the closed polygon touch.
inline bool is_simple(std::span<const Vec2> pts) {
  const std::size_t n = pts.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (j == i + 1 || (i == 0 && j == n - 1)) continue;
      if (detail::segments_intersect(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n])) return false;
    }
  }
  return true;
}

/// x-coordinates where the horizontal line at height y crosses the closed polygon.
inline std::vector<double> horizontal_crossings(std::span<const Vec2> pts, double y) {
  std::vector<double> xs;
  for (std::size_t i = 0, n = pts.size(); i < n; ++i) {
    const Vec2& a = pts[i];
    const Vec2& b = pts[(i + 1) % n];
    if ((a.y() > y) != (b.y() > y)) {
      xs.push_back(a.x() + (b.x() - a.x()) * (y - a.y()) / (b.y() - a.y()));
    }
  }
  std::sort(xs.begin(), xs.end());
  return xs;
}

/// Part of the closed polygon at or below height y (one Sutherland-Hodgman pass).
inline std::vector<Vec2> clip_below(std::span<const Vec2> pts, double y) {
  std::vector<Vec2> out;
  for (std::size_t i = 0, n = pts.size(); i < n; ++i) {
    const Vec2& a = pts[i];
    const Vec2& b = pts[(i + 1) % n];
    const bool ain = a.y() <= y, bin = b.y() <= y;
    if (ain) out.push_back(a);
    if (ain != bin) out.push_back(a + (b - a) * ((y - a.y()) / (b.y() - a.y())));
  }
  return out;
}

/// Offsets a closed counter-clockwise polygon outward by `dist` using mitred
/// vertex normals. Miter length is capped at 3x the offset.
inline std::vector<Vec2> offset_outward(std::span<const Vec2> pts, double dist) {
  const std::size_t n = pts.size();
  std::vector<Vec2> out(n);
  const double orient = signed_area(pts) >= 0 ? 1.0 : -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& prev = pts[(i + n - 1) % n];
    const Vec2& cur = pts[i];
    const Vec2& next = pts[(i + 1) % n];
    const Vec2 e0 = (cur - prev).normalized();
    const Vec2 e1 = (next - cur).normalized();
    // Outward normal of a CCW edge (dx, dy) is (dy, -dx).
    const Vec2 n0 = orient * Vec2(e0.y(), -e0.x());
    const Vec2 n1 = orient * Vec2(e1.y(), -e1.x());
    Vec2 bis = n0 + n1;
    const double len = bis.norm();
    if (len < 1e-12) {
      out[i] = cur + dist * n1;
      continue;
    }
    bis /= len;
    const double c = std::max(bis.dot(n1), 1.0 / 3.0);
    out[i] = cur + (dist / c) * bis;
  }
  return out;
}

}  // namespace pourplan::poly
