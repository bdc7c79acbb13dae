#pragma once

// Axisymmetric container profiles and the precomputed outflow lookup tables
// A(theta, vol), dh(theta, vol) and e(theta, vol).
//
// Conventions. A profile lives in the container's axial cross-section plane
// with coordinates (x, z): z is the symmetry axis, the cavity opening is the
// topmost horizontal edge and the pouring lip is its +x end. Leaning the
// container by theta rotates it about local y so that the axis becomes
// (sin theta, 0, cos theta); this "heading frame" (world axes, azimuth
// removed) is the frame in which table heights and centroids are expressed.

#include "pourplan/common.hpp"
#include "pourplan/polygon.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <queue>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace pourplan {

class ContainerProfile {
 public:
  /// Validates and builds a profile. `closed` must repeat its first vertex at
  /// the end; `lip_index` refers to the unrepeated vertex list.
  static ContainerProfile from_closed_polyline(std::string id, std::vector<Vec2> closed,
                                               std::size_t lip_index) {
    if (closed.size() < 4) throw InputError("profile: need at least 3 distinct vertices");
    if ((closed.front() - closed.back()).norm() > 1e-12) {
      throw InputError("profile: open boundary (first vertex differs from last)");
    }
    closed.pop_back();
    const std::size_t n = closed.size();
    if (lip_index >= n) throw InputError("profile: lip index out of range");
    for (const Vec2& v : closed) {
      if (!v.allFinite()) throw InputError("profile: non-finite vertex");
    }
    if (!poly::is_simple(closed)) throw InputError("profile: self-intersecting boundary");

    ContainerProfile p;
    p.id_ = std::move(id);
    if (poly::signed_area(closed) < 0) {
      std::reverse(closed.begin(), closed.end());
      lip_index = n - 1 - lip_index;
    }
    p.pts_ = std::move(closed);
    p.lip_index_ = lip_index;
    p.lip_ = p.pts_[lip_index];

    double zmin = std::numeric_limits<double>::infinity(), zmax = -zmin, xmax = -zmin;
    for (const Vec2& v : p.pts_) {
      zmin = std::min(zmin, v.y());
      zmax = std::max(zmax, v.y());
      xmax = std::max(xmax, v.x());
    }
    p.zmin_ = zmin;
    p.zmax_ = zmax;
    p.xmax_ = xmax;

    constexpr double kSymTol = 1e-9;
    for (const Vec2& v : p.pts_) {
      if (poly::distance_to_boundary(p.pts_, Vec2(-v.x(), v.y())) > kSymTol) {
        throw InputError("profile: boundary is not symmetric about the axis");
      }
    }
    if (p.lip_.x() <= 0.0) throw InputError("profile: lip must lie on the +x side of the axis");
    if (std::abs(p.lip_.y() - zmax) > kSymTol) {
      throw InputError("profile: lip must lie on the opening (topmost edge)");
    }
    // The opening chord from the mirrored lip to the lip must be boundary.
    for (int k = -4; k <= 4; ++k) {
      const Vec2 probe(p.lip_.x() * k / 4.0, zmax);
      if (poly::distance_to_boundary(p.pts_, probe) > kSymTol) {
        throw InputError("profile: opening is not a straight top edge through the lip");
      }
    }
    return p;
  }

  const std::string& id() const { return id_; }
  /// Counter-clockwise cavity boundary without the repeated closing vertex.
  const std::vector<Vec2>& vertices() const { return pts_; }
  std::size_t lip_index() const { return lip_index_; }
  const Vec2& lip() const { return lip_; }
  Vec2 lip_mirror() const { return {-lip_.x(), lip_.y()}; }
  double opening_radius() const { return lip_.x(); }
  double opening_height() const { return lip_.y(); }
  double bottom() const { return zmin_; }
  double height() const { return zmax_ - zmin_; }
  double width() const { return 2.0 * xmax_; }
  double area() const { return poly::signed_area(pts_); }

  /// Depth of the slab used when the cross-section is treated as a planar
  /// (2D) container: the opening width.
  double slab_depth() const { return 2.0 * opening_radius(); }

  /// Half-width of the cavity at axial height z (0 outside the profile).
  double half_width(double z) const {
    const auto xs = poly::horizontal_crossings(pts_, z);
    double r = 0.0;
    for (double x : xs) r = std::max(r, std::abs(x));
    return r;
  }

  /// Exact volume of the solid of revolution.
  double revolved_volume() const {
    std::vector<double> zs;
    for (const Vec2& v : pts_) zs.push_back(v.y());
    std::sort(zs.begin(), zs.end());
    zs.erase(std::unique(zs.begin(), zs.end()), zs.end());
    // half_width is piecewise linear between vertex heights, so two-point
    // Gauss-Legendre integrates r^2 exactly on each piece.
    const double g = 0.5 / std::sqrt(3.0);
    double vol = 0.0;
    for (std::size_t i = 0; i + 1 < zs.size(); ++i) {
      const double mid = 0.5 * (zs[i] + zs[i + 1]);
      const double len = zs[i + 1] - zs[i];
      const double r0 = half_width(mid - g * len);
      const double r1 = half_width(mid + g * len);
      vol += 0.5 * len * kPi * (r0 * r0 + r1 * r1);
    }
    return vol;
  }

  bool contains(const Vec2& local) const { return poly::contains(pts_, local); }

 private:
  std::string id_;
  std::vector<Vec2> pts_;
  std::size_t lip_index_ = 0;
  Vec2 lip_ = Vec2::Zero();
  double zmin_ = 0, zmax_ = 0, xmax_ = 0;
};

/// Parses {"id", "units": "m"|"mm", "vertices": [[x,z],...], "lip_index"}.
inline ContainerProfile load_profile(const nlohmann::json& spec) {
  try {
    const std::string units = spec.value("units", std::string("m"));
    double scale = 1.0;
    if (units == "mm") {
      scale = 1e-3;
    } else if (units == "cm") {
      scale = 1e-2;
    } else if (units != "m") {
      throw InputError("profile: unknown units '" + units + "'");
    }
    std::vector<Vec2> pts;
    for (const auto& v : spec.at("vertices")) {
      if (v.size() != 2) throw InputError("profile: vertices must be [x, z] pairs");
      pts.emplace_back(scale * v[0].get<double>(), scale * v[1].get<double>());
    }
    return ContainerProfile::from_closed_polyline(spec.value("id", std::string("container")),
                                                  std::move(pts),
                                                  spec.at("lip_index").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("profile: ") + e.what());
  }
}

inline ContainerProfile load_profile_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open profile file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("profile " + path + ": " + e.what());
  }
  return load_profile(j);
}

inline nlohmann::json profile_to_json(const ContainerProfile& p) {
  nlohmann::json verts = nlohmann::json::array();
  for (const Vec2& v : p.vertices()) verts.push_back({v.x(), v.y()});
  verts.push_back({p.vertices().front().x(), p.vertices().front().y()});
  return {{"id", p.id()}, {"units", "m"}, {"vertices", verts}, {"lip_index", p.lip_index()}};
}

/// Open-topped straight cup (a cylinder once revolved). Base centre at origin.
inline ContainerProfile rectangle_profile(double width, double height, std::string id = "cylinder") {
  const double r = 0.5 * width;
  return ContainerProfile::from_closed_polyline(
      std::move(id), {{-r, 0.0}, {r, 0.0}, {r, height}, {-r, height}, {-r, 0.0}}, 2);
}

/// Bottle with an elliptical belly narrowing to a smaller opening.
inline ContainerProfile oval_profile(double belly_radius, double half_height, double opening_radius,
                                     std::size_t segments = 24, std::string id = "oval") {
  if (opening_radius >= belly_radius) throw InputError("oval: opening must be narrower than belly");
  // Ellipse centred at (0, half_height); walk from the bottom pole up the +x
  // side until the half-width shrinks back to the opening radius.
  const double t_top = kPi - std::asin(opening_radius / belly_radius);
  std::vector<Vec2> right;
  for (std::size_t k = 0; k <= segments; ++k) {
    const double t = t_top * static_cast<double>(k) / static_cast<double>(segments);
    right.emplace_back(belly_radius * std::sin(t), half_height * (1.0 - std::cos(t)));
  }
  right.front().x() = 0.0;
  std::vector<Vec2> pts;
  pts.push_back(right.front());
  for (std::size_t k = 1; k < right.size(); ++k) pts.push_back(right[k]);
  const std::size_t lip = pts.size() - 1;
  for (std::size_t k = right.size() - 1; k >= 1; --k) pts.emplace_back(-right[k].x(), right[k].y());
  pts.push_back(pts.front());
  return ContainerProfile::from_closed_polyline(std::move(id), std::move(pts), lip);
}

// ---------------------------------------------------------------------------
// Outflow section at a given water level

enum class Reconstruction : std::uint8_t {
  /// 3D container obtained by revolving the profile about its axis.
  Revolved = 0,
  /// 2D slab of depth slab_depth(); matches the planar particle simulator.
  Planar = 1,
};

struct OutflowSection {
  double A = 0.0;   ///< m^2
  double dh = 0.0;  ///< m
  Vec3 e = Vec3::Zero();  ///< centroid in the heading frame, relative to the container origin
};

/// Outflow quantities of a container leant by theta whose (horizontal) water
/// surface sits at heading-frame height `level`.
inline OutflowSection section_at_level(double opening_radius, double opening_height, double slab_depth,
                                       Reconstruction mode, double theta, double level) {
  const double R = opening_radius;
  const double s = std::sin(theta), c = std::cos(theta);
  const double z_lip = -R * s + opening_height * c;
  OutflowSection out;
  out.dh = std::max(0.0, level - z_lip);
  // Opening-chord points x in [-R, R] at height -x*s + h*c lie below the level
  // for x > xc.
  double xc;
  if (s > 1e-12) {
    xc = std::clamp((opening_height * c - level) / s, -R, R);
  } else {
    xc = (level >= opening_height * c) ? -R : R;
  }
  double xbar;
  if (mode == Reconstruction::Revolved) {
    const double w = std::sqrt(std::max(0.0, R * R - xc * xc));
    out.A = R * R * std::acos(std::clamp(xc / R, -1.0, 1.0)) - xc * w;
    xbar = out.A > 1e-300 ? (2.0 / 3.0) * w * w * w / out.A : R;
  } else {
    out.A = (R - xc) * slab_depth;
    xbar = 0.5 * (R + xc);
  }
  if (out.A <= 0.0) {
    out.A = 0.0;
    xbar = R;
  }
  const Vec2 e2 = tilt2(theta, Vec2(xbar, opening_height));
  out.e = Vec3(e2.x(), 0.0, e2.y());
  return out;
}

// ---------------------------------------------------------------------------
// Lookup tables

struct GeomSample {
  double A = 0.0;
  double dh = 0.0;
  Vec3 e = Vec3::Zero();
  double dA_dtheta = 0.0, dA_dvol = 0.0;
  double ddh_dtheta = 0.0, ddh_dvol = 0.0;
  Vec3 de_dtheta = Vec3::Zero(), de_dvol = Vec3::Zero();
};

struct TableOptions {
  double theta_max = kPi;
  std::size_t n_vol = 201;
  Reconstruction mode = Reconstruction::Revolved;
  /// Minimum number of raster cells across the smallest profile dimension.
  double min_cells_across = 20.0;
  unsigned threads = 0;  ///< 0 = hardware concurrency
};

class GeomTables {
 public:
  GeomTables() = default;

  const std::string& container_id() const { return id_; }
  Reconstruction mode() const { return mode_; }
  double theta_step() const { return dtheta_; }
  std::size_t n_theta() const { return n_theta_; }
  double theta_max() const { return dtheta_ * static_cast<double>(n_theta_ - 1); }
  double theta_at(std::size_t i) const { return dtheta_ * static_cast<double>(i); }
  std::size_t n_vol() const { return n_vol_; }
  double vol_max() const { return vol_max_; }
  double vol_step() const { return vol_max_ / static_cast<double>(n_vol_ - 1); }
  double vol_at(std::size_t j) const { return vol_step() * static_cast<double>(j); }
  double grid_cell() const { return grid_cell_; }
  double opening_radius() const { return opening_radius_; }
  double opening_height() const { return opening_height_; }
  double slab_depth() const { return slab_depth_; }

  double A(std::size_t i, std::size_t j) const { return A_[idx(i, j)]; }
  double dh(std::size_t i, std::size_t j) const { return dh_[idx(i, j)]; }
  Vec3 e(std::size_t i, std::size_t j) const { return {ex_[idx(i, j)], 0.0, ez_[idx(i, j)]}; }

  /// Bilinear interpolation over (theta, vol). Partials are the cell finite
  /// differences of the table, i.e. the exact derivatives of the interpolant.
  GeomSample lookup(double theta, double vol) const {
    if (!(theta >= -1e-12 && theta <= theta_max() + 1e-12)) {
      throw InputError("lookup: theta " + std::to_string(theta) + " outside [0, " +
                       std::to_string(theta_max()) + "]");
    }
    if (!(vol >= 0.0)) throw InputError("lookup: negative volume");
    theta = std::clamp(theta, 0.0, theta_max());
    bool clamped = false;
    if (vol >= vol_max_) {
      vol = vol_max_;
      clamped = true;
    }
    auto snap = [](double f) {
      const double r = std::round(f);
      return std::abs(f - r) < 1e-9 ? r : f;
    };
    const double ft = snap(theta / dtheta_);
    const double fv = snap(vol / vol_step());
    const std::size_t i = std::min(static_cast<std::size_t>(ft), n_theta_ - 2);
    const std::size_t j = std::min(static_cast<std::size_t>(fv), n_vol_ - 2);
    const double u = ft - static_cast<double>(i);
    const double w = fv - static_cast<double>(j);

    auto interp = [&](const std::vector<double>& t, double& val, double& dt, double& dv) {
      const double f00 = t[idx(i, j)], f01 = t[idx(i, j + 1)];
      const double f10 = t[idx(i + 1, j)], f11 = t[idx(i + 1, j + 1)];
      val = (1 - u) * (1 - w) * f00 + (1 - u) * w * f01 + u * (1 - w) * f10 + u * w * f11;
      dt = ((1 - w) * (f10 - f00) + w * (f11 - f01)) / dtheta_;
      dv = clamped ? 0.0 : ((1 - u) * (f01 - f00) + u * (f11 - f10)) / vol_step();
    };
    GeomSample s;
    interp(A_, s.A, s.dA_dtheta, s.dA_dvol);
    interp(dh_, s.dh, s.ddh_dtheta, s.ddh_dvol);
    interp(ex_, s.e.x(), s.de_dtheta.x(), s.de_dvol.x());
    interp(ez_, s.e.z(), s.de_dtheta.z(), s.de_dvol.z());
    s.A = std::max(0.0, s.A);
    s.dh = std::max(0.0, s.dh);
    return s;
  }

  /// Versioned little-endian binary; doubles are written verbatim so a load
  /// reproduces every table entry bit for bit.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write tables file: " + path);
    out.write(kMagic, 8);
    put<std::uint32_t>(out, kVersion);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(mode_));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(id_.size()));
    out.write(id_.data(), static_cast<std::streamsize>(id_.size()));
    put<std::uint64_t>(out, n_theta_);
    put<std::uint64_t>(out, n_vol_);
    for (double d : {dtheta_, vol_max_, grid_cell_, opening_radius_, opening_height_, slab_depth_}) {
      put<double>(out, d);
    }
    for (const auto* v : {&A_, &dh_, &ex_, &ez_}) {
      out.write(reinterpret_cast<const char*>(v->data()),
                static_cast<std::streamsize>(v->size() * sizeof(double)));
    }
    if (!out) throw InputError("failed writing tables file: " + path);
  }

  static GeomTables load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open tables file: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) throw InputError("not a tables file: " + path);
    if (get<std::uint32_t>(in) != kVersion) throw InputError("unsupported tables version: " + path);
    GeomTables t;
    t.mode_ = static_cast<Reconstruction>(get<std::uint8_t>(in));
    const auto len = get<std::uint32_t>(in);
    if (len > 4096) throw InputError("corrupt tables file: " + path);
    t.id_.resize(len);
    in.read(t.id_.data(), len);
    t.n_theta_ = get<std::uint64_t>(in);
    t.n_vol_ = get<std::uint64_t>(in);
    if (t.n_theta_ < 2 || t.n_vol_ < 2 || t.n_theta_ * t.n_vol_ > (std::size_t{1} << 28)) {
      throw InputError("corrupt tables file: " + path);
    }
    t.dtheta_ = get<double>(in);
    t.vol_max_ = get<double>(in);
    t.grid_cell_ = get<double>(in);
    t.opening_radius_ = get<double>(in);
    t.opening_height_ = get<double>(in);
    t.slab_depth_ = get<double>(in);
    for (auto* v : {&t.A_, &t.dh_, &t.ex_, &t.ez_}) {
      v->resize(t.n_theta_ * t.n_vol_);
      in.read(reinterpret_cast<char*>(v->data()), static_cast<std::streamsize>(v->size() * sizeof(double)));
    }
    if (!in) throw InputError("truncated tables file: " + path);
    return t;
  }

  bool operator==(const GeomTables&) const = default;

  /// Raw grids, row-major in (theta, vol).
  struct Grids {
    std::string id;
    Reconstruction mode = Reconstruction::Planar;
    double theta_step = 0.0;
    std::size_t n_theta = 0;
    double vol_max = 0.0;
    std::size_t n_vol = 0;
    double opening_radius = 0.0, opening_height = 0.0, slab_depth = 0.0;
    std::vector<double> A, dh, ex, ez;
  };

  /// Builds tables from explicit grids (synthetic tables, tests).
  static GeomTables from_grids(Grids g) {
    require(g.theta_step > 0 && g.n_theta >= 2 && g.n_vol >= 2 && g.vol_max > 0, "tables: bad grid shape");
    const std::size_t total = g.n_theta * g.n_vol;
    if (g.ex.empty()) g.ex.assign(total, 0.0);
    if (g.ez.empty()) g.ez.assign(total, 0.0);
    require(g.A.size() == total && g.dh.size() == total && g.ex.size() == total && g.ez.size() == total,
            "tables: grid size mismatch");
    for (std::size_t k = 0; k < total; ++k) {
      require(g.A[k] >= 0 && g.dh[k] >= 0, "tables: A and dh must be non-negative");
    }
    GeomTables t;
    t.id_ = std::move(g.id);
    t.mode_ = g.mode;
    t.dtheta_ = g.theta_step;
    t.n_theta_ = g.n_theta;
    t.vol_max_ = g.vol_max;
    t.n_vol_ = g.n_vol;
    t.opening_radius_ = g.opening_radius;
    t.opening_height_ = g.opening_height;
    t.slab_depth_ = g.slab_depth;
    t.A_ = std::move(g.A);
    t.dh_ = std::move(g.dh);
    t.ex_ = std::move(g.ex);
    t.ez_ = std::move(g.ez);
    return t;
  }

 private:
  friend GeomTables build_tables(const ContainerProfile&, double, double, const TableOptions&);

  static constexpr char kMagic[8] = {'P', 'O', 'U', 'R', 'T', 'B', 'L', '\0'};
  static constexpr std::uint32_t kVersion = 1;

  template <class T>
  static void put(std::ostream& o, T v) {
    o.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  template <class T>
  static T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
  }

  std::size_t idx(std::size_t i, std::size_t j) const { return i * n_vol_ + j; }

  std::string id_;
  Reconstruction mode_ = Reconstruction::Revolved;
  double dtheta_ = 0.0;
  std::size_t n_theta_ = 0;
  double vol_max_ = 0.0;
  std::size_t n_vol_ = 0;
  double grid_cell_ = 0.0;
  double opening_radius_ = 0.0, opening_height_ = 0.0, slab_depth_ = 0.0;
  std::vector<double> A_, dh_, ex_, ez_;
};

namespace detail {

/// (level, volume) pairs emitted by the watershed at one leaning angle,
/// starting at the lowest cavity point with zero volume.
struct LevelCurve {
  std::vector<double> level;
  std::vector<double> vol;
};

/// Rasterizes the leant cross-section and floods it from its lowest cell in
/// order of height (priority flood). Each raster cell carries 3x3 sub-samples
/// with revolution (or slab) weights; a sub-sample becomes wet once the water
/// reaches both its own height and the level at which the flood entered its
/// cell. Sorting the sub-samples by that wetting height yields one
/// (level, volume) entry per distinct level.
inline LevelCurve watershed_levels(const ContainerProfile& prof, Reconstruction mode, double theta,
                                   double cell) {
  constexpr int kSub = 3;
  const auto& pts = prof.vertices();
  double xmin = 1e300, xmax = -1e300, zmin = 1e300, zmax = -1e300;
  for (const Vec2& v : pts) {
    const Vec2 t = tilt2(theta, v);
    xmin = std::min(xmin, t.x());
    xmax = std::max(xmax, t.x());
    zmin = std::min(zmin, t.y());
    zmax = std::max(zmax, t.y());
  }
  const auto nx = static_cast<std::size_t>(std::ceil((xmax - xmin) / cell)) + 1;
  const auto nz = static_cast<std::size_t>(std::ceil((zmax - zmin) / cell)) + 1;
  const double depth = prof.slab_depth();
  // Half-width samples for revolution weights.
  const std::size_t n_r = 4096;
  std::vector<double> rtab(n_r + 1);
  for (std::size_t k = 0; k <= n_r; ++k) {
    rtab[k] = prof.half_width(prof.bottom() + prof.height() * static_cast<double>(k) / n_r);
  }
  auto radius_at = [&](double z) {
    const double f = (z - prof.bottom()) / prof.height() * static_cast<double>(n_r);
    if (f <= 0 || f >= static_cast<double>(n_r)) return 0.0;
    const auto k = static_cast<std::size_t>(f);
    const double a = f - static_cast<double>(k);
    return (1 - a) * rtab[k] + a * rtab[std::min(k + 1, n_r)];
  };

  struct Sub {
    double z, w;
  };
  std::vector<std::vector<Sub>> subs(nx * nz);
  std::vector<char> interior(nx * nz, 0);
  std::size_t inside = 0;
  const double sub_area = cell * cell / (kSub * kSub);
  for (std::size_t r = 0; r < nz; ++r) {
    for (std::size_t c = 0; c < nx; ++c) {
      auto& cs = subs[r * nx + c];
      for (int a = 0; a < kSub; ++a) {
        for (int b = 0; b < kSub; ++b) {
          const Vec2 p(xmin + (static_cast<double>(c) + (a + 0.5) / kSub) * cell,
                       zmin + (static_cast<double>(r) + (b + 0.5) / kSub) * cell);
          const Vec2 local = untilt2(theta, p);
          if (!prof.contains(local)) continue;
          double w;
          if (mode == Reconstruction::Revolved) {
            const double rad = radius_at(local.y());
            w = 2.0 * std::sqrt(std::max(0.0, rad * rad - local.x() * local.x())) * sub_area;
          } else {
            w = depth * sub_area;
          }
          cs.push_back({p.y(), w});
        }
      }
      if (!cs.empty()) {
        interior[r * nx + c] = 1;
        ++inside;
      }
    }
  }
  const double min_dim = std::min(prof.width(), prof.height());
  if (inside < 100 || min_dim / cell < 10.0) {
    throw InputError("build_tables: grid too coarse (" + std::to_string(inside) + " interior cells)");
  }

  std::size_t seed = interior.size();
  for (std::size_t k = 0; k < interior.size() && seed == interior.size(); ++k) {
    if (interior[k]) seed = k;
  }
  // Bucket queue keyed by flood level (row index).
  std::vector<std::vector<std::size_t>> buckets(nz);
  std::vector<char> queued(interior.size(), 0);
  buckets[seed / nx].push_back(seed);
  queued[seed] = 1;
  std::vector<Sub> wet;
  for (std::size_t lvl = seed / nx; lvl < nz; ++lvl) {
    auto& bucket = buckets[lvl];
    const double floor = zmin + static_cast<double>(lvl) * cell;
    for (std::size_t b = 0; b < bucket.size(); ++b) {
      const std::size_t k = bucket[b];
      for (const Sub& sub : subs[k]) wet.push_back({std::max(sub.z, floor), sub.w});
      const std::size_t r = k / nx, c = k % nx;
      const std::size_t nbr[4] = {c > 0 ? k - 1 : k, c + 1 < nx ? k + 1 : k, r > 0 ? k - nx : k,
                                  r + 1 < nz ? k + nx : k};
      for (std::size_t m : nbr) {
        if (m == k || queued[m] || !interior[m]) continue;
        queued[m] = 1;
        const std::size_t nl = std::max(m / nx, lvl);
        if (nl == lvl) {
          bucket.push_back(m);
        } else {
          buckets[nl].push_back(m);
        }
      }
    }
  }

  // The lip must be wetted by the flood.
  const Vec2 lip_t = tilt2(theta, prof.lip());
  std::size_t best = interior.size();
  double best_d = 1e300;
  for (std::size_t k = 0; k < interior.size(); ++k) {
    if (!interior[k]) continue;
    const Vec2 center(xmin + (static_cast<double>(k % nx) + 0.5) * cell,
                      zmin + (static_cast<double>(k / nx) + 0.5) * cell);
    const double d = (center - lip_t).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  if (best == interior.size() || !queued[best]) throw InputError("build_tables: lip not reachable by fill");

  std::sort(wet.begin(), wet.end(), [](const Sub& a, const Sub& b) { return a.z < b.z; });
  // A sub-sample stands for a layer centred on its height, so the volume
  // entry at that level counts half of its own weight.
  LevelCurve out;
  out.level.push_back(zmin);
  out.vol.push_back(0.0);
  double vol = 0.0;
  for (std::size_t k = 0; k < wet.size();) {
    double group = 0.0;
    std::size_t m = k;
    for (; m < wet.size() && wet[m].z == wet[k].z; ++m) group += wet[m].w;
    if (wet[k].z > out.level.back()) {
      out.level.push_back(wet[k].z);
      out.vol.push_back(vol + 0.5 * group);
    }
    vol += group;
    k = m;
  }
  out.level.push_back(zmax);
  out.vol.push_back(vol);
  return out;
}

}  // namespace detail

/// Precomputes A, dh and e over theta in [0, opts.theta_max] at `theta_step`
/// and over a common uniform volume axis from empty to full.
inline GeomTables build_tables(const ContainerProfile& prof, double theta_step, double grid_cell,
                               const TableOptions& opts = {}) {
  require(theta_step > 0.0, "build_tables: theta_step must be positive");
  require(grid_cell > 0.0, "build_tables: grid_cell must be positive");
  require(opts.n_vol >= 2, "build_tables: need at least two volume levels");
  const double min_dim = std::min(prof.width(), prof.height());
  if (min_dim / grid_cell < opts.min_cells_across) {
    throw InputError("build_tables: grid too coarse (" + std::to_string(min_dim / grid_cell) +
                     " cells across, need " + std::to_string(opts.min_cells_across) + ")");
  }

  GeomTables t;
  t.id_ = prof.id();
  t.mode_ = opts.mode;
  t.dtheta_ = theta_step;
  t.n_theta_ = static_cast<std::size_t>(std::floor(opts.theta_max / theta_step + 1e-9)) + 1;
  t.n_vol_ = opts.n_vol;
  t.grid_cell_ = grid_cell;
  t.opening_radius_ = prof.opening_radius();
  t.opening_height_ = prof.opening_height();
  t.slab_depth_ = opts.mode == Reconstruction::Planar ? prof.slab_depth() : 0.0;
  t.vol_max_ = opts.mode == Reconstruction::Revolved ? prof.revolved_volume()
                                                      : prof.area() * prof.slab_depth();
  const std::size_t total = t.n_theta_ * t.n_vol_;
  t.A_.assign(total, 0.0);
  t.dh_.assign(total, 0.0);
  t.ex_.assign(total, 0.0);
  t.ez_.assign(total, 0.0);

  auto fill_theta = [&](std::size_t i) {
    const double theta = t.theta_at(i);
    detail::LevelCurve curve = detail::watershed_levels(prof, opts.mode, theta, grid_cell);
    // Normalise raster volume to the exact body volume.
    const double scale = t.vol_max_ / curve.vol.back();
    for (double& v : curve.vol) v *= scale;
    std::size_t k = 0;
    for (std::size_t j = 0; j < t.n_vol_; ++j) {
      const double v = t.vol_at(j);
      while (k + 2 < curve.vol.size() && curve.vol[k + 1] < v) ++k;
      const double v0 = curve.vol[k], v1 = curve.vol[k + 1];
      const double a = v1 > v0 ? std::clamp((v - v0) / (v1 - v0), 0.0, 1.0) : 1.0;
      double level = curve.level[k] + a * (curve.level[k + 1] - curve.level[k]);
      if (j == 0) level = curve.level.front();
      if (j + 1 == t.n_vol_) level = curve.level.back();
      const OutflowSection s = section_at_level(t.opening_radius_, t.opening_height_, prof.slab_depth(),
                                                opts.mode, theta, level);
      const std::size_t id = t.idx(i, j);
      // An empty container has no outflow, whatever the section at its
      // lowest point looks like.
      t.A_[id] = j == 0 ? 0.0 : s.A;
      t.dh_[id] = j == 0 ? 0.0 : s.dh;
      t.ex_[id] = s.e.x();
      t.ez_[id] = s.e.z();
    }
  };

  unsigned threads = opts.threads ? opts.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, t.n_theta_));
  if (threads <= 1) {
    for (std::size_t i = 0; i < t.n_theta_; ++i) fill_theta(i);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (unsigned w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < t.n_theta_; i += threads) fill_theta(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return t;
}

}  // namespace pourplan
