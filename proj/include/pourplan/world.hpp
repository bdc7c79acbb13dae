#pragma once

// Static environment: obstacles for collision checking and the target
// container the liquid should land in.

#include "pourplan/collision.hpp"
#include "pourplan/polygon.hpp"
#include "pourplan/robot.hpp"

#include <json.hpp>

#include <fstream>
#include <string>
#include <vector>

namespace pourplan {

struct TargetSpec {
  Vec3 center = Vec3::Zero();  ///< O_T: centre of the target opening
  double opening_radius = 0.0;
  /// Interior of the target container in the world x-z plane, counter-clockwise.
  std::vector<Vec2> region;

  /// Whether a point at the opening altitude falls through the opening.
  bool catches(const Vec3& p) const {
    return std::hypot(p.x() - center.x(), p.y() - center.y()) <= opening_radius;
  }
};

struct World {
  std::vector<Obstacle> obstacles;
  TargetSpec target;
};

inline World load_world(const nlohmann::json& j) {
  try {
    World w;
    for (const auto& o : j.value("obstacles", nlohmann::json::array())) {
      w.obstacles.push_back({o.value("name", "obstacle" + std::to_string(w.obstacles.size())),
                             load_shape(o.at("shape"))});
    }
    const auto& t = j.at("target");
    w.target.center = detail::json_vec3(t.at("center"));
    w.target.opening_radius = t.at("opening_radius").get<double>();
    for (const auto& v : t.at("region")) w.target.region.emplace_back(v.at(0).get<double>(), v.at(1).get<double>());
    if (w.target.region.size() >= 2 && (w.target.region.front() - w.target.region.back()).norm() < 1e-12) {
      w.target.region.pop_back();
    }
    if (w.target.region.size() < 3) throw InputError("world: target region needs at least 3 vertices");
    if (poly::signed_area(w.target.region) < 0) std::reverse(w.target.region.begin(), w.target.region.end());
    if (!w.target.center.allFinite()) throw InputError("world: target centre must be finite");
    if (!(w.target.opening_radius > 0)) throw InputError("world: target opening radius must be positive");
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("world: ") + e.what());
  }
}

inline World load_world_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open world file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("world " + path + ": " + e.what());
  }
  return load_world(j);
}

}  // namespace pourplan
