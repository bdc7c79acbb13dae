#pragma once

// Two-descriptor fluid model: the fluid in the source container is summarised
// by its remaining volume and the mean outflow speed. The speed is a fitted
// cubic in the Bernoulli head speed and in the wall-slide term
// sin(max(theta - pi/2, 0)); volume is integrated by forward Euler.

#include "pourplan/common.hpp"
#include "pourplan/container_geom.hpp"

#include <Eigen/QR>
#include <json.hpp>

#include <array>
#include <fstream>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace pourplan {

struct FluidState {
  double vol = 0.0;    ///< m^3
  double v_out = 0.0;  ///< m/s
};

struct OutflowCoeffs {
  double a = 0, b = 0, c = 0, d = 0, e = 0, f = 0;

  std::array<double, 6> as_array() const { return {a, b, c, d, e, f}; }
  static OutflowCoeffs from_array(const std::array<double, 6>& v) {
    return {v[0], v[1], v[2], v[3], v[4], v[5]};
  }
  bool all_finite() const {
    for (double v : as_array()) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

inline constexpr std::array<const char*, 6> kFeatureNames = {"a:B", "b:B^2", "c:B^3",
                                                             "d:S", "e:S^2", "f:S^3"};

/// One regression tuple: the observed outflow speed after a step, the leaning
/// angle at that step, the volume before it and the head height.
struct TrainingSample {
  double v_out_next = 0.0;
  double theta_next = 0.0;
  double vol = 0.0;
  double dh = 0.0;
};

struct LeanAzimuth {
  double theta = 0.0;  ///< angle between container axis and world up, [0, pi]
  double phi = 0.0;    ///< azimuth of the tilt direction, (-pi, pi]
};

/// C(t) = gravity/2 t^2 + V_out t + E
struct QuadraticCurve {
  Vec3 gravity{0.0, 0.0, -kGravity};
  Vec3 V_out = Vec3::Zero();
  Vec3 E = Vec3::Zero();

  Vec3 at(double t) const { return 0.5 * gravity * t * t + V_out * t + E; }
  Vec3 velocity(double t) const { return gravity * t + V_out; }
};

inline double bernoulli_speed(double dh) {
  if (!(dh >= 0.0)) throw InputError("bernoulli_speed: negative head height");
  return std::sqrt(2.0 * kGravity * dh);
}

/// sin(max(theta - pi/2, 0))
inline double slide_term(double theta) { return std::sin(std::max(theta - kHalfPi, 0.0)); }

inline std::array<double, 6> model_features(double dh, double theta) {
  const double B = bernoulli_speed(dh);
  const double S = slide_term(theta);
  return {B, B * B, B * B * B, S, S * S, S * S * S};
}

/// Model value before the non-negativity clamp.
inline double outflow_speed_raw(const OutflowCoeffs& k, double theta, double dh) {
  const auto f = model_features(dh, theta);
  const auto c = k.as_array();
  double v = 0.0;
  for (std::size_t i = 0; i < 6; ++i) v += c[i] * f[i];
  return v;
}

inline double outflow_speed(const OutflowCoeffs& k, double theta, double vol, const GeomTables& tables) {
  return std::max(0.0, outflow_speed_raw(k, theta, tables.lookup(theta, vol).dh));
}

struct StepCounters {
  std::size_t speed_clamps = 0;   ///< model produced a negative speed
  std::size_t volume_clamps = 0;  ///< Euler step overshot an empty container
};

/// One forward-Euler step of the fluid state under the next leaning angle.
inline FluidState step(const FluidState& s, double theta_next, double dt, const GeomTables& tables,
                       const OutflowCoeffs& k, StepCounters* counters = nullptr) {
  if (!(dt > 0.0)) throw InputError("step: dt must be positive");
  const GeomSample g = tables.lookup(theta_next, s.vol);
  const double raw = outflow_speed_raw(k, theta_next, g.dh);
  const double v = std::max(0.0, raw);
  double vol = s.vol - g.A * v * dt;
  if (counters) {
    if (raw < 0.0) ++counters->speed_clamps;
    if (vol < 0.0) ++counters->volume_clamps;
  }
  return {std::max(0.0, vol), v};
}

struct FluidTrajectory {
  std::vector<FluidState> states;
  StepCounters counters;
};

/// Predicts the fluid trajectory for a sequence of leaning angles; states[0]
/// is state0 unchanged and states[i] follows from states[i-1] and thetas[i].
inline FluidTrajectory rollout(const FluidState& state0, std::span<const double> thetas, double dt,
                               const GeomTables& tables, const OutflowCoeffs& k) {
  if (!(state0.vol > 0.0)) throw InputError("rollout: initial volume must be positive");
  FluidTrajectory out;
  out.states.reserve(thetas.size());
  if (thetas.empty()) return out;
  out.states.push_back(state0);
  for (std::size_t i = 1; i < thetas.size(); ++i) {
    out.states.push_back(step(out.states.back(), thetas[i], dt, tables, k, &out.counters));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Regression

enum class HeadSource {
  Measured,  ///< use the sample's observed dh
  Tables,    ///< use dh(theta_next, vol) from the lookup tables
};

struct FitResult {
  OutflowCoeffs coeffs;
  double rmse = 0.0;
  std::size_t n_samples = 0;
};

inline double sample_head(const TrainingSample& s, const GeomTables* tables, HeadSource src) {
  if (src == HeadSource::Tables) {
    if (!tables) throw InputError("fit: table head source needs tables");
    return tables->lookup(s.theta_next, s.vol).dh;
  }
  return s.dh;
}

/// Least-squares fit of the six model coefficients by column-pivoted
/// Householder QR.
inline FitResult fit_coefficients(std::span<const TrainingSample> samples, const GeomTables* tables = nullptr,
                                  HeadSource src = HeadSource::Measured) {
  if (samples.size() < 6) {
    throw InputError("fit: insufficient samples (" + std::to_string(samples.size()) + " < 6)");
  }
  const auto n = static_cast<Eigen::Index>(samples.size());
  MatX X(n, 6);
  VecX y(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& s = samples[static_cast<std::size_t>(r)];
    const auto f = model_features(sample_head(s, tables, src), s.theta_next);
    for (int c = 0; c < 6; ++c) X(r, c) = f[static_cast<std::size_t>(c)];
    y(r) = s.v_out_next;
  }
  // Column scaling keeps the rank threshold meaningful for tiny cubic terms.
  VecX scale(6);
  for (int c = 0; c < 6; ++c) {
    const double nrm = X.col(c).norm();
    scale(c) = nrm > 0 ? nrm : 1.0;
    X.col(c) /= scale(c);
  }
  Eigen::ColPivHouseholderQR<MatX> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < 6) {
    std::string cols;
    const auto& perm = qr.colsPermutation().indices();
    for (Eigen::Index k = qr.rank(); k < 6; ++k) {
      if (!cols.empty()) cols += ", ";
      cols += kFeatureNames[static_cast<std::size_t>(perm(k))];
    }
    throw ComputeError("fit: rank-deficient design matrix; deficient feature columns: " + cols);
  }
  VecX beta = qr.solve(y);
  for (int c = 0; c < 6; ++c) beta(c) /= scale(c);
  FitResult res;
  res.coeffs = OutflowCoeffs::from_array({beta(0), beta(1), beta(2), beta(3), beta(4), beta(5)});
  double sse = 0.0;
  for (const auto& s : samples) {
    const double r = s.v_out_next - outflow_speed_raw(res.coeffs, s.theta_next, sample_head(s, tables, src));
    sse += r * r;
  }
  res.rmse = std::sqrt(sse / static_cast<double>(samples.size()));
  res.n_samples = samples.size();
  return res;
}

// ---------------------------------------------------------------------------
// Free-flight curve

/// Outflow direction in the azimuth-free heading frame: horizontal below
/// 90 degrees, along the leant axis beyond.
inline Vec3 outflow_direction_local(double theta) {
  const double t = std::max(theta, kHalfPi);
  return {std::sin(t), 0.0, std::cos(t)};
}

inline QuadraticCurve flight_curve(const FluidState& state, const LeanAzimuth& lean, const Vec3& container_origin,
                                   const GeomTables& tables) {
  if (!(state.v_out >= 0.0)) throw InputError("flight_curve: negative outflow speed");
  const Mat3 Rz = rot_z(lean.phi);
  const GeomSample g = tables.lookup(lean.theta, state.vol);
  QuadraticCurve c;
  c.V_out = Rz * (state.v_out * outflow_direction_local(lean.theta));
  c.E = Rz * g.e + container_origin;
  return c;
}

inline QuadraticCurve flight_curve(const FluidState& state, const LeanAzimuth& lean, const Pose& container_pose,
                                   const GeomTables& tables) {
  return flight_curve(state, lean, Vec3(container_pose.translation()), tables);
}

/// Smallest t >= 0 at which the curve is level with `target`.
inline std::optional<double> time_to_altitude(const QuadraticCurve& c, const Vec3& target) {
  const Vec3 up = -c.gravity.normalized();
  const double g = c.gravity.norm();
  const double h0 = up.dot(c.E - target);
  const double vz = up.dot(c.V_out);
  if (h0 == 0.0) return 0.0;
  // h(t) = h0 + vz t - g/2 t^2
  const double disc = vz * vz + 2.0 * g * h0;
  if (disc < 0.0) return std::nullopt;
  const double sq = std::sqrt(disc);
  // Roots (vz -+ sq) / g, written to avoid cancellation.
  const double q = vz >= 0 ? vz + sq : vz - sq;
  double r1 = q / g;
  double r2 = q != 0.0 ? -2.0 * h0 / q : r1;
  if (r1 > r2) std::swap(r1, r2);
  if (r1 >= 0.0) return r1;
  if (r2 >= 0.0) return r2;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Files

inline void save_coefficients(const std::string& path, const OutflowCoeffs& k, const std::string& container_id,
                              const std::string& material, double rmse, std::size_t n_samples,
                              HeadSource src = HeadSource::Measured) {
  nlohmann::json j = {{"container_id", container_id},
                      {"material", material},
                      {"coefficients", {{"a", k.a}, {"b", k.b}, {"c", k.c}, {"d", k.d}, {"e", k.e}, {"f", k.f}}},
                      {"training_rmse", rmse},
                      {"n_samples", n_samples},
                      {"head_source", src == HeadSource::Tables ? "tables" : "measured"}};
  std::ofstream out(path);
  if (!out) throw InputError("cannot write coefficients file: " + path);
  out << std::setprecision(17) << j.dump(2) << "\n";
}

struct CoefficientFile {
  OutflowCoeffs coeffs;
  std::string container_id;
  std::string material;
  double training_rmse = 0.0;
  HeadSource head_source = HeadSource::Measured;
};

inline CoefficientFile load_coefficients(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open coefficients file: " + path);
  try {
    nlohmann::json j;
    in >> j;
    CoefficientFile f;
    const auto& c = j.at("coefficients");
    f.coeffs = {c.at("a").get<double>(), c.at("b").get<double>(), c.at("c").get<double>(),
                c.at("d").get<double>(), c.at("e").get<double>(), c.at("f").get<double>()};
    f.container_id = j.value("container_id", std::string());
    f.material = j.value("material", std::string());
    f.training_rmse = j.value("training_rmse", 0.0);
    f.head_source = j.value("head_source", std::string("measured")) == "tables" ? HeadSource::Tables
                                                                                 : HeadSource::Measured;
    if (!f.coeffs.all_finite()) throw InputError("coefficients file has non-finite values: " + path);
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("coefficients " + path + ": " + e.what());
  }
}

/// A training sample plus bookkeeping from the extractor.
struct SampleRecord {
  double t = 0.0;
  TrainingSample sample;
  bool linear_fit = false;
};

inline void save_samples_csv(const std::string& path, std::span<const SampleRecord> rows) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write samples file: " + path);
  out << "t[s],v_out_next[m/s],theta_next[rad],vol[m3],dh[m],linear_fit\n";
  out << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.t << ',' << r.sample.v_out_next << ',' << r.sample.theta_next << ',' << r.sample.vol << ','
        << r.sample.dh << ',' << (r.linear_fit ? 1 : 0) << '\n';
  }
}

/// Reads a samples CSV by column name; the four model columns are required,
/// `t` and `linear_fit` are optional.
inline std::vector<SampleRecord> load_samples_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open samples file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw InputError("empty samples file: " + path);
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  auto strip_unit = [](std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    const auto p = s.find('[');
    return p == std::string::npos ? s : s.substr(0, p);
  };
  const auto header = split(line);
  auto col = [&](const std::string& name, bool required) -> int {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (strip_unit(header[i]) == name) return static_cast<int>(i);
    }
    if (required) throw InputError("samples file " + path + " lacks column '" + name + "'");
    return -1;
  };
  const int cv = col("v_out_next", true), ct = col("theta_next", true), cvol = col("vol", true),
            cdh = col("dh", true), ctime = col("t", false), cflag = col("linear_fit", false);
  std::vector<SampleRecord> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split(line);
    try {
      auto at = [&](int c) { return std::stod(cells.at(static_cast<std::size_t>(c))); };
      SampleRecord r;
      r.sample = {at(cv), at(ct), at(cvol), at(cdh)};
      if (ctime >= 0) r.t = at(ctime);
      if (cflag >= 0) r.linear_fit = at(cflag) != 0.0;
      rows.push_back(r);
    } catch (const std::exception&) {
      throw InputError("samples file " + path + ": malformed line " + std::to_string(lineno));
    }
  }
  return rows;
}

}  // namespace pourplan
