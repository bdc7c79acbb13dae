// pourplan command-line front end.

#include <CLI11.hpp>
#include <openssl/evp.h>
#include <openssl/opensslv.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "pourplan/pipeline.hpp"

namespace {

using namespace pourplan;
using json = nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitCompute = 1;
constexpr int kExitUsage = 2;

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read for digest: " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw ComputeError("sha256: digest init failed");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

// Outputs of one command. They are removed again unless the command commits.
class Artifacts {
 public:
  explicit Artifacts(std::string command) : command_(std::move(command)) {}
  Artifacts(const Artifacts&) = delete;
  Artifacts& operator=(const Artifacts&) = delete;
  ~Artifacts() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& p : outputs_) std::filesystem::remove(p, ec);
    if (!outputs_.empty()) std::filesystem::remove(manifest_path(), ec);
  }

  void input(const std::string& path) { inputs_.push_back(path); }
  const std::string& output(const std::string& path) {
    if (path.empty()) throw InputError(command_ + ": empty output path");
    outputs_.push_back(path);
    return outputs_.back();
  }
  json& config() { return config_; }

  // Writes <first output>.manifest.json and keeps the outputs.
  void commit(double seconds) {
    json ins = json::array(), outs = json::array();
    for (const auto& p : inputs_) ins.push_back({{"path", p}, {"sha256", sha256_file(p)}});
    for (const auto& p : outputs_) outs.push_back({{"path", p}, {"sha256", sha256_file(p)}});
    std::ostringstream eigen;
    eigen << EIGEN_WORLD_VERSION << '.' << EIGEN_MAJOR_VERSION << '.' << EIGEN_MINOR_VERSION;
    const json manifest = {{"command", command_},
                           {"inputs", ins},
                           {"outputs", outs},
                           {"config", config_},
                           {"versions",
                            {{"pourplan", kVersion},
                             {"eigen", eigen.str()},
                             {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                                   std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                                   std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                             {"openssl", OPENSSL_VERSION_TEXT}}},
                           {"timing", {{"seconds", seconds}}}};
    if (!outputs_.empty()) {
      std::ofstream out(manifest_path());
      if (!out) throw InputError("cannot write manifest: " + manifest_path());
      out << manifest.dump(2) << '\n';
      if (!out) throw InputError("failed writing manifest: " + manifest_path());
    }
    committed_ = true;
  }

 private:
  std::string manifest_path() const { return outputs_.front() + ".manifest.json"; }

  std::string command_;
  std::vector<std::string> inputs_, outputs_;
  json config_ = json::object();
  bool committed_ = false;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

Reconstruction parse_mode(const std::string& s) {
  if (s == "planar") return Reconstruction::Planar;
  if (s == "revolved") return Reconstruction::Revolved;
  throw InputError("mode must be 'planar' or 'revolved'");
}

std::string mode_name(Reconstruction m) { return m == Reconstruction::Planar ? "planar" : "revolved"; }

// Tables, coefficients and profile must all describe the same container.
void check_container_ids(const std::string& command, const std::string& tables_id, const std::string& coeffs_id,
                         const std::string& profile_id = {}) {
  if (!coeffs_id.empty() && coeffs_id != tables_id) {
    throw InputError(command + ": coefficients are for container '" + coeffs_id + "' but tables are for '" +
                     tables_id + "'");
  }
  if (!profile_id.empty() && profile_id != tables_id) {
    throw InputError(command + ": profile is container '" + profile_id + "' but tables are for '" + tables_id + "'");
  }
}

// Loads a problem file and records it and everything it references as inputs.
ProblemFile open_problem(Artifacts& art, const std::string& path) {
  ProblemFile pf = load_problem_file(path);
  for (const auto* p : {&pf.path, &pf.robot_path, &pf.world_path, &pf.profile_path, &pf.tables_path, &pf.coeffs_path}) {
    art.input(*p);
  }
  return pf;
}

void write_csv_header(std::ostream& out, const std::vector<std::string>& cols) {
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  out.precision(17);
}

// ---------------------------------------------------------------------------
// Subcommands

struct TablesOpts {
  std::string profile, out, mode = "revolved";
  double theta_step = deg2rad(1.0), grid_cell = 0.0005, theta_max = kPi;
  std::size_t n_vol = 201;
  unsigned threads = 0;
};

int run_tables(const TablesOpts& o) {
  Stopwatch sw;
  Artifacts art("tables");
  art.input(o.profile);
  const ContainerProfile prof = load_profile_file(o.profile);
  TableOptions opt;
  opt.mode = parse_mode(o.mode);
  opt.theta_max = o.theta_max;
  opt.n_vol = o.n_vol;
  opt.threads = o.threads;
  const GeomTables t = build_tables(prof, o.theta_step, o.grid_cell, opt);
  t.save(art.output(o.out));
  art.config() = {{"profile", o.profile},       {"mode", mode_name(opt.mode)}, {"theta_step_rad", o.theta_step},
                  {"grid_cell_m", o.grid_cell}, {"theta_max_rad", o.theta_max}, {"n_vol", o.n_vol}};
  art.commit(sw.seconds());
  std::cout << "tables: " << prof.id() << ", " << t.n_theta() << " angles x " << t.n_vol() << " volumes, "
            << mode_name(t.mode()) << " -> " << o.out << '\n';
  return kExitOk;
}

struct SimulateOpts {
  std::string profile, motion, config, out, motion_out;
  double theta_max = deg2rad(120.0), ramp_time = 3.0, hold_before = 0.2, hold_after = 0.5;
  double pivot_x = 0.0, pivot_z = 0.0;
  double duration = -1.0, fill = -1.0;
  std::uint64_t seed = 0;
};

int run_simulate(const SimulateOpts& o) {
  Stopwatch sw;
  Artifacts art("simulate");
  art.input(o.profile);
  const ContainerProfile prof = load_profile_file(o.profile);
  sim::SimConfig cfg;
  if (!o.config.empty()) {
    art.input(o.config);
    cfg = sim::SimConfig::from_json(detail::read_json_file(o.config, "sim config"));
  }
  cfg.seed = o.seed;
  if (o.fill > 0.0) cfg.fill = o.fill;

  json motion_cfg;
  sim::Motion motion = [&] {
    if (!o.motion.empty()) {
      art.input(o.motion);
      motion_cfg = {{"file", o.motion}};
      return sim::load_motion_csv(o.motion);
    }
    sim::PourSpec ps;
    ps.theta_max = o.theta_max;
    ps.ramp_time = o.ramp_time;
    ps.hold_before = o.hold_before;
    ps.hold_after = o.hold_after;
    ps.pivot = Vec2(o.pivot_x, o.pivot_z);
    motion_cfg = {{"theta_max_rad", ps.theta_max}, {"ramp_time_s", ps.ramp_time}, {"hold_before_s", ps.hold_before},
                  {"hold_after_s", ps.hold_after}, {"pivot_m", {ps.pivot.x(), ps.pivot.y()}}};
    return sim::pour_motion(prof, ps);
  }();
  cfg.duration = o.duration > 0.0 ? o.duration : motion.end() - motion.start();

  const sim::SimRun run = sim::simulate_pour(prof, motion, cfg);
  sim::save_run(art.output(o.out), run);
  if (!o.motion_out.empty()) sim::save_motion_csv(art.output(o.motion_out), motion);
  art.config() = {{"profile", o.profile}, {"motion", motion_cfg}, {"sim", cfg.to_json()}};
  art.commit(sw.seconds());
  std::cout << "simulate: " << run.frames.size() << " frames, " << run.frames.front().pos.size() << " particles, "
            << run.stats.substeps << " substeps in " << run.stats.seconds << " s -> " << o.out << '\n';
  return kExitOk;
}

struct ExtractOpts {
  std::string frames, out;
};

int run_extract(const ExtractOpts& o) {
  Stopwatch sw;
  Artifacts art("extract");
  art.input(o.frames);
  const sim::SimRun run = sim::load_run(o.frames);
  const auto rows = sim::extract_training_samples(run);
  save_samples_csv(art.output(o.out), rows);
  art.config() = {{"frames", o.frames}, {"container_id", run.container_id}};
  art.commit(sw.seconds());
  std::cout << "extract: " << rows.size() << " samples from " << run.frames.size() << " frames -> " << o.out << '\n';
  return kExitOk;
}

struct FitOpts {
  std::vector<std::string> samples;
  std::string out, tables, head, container_id, material = "water";
};

int run_fit(const FitOpts& o) {
  Stopwatch sw;
  Artifacts art("fit");
  std::vector<TrainingSample> all;
  for (const auto& path : o.samples) {
    art.input(path);
    for (const auto& r : load_samples_csv(path)) all.push_back(r.sample);
  }
  GeomTables tables;
  const bool have_tables = !o.tables.empty();
  if (have_tables) {
    art.input(o.tables);
    tables = GeomTables::load(o.tables);
  }
  const std::string head = o.head.empty() ? (have_tables ? "tables" : "measured") : o.head;
  if (head != "tables" && head != "measured") throw InputError("fit: --head must be 'tables' or 'measured'");
  const HeadSource src = head == "tables" ? HeadSource::Tables : HeadSource::Measured;
  if (src == HeadSource::Tables && !have_tables) throw InputError("fit: --head tables needs --tables");
  std::string id = o.container_id;
  if (have_tables) {
    if (!id.empty() && id != tables.container_id()) {
      throw InputError("fit: --container-id '" + id + "' differs from the tables' '" + tables.container_id() + "'");
    }
    id = tables.container_id();
  }
  if (id.empty()) throw InputError("fit: give --container-id or --tables");
  const FitResult fr = fit_coefficients(all, have_tables ? &tables : nullptr, src);
  save_coefficients(art.output(o.out), fr.coeffs, id, o.material, fr.rmse, fr.n_samples, src);
  art.config() = {{"samples", o.samples}, {"head_source", head}, {"container_id", id}, {"material", o.material}};
  art.commit(sw.seconds());
  const auto k = fr.coeffs.as_array();
  std::cout << "fit: " << fr.n_samples << " samples, rmse " << fr.rmse << " m/s; coefficients";
  for (std::size_t i = 0; i < k.size(); ++i) std::cout << ' ' << kFeatureNames[i] << '=' << k[i];
  std::cout << " -> " << o.out << '\n';
  return kExitOk;
}

struct PredictOpts {
  std::string problem, trajectory, coefficients, out;
};

int run_predict(const PredictOpts& o) {
  Stopwatch sw;
  Artifacts art("predict");
  ProblemFile pf = open_problem(art, o.problem);
  std::string coeffs_id = pf.coeffs_container_id;
  if (!o.coefficients.empty()) {
    art.input(o.coefficients);
    const CoefficientFile cf = load_coefficients(o.coefficients);
    pf.problem.coeffs = cf.coeffs;
    coeffs_id = cf.container_id;
  }
  check_container_ids("predict", pf.problem.tables.container_id(), coeffs_id, pf.profile.id());
  art.input(o.trajectory);
  const TrajectoryFile tf = load_trajectory_csv(o.trajectory);
  if (tf.Q.rows() != static_cast<Eigen::Index>(pf.problem.chain.dof())) {
    throw InputError("predict: trajectory has " + std::to_string(tf.Q.rows()) + " joints, robot has " +
                     std::to_string(pf.problem.chain.dof()));
  }
  if (tf.t.size() < 2) throw InputError("predict: trajectory needs at least two rows");
  const double dt = tf.t[1] - tf.t[0];
  for (std::size_t i = 1; i < tf.t.size(); ++i) {
    if (std::abs(tf.t[i] - tf.t[i - 1] - dt) > 1e-9 * std::max(1.0, tf.t.back())) {
      throw InputError("predict: trajectory times must be evenly spaced");
    }
  }
  pf.problem.N = tf.t.size();
  const auto th = lean_angles(pf.problem, tf.Q);
  const FluidTrajectory P = rollout(pf.problem.initial, th, dt, pf.problem.tables, pf.problem.coeffs);
  {
    std::ofstream out(art.output(o.out));
    if (!out) throw InputError("cannot write prediction: " + o.out);
    write_csv_header(out, {"t[s]", "theta[rad]", "vol[m3]", "v_out[m/s]"});
    for (std::size_t i = 0; i < P.states.size(); ++i) {
      out << tf.t[i] << ',' << th[i] << ',' << P.states[i].vol << ',' << P.states[i].v_out << '\n';
    }
    if (!out) throw InputError("failed writing prediction: " + o.out);
  }
  art.config() = {{"problem", o.problem}, {"trajectory", o.trajectory}, {"dt_s", dt},
                  {"initial_volume_m3", pf.problem.initial.vol}};
  art.commit(sw.seconds());
  std::cout << "predict: " << P.states.size() << " steps, final volume " << P.states.back().vol << " m^3 -> " << o.out
            << '\n';
  return kExitOk;
}

struct PlanOpts {
  std::string problem, settings, out, report, initial;
  bool verbose = false;
};

int run_plan(const PlanOpts& o) {
  Stopwatch sw;
  Artifacts art("plan");
  const ProblemFile pf = open_problem(art, o.problem);
  check_container_ids("plan", pf.problem.tables.container_id(), pf.coeffs_container_id, pf.profile.id());
  SolverSettings set;
  if (!o.settings.empty()) {
    art.input(o.settings);
    set = load_settings_file(o.settings);
  }
  set.verbose = set.verbose || o.verbose;
  MatX Q0;
  if (!o.initial.empty()) {
    art.input(o.initial);
    Q0 = load_trajectory_csv(o.initial).Q;
  } else {
    Q0 = initial_trajectory(pf);
  }
  const PlanResult res = plan(pf.problem, set, Q0);
  save_trajectory_csv(art.output(o.out), pf.problem, res.Q, res.P.states);
  if (!o.report.empty()) {
    std::ofstream out(art.output(o.report));
    if (!out) throw InputError("cannot write report: " + o.report);
    out << res.report.to_json().dump(2) << '\n';
  }
  art.config() = {{"problem", o.problem},
                  {"N", pf.problem.N},
                  {"tau_s", pf.problem.tau},
                  {"theta_final_rad", pf.problem.theta_final},
                  {"mode", to_string(pf.problem.mode)},
                  {"weights",
                   {{"transfer", pf.problem.weights.transfer},
                    {"guide", pf.problem.weights.guide},
                    {"reg", pf.problem.weights.reg}}},
                  {"converged", res.report.converged}};
  art.commit(sw.seconds());
  std::cout << res.report.str() << '\n';
  if (!res.report.converged) std::cerr << "plan: returning the best iterate; the solver did not converge\n";
  return kExitOk;
}

struct ValidateOpts {
  std::string problem, trajectory, out, frames;
  std::uint64_t seed = 0;
};

int run_validate(const ValidateOpts& o) {
  Stopwatch sw;
  Artifacts art("validate");
  const ProblemFile pf = open_problem(art, o.problem);
  check_container_ids("validate", pf.problem.tables.container_id(), pf.coeffs_container_id, pf.profile.id());
  art.input(o.trajectory);
  const TrajectoryFile tf = load_trajectory_csv(o.trajectory);
  if (tf.Q.rows() != static_cast<Eigen::Index>(pf.problem.chain.dof())) {
    throw InputError("validate: trajectory joint count does not match the robot");
  }
  const ValidationResult v = validate_plan(pf, tf.t, tf.Q, o.seed);
  save_landing_csv(art.output(o.out), v.frames);
  if (!o.frames.empty()) sim::save_run(art.output(o.frames), v.run);
  art.config() = {{"problem", o.problem}, {"trajectory", o.trajectory}, {"seed", o.seed},
                  {"sim", v.run.config.to_json()}, {"quality", v.quality}};
  art.commit(sw.seconds());
  const auto& last = v.frames.back();
  std::cout << "validate: quality " << v.quality << " (" << last.target << " of "
            << last.held + last.free + last.target << " particles in the target, " << last.held
            << " still held) -> " << o.out << '\n';
  return kExitOk;
}

struct ReportOpts {
  std::string tables, coefficients, samples, out;
  double fill = 0.8, theta_max = deg2rad(120.0), ramp_time = 3.0;
  std::size_t steps = 100;
};

// Model traces against oracle samples, or along a synthetic lean ramp.
int run_report(const ReportOpts& o) {
  Stopwatch sw;
  Artifacts art("report");
  art.input(o.tables);
  art.input(o.coefficients);
  const GeomTables tables = GeomTables::load(o.tables);
  const CoefficientFile cf = load_coefficients(o.coefficients);
  check_container_ids("report", tables.container_id(), cf.container_id);
  std::ofstream out(art.output(o.out));
  if (!out) throw InputError("cannot write report: " + o.out);
  write_csv_header(out, {"t[s]", "theta[rad]", "vol[m3]", "dh[m]", "bernoulli[m/s]", "v_out[m/s]", "g[m/s]"});
  if (!o.samples.empty()) {
    art.input(o.samples);
    const auto rows = load_samples_csv(o.samples);
    for (const auto& r : rows) {
      const auto& s = r.sample;
      const double dh = tables.lookup(s.theta_next, s.vol).dh;
      out << r.t << ',' << s.theta_next << ',' << s.vol << ',' << dh << ',' << bernoulli_speed(dh) << ','
          << s.v_out_next << ',' << outflow_speed(cf.coeffs, s.theta_next, s.vol, tables) << '\n';
    }
    art.config() = {{"mode", "samples"}, {"samples", o.samples}};
  } else {
    if (o.steps < 2) throw InputError("report: --steps must be at least 2");
    if (!(o.fill > 0.0 && o.fill <= 1.0)) throw InputError("report: --fill must be in (0, 1]");
    if (!(o.ramp_time > 0.0)) throw InputError("report: --ramp-time must be positive");
    const double dt = o.ramp_time / static_cast<double>(o.steps - 1);
    std::vector<double> th(o.steps);
    for (std::size_t i = 0; i < o.steps; ++i) th[i] = o.theta_max * static_cast<double>(i) / static_cast<double>(o.steps - 1);
    const FluidState s0{o.fill * tables.vol_max(), 0.0};
    const FluidTrajectory P = rollout(s0, th, dt, tables, cf.coeffs);
    for (std::size_t i = 0; i < o.steps; ++i) {
      const auto& s = P.states[i];
      const double dh = tables.lookup(th[i], s.vol).dh;
      out << static_cast<double>(i) * dt << ',' << th[i] << ',' << s.vol << ',' << dh << ',' << bernoulli_speed(dh)
          << ',' << s.v_out << ',' << outflow_speed(cf.coeffs, th[i], s.vol, tables) << '\n';
    }
    art.config() = {{"mode", "ramp"},
                    {"fill", o.fill},
                    {"theta_max_rad", o.theta_max},
                    {"ramp_time_s", o.ramp_time},
                    {"steps", o.steps}};
  }
  out.close();
  if (!out) throw InputError("failed writing report: " + o.out);
  art.commit(sw.seconds());
  std::cout << "report -> " << o.out << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pourplan: pouring trajectory planning with a learned outflow model", "pourplan"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  TablesOpts to;
  auto* tables = app.add_subcommand("tables", "Build geometry lookup tables for a container profile");
  tables->add_option("--profile", to.profile, "Profile JSON")->required();
  tables->add_option("--out", to.out, "Output tables file")->required();
  tables->add_option("--mode", to.mode, "planar | revolved")->capture_default_str();
  tables->add_option("--theta-step", to.theta_step, "Lean step [rad]")->capture_default_str();
  tables->add_option("--theta-max", to.theta_max, "Largest lean [rad]")->capture_default_str();
  tables->add_option("--grid-cell", to.grid_cell, "Raster cell [m]")->capture_default_str();
  tables->add_option("--n-vol", to.n_vol, "Volume levels")->capture_default_str();
  tables->add_option("--threads", to.threads, "Worker threads, 0 = all cores")->capture_default_str();

  SimulateOpts so;
  auto* simulate = app.add_subcommand("simulate", "Run the particle simulator on a container motion");
  simulate->add_option("--profile", so.profile, "Profile JSON")->required();
  simulate->add_option("--motion", so.motion, "Motion CSV (t[s],x[m],z[m],theta[rad]); a pour ramp if omitted");
  simulate->add_option("--config", so.config, "Simulator config JSON")->envname("POURPLAN_SIM_CONFIG");
  simulate->add_option("--out", so.out, "Output frames file")->required();
  simulate->add_option("--motion-out", so.motion_out, "Also write the motion CSV used");
  simulate->add_option("--theta-max", so.theta_max, "Pour ramp: final lean [rad]")->capture_default_str();
  simulate->add_option("--ramp-time", so.ramp_time, "Pour ramp: duration [s]")->capture_default_str();
  simulate->add_option("--hold-before", so.hold_before, "Pour ramp: rest before [s]")->capture_default_str();
  simulate->add_option("--hold-after", so.hold_after, "Pour ramp: hold after [s]")->capture_default_str();
  simulate->add_option("--pivot-x", so.pivot_x, "Pour ramp: pivot x [m]")->capture_default_str();
  simulate->add_option("--pivot-z", so.pivot_z, "Pour ramp: pivot z [m]")->capture_default_str();
  simulate->add_option("--duration", so.duration, "Simulated time [s]; the motion length if omitted");
  simulate->add_option("--fill", so.fill, "Initial fill fraction; the config value if omitted");
  simulate->add_option("--seed", so.seed, "Particle jitter seed")->envname("POURPLAN_SEED")->capture_default_str();

  ExtractOpts eo;
  auto* extract = app.add_subcommand("extract", "Extract training samples from simulator frames");
  extract->add_option("--frames", eo.frames, "Frames file")->required();
  extract->add_option("--out", eo.out, "Output samples CSV")->required();

  FitOpts fo;
  auto* fit = app.add_subcommand("fit", "Fit outflow coefficients to training samples");
  fit->add_option("--samples", fo.samples, "Samples CSV files")->required();
  fit->add_option("--out", fo.out, "Output coefficients JSON")->required();
  fit->add_option("--tables", fo.tables, "Tables file (for the table head and the container id)");
  fit->add_option("--head", fo.head, "Head source: tables | measured");
  fit->add_option("--container-id", fo.container_id, "Container id when no tables are given");
  fit->add_option("--material", fo.material, "Liquid name")->capture_default_str();

  PredictOpts po;
  auto* predict = app.add_subcommand("predict", "Roll out the outflow model along a joint trajectory");
  predict->add_option("--problem", po.problem, "Problem JSON")->envname("POURPLAN_PROBLEM")->required();
  predict->add_option("--trajectory", po.trajectory, "Trajectory CSV")->required();
  predict->add_option("--coefficients", po.coefficients, "Coefficients JSON overriding the problem's");
  predict->add_option("--out", po.out, "Output fluid CSV")->required();

  PlanOpts plo;
  auto* planc = app.add_subcommand("plan", "Optimise a pouring trajectory");
  planc->add_option("--problem", plo.problem, "Problem JSON")->envname("POURPLAN_PROBLEM")->required();
  planc->add_option("--settings", plo.settings, "Solver settings JSON")->envname("POURPLAN_SETTINGS");
  planc->add_option("--initial", plo.initial, "Initial trajectory CSV; straight line to the pre-pour pose if omitted");
  planc->add_option("--out", plo.out, "Output trajectory CSV")->required();
  planc->add_option("--report", plo.report, "Output convergence report JSON");
  planc->add_flag("--verbose", plo.verbose, "Print one line per outer iteration");

  ValidateOpts vo;
  auto* validate = app.add_subcommand("validate", "Check a trajectory with the particle simulator");
  validate->add_option("--problem", vo.problem, "Problem JSON")->envname("POURPLAN_PROBLEM")->required();
  validate->add_option("--trajectory", vo.trajectory, "Trajectory CSV")->required();
  validate->add_option("--out", vo.out, "Output per-frame landing CSV")->required();
  validate->add_option("--frames", vo.frames, "Also write the simulator frames");
  validate->add_option("--seed", vo.seed, "Particle jitter seed")->envname("POURPLAN_SEED")->capture_default_str();

  ReportOpts ro;
  auto* report = app.add_subcommand("report", "Emit model traces for plotting");
  report->add_option("--tables", ro.tables, "Tables file")->required();
  report->add_option("--coefficients", ro.coefficients, "Coefficients JSON")->required();
  report->add_option("--samples", ro.samples, "Samples CSV to compare against; a lean ramp if omitted");
  report->add_option("--fill", ro.fill, "Ramp: initial fill fraction of the table volume")->capture_default_str();
  report->add_option("--theta-max", ro.theta_max, "Ramp: final lean [rad]")->capture_default_str();
  report->add_option("--ramp-time", ro.ramp_time, "Ramp: duration [s]")->capture_default_str();
  report->add_option("--steps", ro.steps, "Ramp: number of steps")->capture_default_str();
  report->add_option("--out", ro.out, "Output CSV")->required();

  if (argc > 1 && argv[1][0] != '-') {
    const std::string name = argv[1];
    bool known = false;
    for (const auto* sub : app.get_subcommands({})) known = known || sub->get_name() == name;
    if (!known) {
      std::cerr << "unknown subcommand '" << name << "'\n\n" << app.help();
      return kExitUsage;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return kExitOk;
    std::cerr << '\n' << app.help();
    return kExitUsage;
  }

  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    if (*tables) return run_tables(to);
    if (*simulate) return run_simulate(so);
    if (*extract) return run_extract(eo);
    if (*fit) return run_fit(fo);
    if (*predict) return run_predict(po);
    if (*planc) return run_plan(plo);
    if (*validate) return run_validate(vo);
    if (*report) return run_report(ro);
  } catch (const InputError& e) {
    std::cerr << "error [" << stage << "]: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error [" << stage << "]: " << e.what() << '\n';
    return kExitCompute;
  }
  std::cerr << app.help();
  return kExitUsage;
}
