#include "pulsetree/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "pulsetree/analysis.hpp"
#include "pulsetree/errors.hpp"

namespace pulsetree {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kSignalSamples = 35;

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

} // namespace

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t fnv1a_hash(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

RunConfig run_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("run config is not valid JSON: ") + e.what());
  }

  RunConfig cfg;
  try {
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      cfg.network_path = p.value("network", cfg.network_path);
      cfg.inlet_path = p.value("inlet", cfg.inlet_path);
      cfg.observations_path = p.value("observations", cfg.observations_path);
      cfg.artifact_dir = p.value("artifacts", cfg.artifact_dir);
      cfg.metrics_path = p.value("metrics", cfg.metrics_path);
    }
    if (j.contains("design")) {
      const auto& d = j["design"];
      cfg.n_design = d.value("n", cfg.n_design);
      cfg.design_seed = d.value("seed", cfg.design_seed);
      if (d.contains("eta_bounds")) {
        cfg.bounds.lo[0] = cfg.bounds.lo[2] = d["eta_bounds"][0].get<double>();
        cfg.bounds.hi[0] = cfg.bounds.hi[2] = d["eta_bounds"][1].get<double>();
      }
      if (d.contains("lrr_bounds")) {
        cfg.bounds.lo[1] = cfg.bounds.lo[3] = d["lrr_bounds"][0].get<double>();
        cfg.bounds.hi[1] = cfg.bounds.hi[3] = d["lrr_bounds"][1].get<double>();
      }
    }
    if (j.contains("solver")) {
      const auto& s = j["solver"];
      cfg.solver.steps_per_period = s.value("steps_per_period", cfg.solver.steps_per_period);
      cfg.solver.cfl = s.value("cfl", cfg.solver.cfl);
      cfg.solver.min_cells = s.value("min_cells", cfg.solver.min_cells);
      cfg.solver.resolution_scale = s.value("resolution_scale", cfg.solver.resolution_scale);
      cfg.solver.max_cycles = s.value("max_cycles", cfg.solver.max_cycles);
      cfg.solver.convergence_tol = s.value("convergence_tol", cfg.solver.convergence_tol);
      cfg.workers = s.value("workers", cfg.workers);
    }
    if (j.contains("emulator")) {
      const auto& e = j["emulator"];
      if (e.contains("n_pca")) {
        if (e["n_pca"].is_null())
          cfg.emulator.n_pca.reset();
        else
          cfg.emulator.n_pca = e["n_pca"].get<int>();
      }
      cfg.emulator.variance_target = e.value("variance_target", cfg.emulator.variance_target);
      cfg.emulator.gp.iterations = e.value("gp_iterations", cfg.emulator.gp.iterations);
      cfg.emulator.gp.learning_rate = e.value("gp_learning_rate", cfg.emulator.gp.learning_rate);
      cfg.emulator.gp.rel_tol = e.value("gp_rel_tol", cfg.emulator.gp.rel_tol);
      cfg.emulator.threads = e.value("threads", cfg.emulator.threads);
      cfg.holdout_fraction = e.value("holdout_fraction", cfg.holdout_fraction);
      cfg.holdout_seed = e.value("holdout_seed", cfg.holdout_seed);
      cfg.exclude_nonphys = e.value("exclude_nonphys", cfg.exclude_nonphys);
      cfg.nonphys_pressure_mmhg = e.value("nonphys_pressure_mmhg", cfg.nonphys_pressure_mmhg);
    }
    if (j.contains("mcmc")) {
      const auto& m = j["mcmc"];
      cfg.mcmc_iterations = m.value("iterations", cfg.mcmc_iterations);
      cfg.mcmc_burn_in = m.value("burn_in", cfg.mcmc_burn_in);
      cfg.mcmc_seed = m.value("seed", cfg.mcmc_seed);
      cfg.prior_kind = m.value("prior", cfg.prior_kind);
      cfg.eta_prior_mean = m.value("eta_prior_mean", cfg.eta_prior_mean);
      cfg.eta_prior_sd = m.value("eta_prior_sd", cfg.eta_prior_sd);
      cfg.lrr_prior_mean = m.value("lrr_prior_mean", cfg.lrr_prior_mean);
      cfg.lrr_prior_sd = m.value("lrr_prior_sd", cfg.lrr_prior_sd);
      cfg.noise_shape = m.value("noise_shape", cfg.noise_shape);
      cfg.noise_scale_frac = m.value("noise_scale_frac", cfg.noise_scale_frac);
      cfg.use_pde = m.value("use_pde", cfg.use_pde);
    }
    if (j.contains("propagate")) {
      const auto& p = j["propagate"];
      cfg.n_tail = p.value("n_tail", cfg.n_tail);
      cfg.propagate_seed = p.value("seed", cfg.propagate_seed);
      cfg.noise_replicates = p.value("noise_replicates", cfg.noise_replicates);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("run config schema violation: ") + e.what());
  }
  if (cfg.prior_kind != "gaussian" && cfg.prior_kind != "uniform")
    throw ValidationError("prior must be 'gaussian' or 'uniform'");
  cfg.bounds.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  return run_config_from_json_text(read_text_file(path));
}

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Design: return "design";
    case Stage::Simulate: return "simulate";
    case Stage::Train: return "train";
    case Stage::Calibrate: return "calibrate";
    case Stage::Propagate: return "propagate";
    case Stage::Analyze: return "analyze";
  }
  return "?";
}

std::vector<Stage> all_stages() {
  return {Stage::Design, Stage::Simulate, Stage::Train,
          Stage::Calibrate, Stage::Propagate, Stage::Analyze};
}

std::vector<Stage> parse_stages(const std::string& csv) {
  std::vector<Stage> stages;
  std::istringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    bool found = false;
    for (Stage s : all_stages())
      if (tok == stage_name(s)) {
        stages.push_back(s);
        found = true;
      }
    if (!found) throw UsageError("unknown stage '" + tok + "'");
  }
  if (stages.empty()) throw UsageError("no stages requested");
  std::sort(stages.begin(), stages.end());
  stages.erase(std::unique(stages.begin(), stages.end()), stages.end());
  return stages;
}

Manifest read_manifest(const std::string& artifact_dir) {
  Manifest manifest;
  const fs::path path = fs::path(artifact_dir) / "manifest.json";
  if (!fs::exists(path)) return manifest;
  json j;
  std::ifstream in(path);
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("corrupt manifest: ") + e.what());
  }
  for (const auto& [name, rec] : j["stages"].items()) {
    StageRecord r;
    r.config_hash = rec.value("config_hash", "");
    r.seed = rec.value("seed", 0ULL);
    r.version = rec.value("version", "");
    r.outputs = rec.value("outputs", std::vector<std::string>{});
    manifest[name] = std::move(r);
  }
  return manifest;
}

void write_manifest(const std::string& artifact_dir, const Manifest& manifest) {
  json j;
  j["format"] = "pulsetree-manifest";
  j["stages"] = json::object();
  for (const auto& [name, rec] : manifest) {
    j["stages"][name] = {{"config_hash", rec.config_hash},
                         {"seed", rec.seed},
                         {"version", rec.version},
                         {"outputs", rec.outputs}};
  }
  std::ofstream out(fs::path(artifact_dir) / "manifest.json");
  if (!out) throw ValidationError("cannot write manifest in " + artifact_dir);
  out << j.dump(2);
}

PreprocessResult preprocess_flows(std::span<const double> q_mpa,
                                  std::span<const double> q_lpa,
                                  std::span<const double> q_rpa, bool floor_to_zero) {
  if (q_mpa.empty() || q_mpa.size() != q_lpa.size() || q_mpa.size() != q_rpa.size())
    throw ValidationError("flow series must be non-empty and equally long");
  auto mean = [](std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  PreprocessResult res;
  const double target = mean(q_lpa) + mean(q_rpa);
  res.shift = target - mean(q_mpa);
  res.adjusted_q_mpa.assign(q_mpa.begin(), q_mpa.end());
  for (double& v : res.adjusted_q_mpa) v += res.shift;
  if (floor_to_zero) {
    const double mn = *std::min_element(res.adjusted_q_mpa.begin(), res.adjusted_q_mpa.end());
    if (mn < 0.0) {
      res.floor_shift = -mn;
      for (double& v : res.adjusted_q_mpa) v += res.floor_shift;
    }
  }
  res.conservation_gap = mean(res.adjusted_q_mpa) - target;
  return res;
}

BatchResult simulate_batch(const ArterialNetwork& net, const Eigen::MatrixXd& design,
                           const InletFlow& inlet, const SolverOptions& opts, int workers) {
  const int n = static_cast<int>(design.rows());
  if (design.cols() != 4) throw ValidationError("design must have 4 columns");

  BatchResult batch;
  batch.outputs.resize(n, 4 * kSignalSamples);
  batch.outputs.setConstant(std::numeric_limits<double>::quiet_NaN());
  batch.converged.assign(static_cast<std::size_t>(n), 0);
  batch.failed.assign(static_cast<std::size_t>(n), 0);
  batch.max_pressure_mmhg.assign(static_cast<std::size_t>(n), 0.0);
  batch.cycles.assign(static_cast<std::size_t>(n), 0);

  int nthreads = workers > 0 ? workers : static_cast<int>(std::thread::hardware_concurrency());
  nthreads = std::max(1, std::min(nthreads, n));

  std::atomic<int> next{0};
  auto work = [&]() {
    for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      const ParameterVector theta = ParameterVector::from_array(
          {design(i, 0), design(i, 1), design(i, 2), design(i, 3)});
      try {
        const SimulationOutput sim = simulate(net, theta, inlet, opts);
        batch.outputs.row(i) = model_vector_140(sim).transpose();
        batch.converged[static_cast<std::size_t>(i)] = sim.converged ? 1 : 0;
        batch.max_pressure_mmhg[static_cast<std::size_t>(i)] = sim.max_pressure_mmhg;
        batch.cycles[static_cast<std::size_t>(i)] = sim.cycles_run;
      } catch (const std::exception&) {
        batch.failed[static_cast<std::size_t>(i)] = 1;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < nthreads; ++t) pool.emplace_back(work);
  for (auto& th : pool) th.join();
  return batch;
}

void write_simulation_csv(const std::string& path, const SimulationOutput& sim, double period,
                          const std::string& header_comment) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write simulation CSV: " + path);
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  out << "# converged: " << (sim.converged ? 1 : 0) << " cycles: " << sim.cycles_run << "\n";
  out << "t,p_mmHg,q_lpa,q_rpa,a_cm2\n";
  const int n = static_cast<int>(sim.mpa_pressure.size());
  for (int i = 0; i < n; ++i) {
    out << fmt(period * i / n) << ',' << fmt(sim.mpa_pressure[static_cast<std::size_t>(i)]) << ','
        << fmt(sim.lpa_flow[static_cast<std::size_t>(i)]) << ','
        << fmt(sim.rpa_flow[static_cast<std::size_t>(i)]) << ','
        << fmt(sim.mpa_area[static_cast<std::size_t>(i)]) << "\n";
  }
}

void write_design_csv(const std::string& path, const DesignMatrix& design,
                      const std::string& header_comment) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write design CSV: " + path);
  if (!header_comment.empty()) out << header_comment;
  out << "eta_left,lrr_left,eta_right,lrr_right\n";
  for (int i = 0; i < design.theta.rows(); ++i)
    out << fmt(design.theta(i, 0)) << ',' << fmt(design.theta(i, 1)) << ','
        << fmt(design.theta(i, 2)) << ',' << fmt(design.theta(i, 3)) << "\n";
}

DesignMatrix read_design_csv(const std::string& path, const ParameterBounds& bounds) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open design CSV: " + path);
  std::vector<std::array<double, 4>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("eta_left", 0) == 0) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    std::array<double, 4> r{};
    if (ss >> r[0] >> r[1] >> r[2] >> r[3]) rows.push_back(r);
  }
  if (rows.empty()) throw ValidationError("design CSV has no rows: " + path);
  DesignMatrix d;
  d.bounds = bounds;
  d.theta.resize(static_cast<int>(rows.size()), 4);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < 4; ++j) d.theta(static_cast<int>(i), j) = rows[i][static_cast<std::size_t>(j)];
  return d;
}

void write_outputs_csv(const std::string& path, const BatchResult& batch,
                       double nonphys_pressure_mmhg, const std::string& header_comment) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write outputs CSV: " + path);
  if (!header_comment.empty()) out << header_comment;
  out << "row,converged,failed,tagged,cycles,max_pressure_mmhg";
  const char* prefixes[4] = {"p", "qlpa", "qrpa", "area"};
  for (int s = 0; s < 4; ++s)
    for (int i = 0; i < kSignalSamples; ++i) out << ',' << prefixes[s] << (i < 10 ? "0" : "") << i;
  out << "\n";
  for (int i = 0; i < batch.outputs.rows(); ++i) {
    const bool tagged = !batch.converged[static_cast<std::size_t>(i)] ||
                        batch.max_pressure_mmhg[static_cast<std::size_t>(i)] > nonphys_pressure_mmhg;
    out << i << ',' << static_cast<int>(batch.converged[static_cast<std::size_t>(i)]) << ','
        << static_cast<int>(batch.failed[static_cast<std::size_t>(i)]) << ',' << (tagged ? 1 : 0)
        << ',' << batch.cycles[static_cast<std::size_t>(i)] << ','
        << fmt(batch.max_pressure_mmhg[static_cast<std::size_t>(i)]);
    for (int j = 0; j < batch.outputs.cols(); ++j) out << ',' << fmt(batch.outputs(i, j));
    out << "\n";
  }
}

BatchResult read_outputs_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open outputs CSV: " + path);
  std::string line;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("row,", 0) == 0) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    std::vector<double> r;
    double v;
    while (ss >> v) r.push_back(v);
    if (r.size() == 6 + 4 * kSignalSamples) rows.push_back(std::move(r));
  }
  if (rows.empty()) throw ValidationError("outputs CSV has no rows: " + path);

  BatchResult batch;
  const int n = static_cast<int>(rows.size());
  batch.outputs.resize(n, 4 * kSignalSamples);
  batch.converged.resize(static_cast<std::size_t>(n));
  batch.failed.resize(static_cast<std::size_t>(n));
  batch.max_pressure_mmhg.resize(static_cast<std::size_t>(n));
  batch.cycles.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    batch.converged[static_cast<std::size_t>(i)] = r[1] != 0.0 ? 1 : 0;
    batch.failed[static_cast<std::size_t>(i)] = r[2] != 0.0 ? 1 : 0;
    batch.cycles[static_cast<std::size_t>(i)] = static_cast<int>(r[4]);
    batch.max_pressure_mmhg[static_cast<std::size_t>(i)] = r[5];
    for (int j = 0; j < 4 * kSignalSamples; ++j)
      batch.outputs(i, j) = r[static_cast<std::size_t>(6 + j)];
  }
  return batch;
}

namespace {

json bounds_json(const ParameterBounds& b) {
  return {{"lo", std::vector<double>(b.lo.begin(), b.lo.end())},
          {"hi", std::vector<double>(b.hi.begin(), b.hi.end())}};
}

json solver_json(const SolverOptions& s) {
  return {{"steps_per_period", s.steps_per_period},
          {"max_steps_per_period", s.max_steps_per_period},
          {"cfl", s.cfl},
          {"min_cells", s.min_cells},
          {"resolution_scale", s.resolution_scale},
          {"max_cycles", s.max_cycles},
          {"convergence_tol", s.convergence_tol},
          {"junction_tol", s.junction_tol},
          {"sample_count", s.sample_count}};
}

std::string file_hash(const std::string& path) {
  return hex64(fnv1a_hash(read_text_file(path)));
}

struct StageRunner {
  const RunConfig& cfg;
  Manifest& manifest;
  bool force;
  fs::path dir;

  std::string artifact(const std::string& name) const { return (dir / name).string(); }

  const StageRecord& require_stage(const std::string& name, const std::string& missing) const {
    auto it = manifest.find(name);
    if (it == manifest.end()) throw ValidationError("missing artifact: " + missing);
    for (const auto& out : it->second.outputs)
      if (!fs::exists(dir / out)) throw ValidationError("missing artifact: " + out);
    return it->second;
  }

  /// Returns true when the stage must run; false for a clean no-op.
  bool plan(const std::string& name, const std::string& hash,
            const std::vector<std::string>& outputs) const {
    auto it = manifest.find(name);
    if (it == manifest.end()) return true;
    const bool outputs_exist = std::all_of(outputs.begin(), outputs.end(), [&](const auto& o) {
      return fs::exists(dir / o);
    });
    if (it->second.config_hash == hash && outputs_exist) return false;
    if (it->second.config_hash != hash && !force)
      throw ValidationError("config-hash mismatch for stage '" + name +
                            "' (use --force to rebuild)");
    return true;
  }

  void record(const std::string& name, const std::string& hash, std::uint64_t seed,
              std::vector<std::string> outputs, bool ran) {
    StageRecord rec;
    rec.config_hash = hash;
    rec.seed = seed;
    rec.version = kVersion;
    rec.outputs = std::move(outputs);
    rec.skipped = !ran;
    manifest[name] = std::move(rec);
  }

  std::string comment_block(const std::string& stage, const std::string& hash,
                            std::uint64_t seed) const {
    std::ostringstream ss;
    ss << "# stage: " << stage << "\n# seed: " << seed << "\n# config_hash: " << hash
       << "\n# version: " << kVersion << "\n";
    return ss.str();
  }

  void design() {
    json spec = {{"n", cfg.n_design}, {"seed", cfg.design_seed}, {"bounds", bounds_json(cfg.bounds)}};
    const std::string hash = hex64(fnv1a_hash(spec.dump()));
    const std::vector<std::string> outputs = {"design.csv"};
    const bool run = plan("design", hash, outputs);
    if (run) {
      const DesignMatrix d = lhs_design(cfg.bounds, cfg.n_design, cfg.design_seed);
      write_design_csv(artifact("design.csv"), d, comment_block("design", hash, cfg.design_seed));
    }
    record("design", hash, cfg.design_seed, outputs, run);
  }

  void simulate_stage() {
    const auto& up = require_stage("design", "design");
    if (cfg.network_path.empty() || cfg.inlet_path.empty())
      throw ValidationError("simulate needs paths.network and paths.inlet");
    json spec = {{"design", up.config_hash},
                 {"network", file_hash(cfg.network_path)},
                 {"inlet", file_hash(cfg.inlet_path)},
                 {"solver", solver_json(cfg.solver)}};
    const std::string hash = hex64(fnv1a_hash(spec.dump()));
    const std::vector<std::string> outputs = {"outputs.csv"};
    const bool run = plan("simulate", hash, outputs);
    if (run) {
      const ArterialNetwork net = parse_network(read_text_file(cfg.network_path));
      const InletFlow inlet = read_inlet_csv(cfg.inlet_path, net.period);
      const DesignMatrix d = read_design_csv(artifact("design.csv"), cfg.bounds);
      const BatchResult batch = simulate_batch(net, d.theta, inlet, cfg.solver, cfg.workers);
      write_outputs_csv(artifact("outputs.csv"), batch, cfg.nonphys_pressure_mmhg,
                        comment_block("simulate", hash, cfg.design_seed));
    }
    record("simulate", hash, cfg.design_seed, outputs, run);
  }

  void train() {
    const auto& up = require_stage("simulate", "outputs");
    json spec = {{"simulate", up.config_hash},
                 {"n_pca", cfg.emulator.n_pca ? json(*cfg.emulator.n_pca) : json(nullptr)},
                 {"variance_target", cfg.emulator.variance_target},
                 {"gp_iterations", cfg.emulator.gp.iterations},
                 {"gp_learning_rate", cfg.emulator.gp.learning_rate},
                 {"gp_rel_tol", cfg.emulator.gp.rel_tol},
                 {"holdout_fraction", cfg.holdout_fraction},
                 {"holdout_seed", cfg.holdout_seed},
                 {"exclude_nonphys", cfg.exclude_nonphys},
                 {"nonphys_pressure_mmhg", cfg.nonphys_pressure_mmhg}};
    const std::string hash = hex64(fnv1a_hash(spec.dump()));
    const std::vector<std::string> outputs = {"emulator.json", "emulator_metrics.json"};
    const bool run = plan("train", hash, outputs);
    if (run) run_training(hash);
    record("train", hash, cfg.holdout_seed, outputs, run);
  }

  void run_training(const std::string& hash) {
    const DesignMatrix full_design = read_design_csv(artifact("design.csv"), cfg.bounds);
    const BatchResult batch = read_outputs_csv(artifact("outputs.csv"));
    if (full_design.theta.rows() != batch.outputs.rows())
      throw ValidationError("design and outputs artifacts disagree on row count");

    // Failed rows never train; tagged rows are retained unless excluded.
    std::vector<int> usable;
    for (int i = 0; i < batch.outputs.rows(); ++i) {
      if (batch.failed[static_cast<std::size_t>(i)]) continue;
      const bool tagged = !batch.converged[static_cast<std::size_t>(i)] ||
                          batch.max_pressure_mmhg[static_cast<std::size_t>(i)] > cfg.nonphys_pressure_mmhg;
      if (tagged && cfg.exclude_nonphys) continue;
      usable.push_back(i);
    }
    if (static_cast<int>(usable.size()) < 10)
      throw ValidationError("too few usable training rows");

    std::mt19937_64 rng(cfg.holdout_seed);
    std::shuffle(usable.begin(), usable.end(), rng);
    const int n_test = static_cast<int>(std::floor(cfg.holdout_fraction * usable.size()));
    std::vector<int> test(usable.begin(), usable.begin() + n_test);
    std::vector<int> train_rows(usable.begin() + n_test, usable.end());
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(test.begin(), test.end());

    DesignMatrix d;
    d.bounds = cfg.bounds;
    d.theta.resize(static_cast<int>(train_rows.size()), 4);
    Eigen::MatrixXd y(static_cast<int>(train_rows.size()), batch.outputs.cols());
    for (std::size_t i = 0; i < train_rows.size(); ++i) {
      d.theta.row(static_cast<int>(i)) = full_design.theta.row(train_rows[i]);
      y.row(static_cast<int>(i)) = batch.outputs.row(train_rows[i]);
    }

    const EmulatorModel model = train_emulator(d, y, cfg.emulator);
    save_emulator(artifact("emulator.json"), model);

    json metrics;
    metrics["stage"] = "train";
    metrics["config_hash"] = hash;
    metrics["seed"] = cfg.holdout_seed;
    metrics["n_train"] = train_rows.size();
    metrics["n_test"] = test.size();
    metrics["n_pca"] = model.pca.n_components;
    metrics["explained_variance"] = model.pca.cumulative_explained();
    json nll = json::array();
    for (const auto& gp : model.gps)
      nll.push_back({{"initial", gp.initial_nll}, {"final", gp.final_nll},
                     {"iterations", gp.iterations_run}});
    metrics["gp_nll"] = std::move(nll);

    if (!test.empty()) {
      const char* signals[4] = {"pressure", "lpa_flow", "rpa_flow", "area"};
      std::array<double, 4> sq{}, range{};
      for (int s = 0; s < 4; ++s) {
        const auto block = y.middleCols(s * kSignalSamples, kSignalSamples);
        range[static_cast<std::size_t>(s)] = block.maxCoeff() - block.minCoeff();
      }
      for (int row : test) {
        const ParameterVector theta = ParameterVector::from_array(
            {full_design.theta(row, 0), full_design.theta(row, 1), full_design.theta(row, 2),
             full_design.theta(row, 3)});
        const Eigen::VectorXd pred = predict(model, theta).mean140;
        for (int s = 0; s < 4; ++s)
          sq[static_cast<std::size_t>(s)] +=
              (pred.segment(s * kSignalSamples, kSignalSamples) -
               batch.outputs.row(row).segment(s * kSignalSamples, kSignalSamples).transpose())
                  .squaredNorm();
      }
      json rmse;
      for (int s = 0; s < 4; ++s) {
        const double denom = static_cast<double>(test.size()) * kSignalSamples;
        const double r = std::sqrt(sq[static_cast<std::size_t>(s)] / denom);
        rmse[signals[s]] = {{"rmse", r},
                            {"range", range[static_cast<std::size_t>(s)]},
                            {"relative", range[static_cast<std::size_t>(s)] > 0.0
                                             ? r / range[static_cast<std::size_t>(s)]
                                             : 0.0}};
      }
      metrics["holdout"] = std::move(rmse);
    }
    std::ofstream out(artifact("emulator_metrics.json"));
    out << metrics.dump(2);
  }

  PriorSpec prior_from_config() const {
    if (cfg.prior_kind == "uniform") return PriorSpec::uniform(cfg.bounds);
    PriorSpec prior = PriorSpec::gaussian_defaults(cfg.bounds);
    const std::array<double, 4> means = {cfg.eta_prior_mean, cfg.lrr_prior_mean,
                                         cfg.eta_prior_mean, cfg.lrr_prior_mean};
    const std::array<double, 4> sds = {cfg.eta_prior_sd, cfg.lrr_prior_sd,
                                       cfg.eta_prior_sd, cfg.lrr_prior_sd};
    for (int i = 0; i < 4; ++i) {
      prior.components[static_cast<std::size_t>(i)].mean = means[static_cast<std::size_t>(i)];
      prior.components[static_cast<std::size_t>(i)].sd = sds[static_cast<std::size_t>(i)];
    }
    return prior;
  }

  static NoiseModel noise_hyper_from_data(const ObservationVector& obs, double shape,
                                          double scale_frac) {
    NoiseModel noise;
    const Eigen::VectorXd y = obs.as_vector();
    const std::array<std::pair<int, int>, 4> blocks = {{{0, 2}, {2, 35}, {37, 35}, {72, 35}}};
    for (int s = 0; s < 4; ++s) {
      const auto seg = y.segment(blocks[static_cast<std::size_t>(s)].first,
                                 blocks[static_cast<std::size_t>(s)].second);
      const double var = (seg.array() - seg.mean()).square().sum() / (seg.size() - 1);
      const double b = scale_frac * (var > 0.0 ? var : 1.0);
      noise.shape[static_cast<std::size_t>(s)] = shape;
      noise.scale[static_cast<std::size_t>(s)] = b;
      noise.variance[static_cast<std::size_t>(s)] = b;
    }
    return noise;
  }

  std::string chain_file() const { return "chain_" + cfg.prior_kind + ".csv"; }
  std::string summary_file() const { return "summary_" + cfg.prior_kind + ".json"; }
  std::string bands_file() const { return "bands_" + cfg.prior_kind + ".csv"; }

  void calibrate_stage() {
    const auto& up = require_stage("train", "emulator");
    if (cfg.observations_path.empty())
      throw ValidationError("calibrate needs paths.observations");
    if (cfg.network_path.empty()) throw ValidationError("calibrate needs paths.network");
    json spec = {{"train", up.config_hash},
                 {"observations", file_hash(cfg.observations_path)},
                 {"network", file_hash(cfg.network_path)},
                 {"iterations", cfg.mcmc_iterations},
                 {"burn_in", cfg.mcmc_burn_in},
                 {"seed", cfg.mcmc_seed},
                 {"prior", cfg.prior_kind},
                 {"eta_prior", {cfg.eta_prior_mean, cfg.eta_prior_sd}},
                 {"lrr_prior", {cfg.lrr_prior_mean, cfg.lrr_prior_sd}},
                 {"noise_shape", cfg.noise_shape},
                 {"noise_scale_frac", cfg.noise_scale_frac},
                 {"use_pde", cfg.use_pde},
                 {"bounds", bounds_json(cfg.bounds)}};
    if (cfg.use_pde) spec["solver"] = solver_json(cfg.solver);
    const std::string hash = hex64(fnv1a_hash(spec.dump()));
    const std::vector<std::string> outputs = {chain_file(), summary_file()};
    const bool run = plan("calibrate", hash, outputs);
    if (run) run_calibration(hash);
    record("calibrate", hash, cfg.mcmc_seed, outputs, run);
  }

  void run_calibration(const std::string& hash) {
    const ArterialNetwork net = parse_network(read_text_file(cfg.network_path));
    const ObservationVector obs = read_observation_csv(cfg.observations_path);
    const double a_dia = net.vessels[net.root].area_dia();

    EmulatorModel model;
    ModelFn model_fn;
    if (cfg.use_pde) {
      const InletFlow inlet = read_inlet_csv(cfg.inlet_path, net.period);
      model_fn = [this, net, inlet, a_dia](const ParameterVector& theta) {
        const SimulationOutput sim = simulate(net, theta, inlet, cfg.solver);
        return likelihood_vector_107(model_vector_140(sim), a_dia);
      };
    } else {
      model = load_emulator(artifact("emulator.json"));
      model_fn = [&model, a_dia](const ParameterVector& theta) {
        return likelihood_vector_107(predict(model, theta).mean140, a_dia);
      };
    }

    const PriorSpec prior = prior_from_config();
    const NoiseModel hyper = noise_hyper_from_data(obs, cfg.noise_shape, cfg.noise_scale_frac);
    DramOptions dram;
    dram.iterations = cfg.mcmc_iterations;
    dram.burn_in = cfg.mcmc_burn_in;
    dram.seed = cfg.mcmc_seed;

    const CalibrationResult result = calibrate(model_fn, obs, prior, hyper, dram);
    write_chain_csv(artifact(chain_file()), result.chain,
                    comment_block("calibrate", hash, cfg.mcmc_seed) + "# prior: " + cfg.prior_kind);

    json summary;
    summary["stage"] = "calibrate";
    summary["config_hash"] = hash;
    summary["seed"] = cfg.mcmc_seed;
    summary["version"] = kVersion;
    summary["prior"] = cfg.prior_kind;
    summary["iterations"] = cfg.mcmc_iterations;
    summary["burn_in"] = cfg.mcmc_burn_in;
    summary["acceptance_rate"] = result.chain.acceptance_rate;
    const Eigen::MatrixXd post = result.chain.post_burn_in();
    for (int p = 0; p < 4; ++p) {
      std::vector<double> col(post.col(p).data(), post.col(p).data() + post.rows());
      std::sort(col.begin(), col.end());
      auto q = [&](double f) {
        const double pos = f * (col.size() - 1.0);
        const std::size_t i = static_cast<std::size_t>(pos);
        const double w = pos - i;
        return i + 1 < col.size() ? col[i] * (1 - w) + col[i + 1] * w : col.back();
      };
      json pj;
      pj["mean"] = post.col(p).mean();
      pj["median"] = q(0.5);
      pj["ci_2_5"] = q(0.025);
      pj["ci_97_5"] = q(0.975);
      try {
        std::vector<double> series(post.col(p).data(), post.col(p).data() + post.rows());
        const GewekeResult g = geweke_test(series);
        pj["geweke_z"] = g.z;
        pj["geweke_p"] = g.p;
      } catch (const ValidationError&) {
        pj["geweke_z"] = nullptr;
        pj["geweke_p"] = nullptr;
      }
      summary["parameters"][ParameterVector::names()[static_cast<std::size_t>(p)]] = std::move(pj);
    }
    for (int s = 0; s < 4; ++s)
      summary["noise_variance_final"][ObservationVector::source_names()[static_cast<std::size_t>(s)]] =
          result.final_noise.variance[static_cast<std::size_t>(s)];
    std::ofstream out(artifact(summary_file()));
    out << summary.dump(2);
  }

  void propagate_stage() {
    const auto& up = require_stage("calibrate", "chain");
    require_stage("train", "emulator");
    json spec = {{"calibrate", up.config_hash},
                 {"n_tail", cfg.n_tail},
                 {"seed", cfg.propagate_seed},
                 {"noise_replicates", cfg.noise_replicates}};
    const std::string hash = hex64(fnv1a_hash(spec.dump()));
    const std::vector<std::string> outputs = {bands_file()};
    const bool run = plan("propagate", hash, outputs);
    if (run) run_propagation(hash);
    record("propagate", hash, cfg.propagate_seed, outputs, run);
  }

  void run_propagation(const std::string& hash) {
    const ArterialNetwork net = parse_network(read_text_file(cfg.network_path));
    const ObservationVector obs = read_observation_csv(cfg.observations_path);
    const Eigen::VectorXd data = obs.as_vector();
    const double a_dia = net.vessels[net.root].area_dia();
    const EmulatorModel model = load_emulator(artifact("emulator.json"));
    const PosteriorChain chain = read_chain_csv(artifact(chain_file()));

    ModelFn model_fn = [&model, a_dia](const ParameterVector& theta) {
      return likelihood_vector_107(predict(model, theta).mean140, a_dia);
    };
    const UncertaintyBands bands = propagate_uncertainty(chain, model_fn, cfg.n_tail,
                                                         cfg.propagate_seed, cfg.noise_replicates);

    std::ofstream out(artifact(bands_file()));
    if (!out) throw ValidationError("cannot write bands CSV");
    out << comment_block("propagate", hash, cfg.propagate_seed);
    out << "coord,source,sample,time_s,data,cred_lo,cred_med,cred_hi,pred_lo,pred_med,pred_hi\n";
    const char* names[4] = {"pressure_scalar", "q_lpa", "q_rpa", "strain"};
    for (int c = 0; c < data.size(); ++c) {
      int src, sample;
      if (c < 2) { src = 0; sample = c; }
      else if (c < 37) { src = 1; sample = c - 2; }
      else if (c < 72) { src = 2; sample = c - 37; }
      else { src = 3; sample = c - 72; }
      const double t = src == 0 ? 0.0 : net.period * sample / kSignalSamples;
      out << c << ',' << names[src] << ',' << sample << ',' << fmt(t) << ',' << fmt(data(c)) << ','
          << fmt(bands.credible(c, 0)) << ',' << fmt(bands.credible(c, 1)) << ','
          << fmt(bands.credible(c, 2)) << ',' << fmt(bands.prediction(c, 0)) << ','
          << fmt(bands.prediction(c, 1)) << ',' << fmt(bands.prediction(c, 2)) << "\n";
    }
  }

  void analyze_stage() {
    // Compares whichever chains exist; at least one is required.
    std::vector<std::string> chains;
    for (const char* kind : {"gaussian", "uniform"}) {
      const std::string f = "chain_" + std::string(kind) + ".csv";
      if (fs::exists(dir / f)) chains.push_back(f);
    }
    if (chains.empty()) throw ValidationError("missing artifact: chain");
    if (cfg.observations_path.empty())
      throw ValidationError("analyze needs paths.observations");

    json spec = {{"observations", file_hash(cfg.observations_path)}};
    for (const auto& c : chains) spec["chains"][c] = file_hash(artifact(c));
    if (!cfg.metrics_path.empty()) spec["metrics"] = file_hash(cfg.metrics_path);
    const std::string hash = hex64(fnv1a_hash(spec.dump()));

    std::vector<std::string> outputs = {"analysis_report.json"};
    for (const auto& c : chains)
      for (const auto* name : ParameterVector::names())
        outputs.push_back("hist_" + c.substr(6, c.size() - 10) + "_" + name + ".csv");
    const bool run = plan("analyze", hash, outputs);
    if (run) run_analysis(hash, chains);
    record("analyze", hash, 0, outputs, run);
  }

  void run_analysis(const std::string& hash, const std::vector<std::string>& chains) {
    const ObservationVector obs = read_observation_csv(cfg.observations_path);
    json report;
    report["stage"] = "analyze";
    report["config_hash"] = hash;
    report["version"] = kVersion;
    report["flow_split_data"] = flow_split(obs.q_lpa, obs.q_rpa);

    std::map<std::string, PosteriorChain> loaded;
    for (const auto& c : chains) {
      const std::string kind = c.substr(6, c.size() - 10);
      loaded[kind] = read_chain_csv(artifact(c));
      const Eigen::MatrixXd post = loaded[kind].post_burn_in();
      for (int p = 0; p < 4; ++p) {
        std::vector<double> col(post.col(p).data(), post.col(p).data() + post.rows());
        const Histogram h = histogram(col, 40);
        std::ofstream out(artifact("hist_" + kind + "_" +
                                   ParameterVector::names()[static_cast<std::size_t>(p)] + ".csv"));
        out << comment_block("analyze", hash, 0) << "bin_lo,bin_hi,count\n";
        for (std::size_t b = 0; b < h.counts.size(); ++b)
          out << fmt(h.edges[b]) << ',' << fmt(h.edges[b + 1]) << ',' << h.counts[b] << "\n";
      }
    }

    if (loaded.count("gaussian") && loaded.count("uniform")) {
      const Eigen::MatrixXd a = loaded["gaussian"].post_burn_in();
      const Eigen::MatrixXd b = loaded["uniform"].post_burn_in();
      json cmp;
      for (int p = 0; p < 4; ++p) {
        std::vector<double> xa(a.col(p).data(), a.col(p).data() + a.rows());
        std::vector<double> xb(b.col(p).data(), b.col(p).data() + b.rows());
        const TestResult ks = ks_test(xa, xb);
        const TestResult mwu = mannwhitney_u(xa, xb);
        cmp[ParameterVector::names()[static_cast<std::size_t>(p)]] = {
            {"ks_d", ks.statistic}, {"ks_p", ks.p}, {"mwu_u", mwu.statistic}, {"mwu_p", mwu.p}};
      }
      report["prior_comparison"] = std::move(cmp);
    }

    // Posterior-mean flow split through the emulator, when one is available.
    if (fs::exists(dir / "emulator.json") && !cfg.network_path.empty()) {
      const ArterialNetwork net = parse_network(read_text_file(cfg.network_path));
      const EmulatorModel model = load_emulator(artifact("emulator.json"));
      const auto& chain = loaded.begin()->second;
      const Eigen::MatrixXd post = chain.post_burn_in();
      const Eigen::VectorXd mean_theta = post.colwise().mean();
      const ParameterVector theta = ParameterVector::from_array(
          {mean_theta(0), mean_theta(1), mean_theta(2), mean_theta(3)});
      const Eigen::VectorXd m = predict(model, theta).mean140;
      std::vector<double> ql(m.data() + kSignalSamples, m.data() + 2 * kSignalSamples);
      std::vector<double> qr(m.data() + 2 * kSignalSamples, m.data() + 3 * kSignalSamples);
      report["flow_split_model"] = flow_split(ql, qr);
    }

    if (!cfg.metrics_path.empty()) {
      // Generic correlation table: a CSV whose header names the columns.
      std::ifstream in(cfg.metrics_path);
      if (!in) throw ValidationError("cannot open metrics CSV: " + cfg.metrics_path);
      std::string line;
      std::vector<std::string> names;
      std::vector<std::vector<double>> cols;
      while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (names.empty()) {
          std::istringstream ss(line);
          std::string tok;
          while (std::getline(ss, tok, ',')) names.push_back(tok);
          cols.resize(names.size());
          continue;
        }
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ss(line);
        for (auto& col : cols) {
          double v;
          if (ss >> v) col.push_back(v);
        }
      }
      if (!names.empty() && !cols[0].empty()) {
        Eigen::MatrixXd m(static_cast<int>(cols[0].size()), static_cast<int>(names.size()));
        for (std::size_t c = 0; c < cols.size(); ++c)
          for (std::size_t r = 0; r < cols[c].size(); ++r)
            m(static_cast<int>(r), static_cast<int>(c)) = cols[c][r];
        const CorrelationReport corr = correlation_report(names, m);
        json cj;
        cj["names"] = corr.names;
        json rows = json::array();
        for (int i = 0; i < corr.rho.rows(); ++i) {
          json row = json::array();
          for (int k = 0; k < corr.rho.cols(); ++k) row.push_back(corr.rho(i, k));
          rows.push_back(std::move(row));
        }
        cj["rho"] = std::move(rows);
        json strong = json::array();
        for (auto [i, k] : corr.strong)
          strong.push_back({{"a", corr.names[static_cast<std::size_t>(i)]},
                            {"b", corr.names[static_cast<std::size_t>(k)]},
                            {"rho", corr.rho(i, k)}});
        cj["strong"] = std::move(strong);
        report["correlations"] = std::move(cj);
      }
    }

    std::ofstream out(artifact("analysis_report.json"));
    out << report.dump(2);
  }
};

} // namespace

Manifest run_pipeline(const RunConfig& config, const std::vector<Stage>& stages, bool force) {
  fs::create_directories(config.artifact_dir);
  Manifest manifest = read_manifest(config.artifact_dir);
  StageRunner runner{config, manifest, force, fs::path(config.artifact_dir)};

  for (Stage s : stages) {
    switch (s) {
      case Stage::Design: runner.design(); break;
      case Stage::Simulate: runner.simulate_stage(); break;
      case Stage::Train: runner.train(); break;
      case Stage::Calibrate: runner.calibrate_stage(); break;
      case Stage::Propagate: runner.propagate_stage(); break;
      case Stage::Analyze: runner.analyze_stage(); break;
    }
    write_manifest(config.artifact_dir, manifest);
  }
  return manifest;
}

} // namespace pulsetree
