// Command-line front end for the pulse-wave calibration pipeline.

#include <fstream>
#include <iostream>
#include <sstream>
#include <vector>

#include <CLI11.hpp>

#include "pulsetree/analysis.hpp"
#include "pulsetree/errors.hpp"
#include "pulsetree/pipeline.hpp"
#include "pulsetree/structured_tree.hpp"

namespace {

using namespace pulsetree;

struct FlowTable {
  std::vector<double> time, q_mpa, q_lpa, q_rpa;
};

FlowTable read_flow_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open flows CSV: " + path);
  FlowTable t;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    double a, b, c, d;
    if (ss >> a >> b >> c >> d) {
      t.time.push_back(a);
      t.q_mpa.push_back(b);
      t.q_lpa.push_back(c);
      t.q_rpa.push_back(d);
    }
  }
  if (t.time.empty()) throw ValidationError("flows CSV has no data rows: " + path);
  return t;
}

int run_preprocess(const std::string& flows_path, const std::string& out_path,
                   bool floor_to_zero) {
  const FlowTable t = read_flow_table(flows_path);
  const PreprocessResult res = preprocess_flows(t.q_mpa, t.q_lpa, t.q_rpa, floor_to_zero);

  std::ofstream out(out_path);
  if (!out) throw ValidationError("cannot write: " + out_path);
  char buf[128];
  std::snprintf(buf, sizeof(buf), "# mean-matching shift: %.17g\n", res.shift);
  out << buf;
  if (res.floor_shift != 0.0) {
    std::snprintf(buf, sizeof(buf), "# zero-floor shift: %.17g (conservation gap %.17g)\n",
                  res.floor_shift, res.conservation_gap);
    out << buf;
    std::cerr << "warning: zero-floor shift " << res.floor_shift
              << " re-opened a conservation gap of " << res.conservation_gap << " mL/s\n";
  }
  out << "time_s,flow_ml_s\n";
  for (std::size_t i = 0; i < t.time.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", t.time[i], res.adjusted_q_mpa[i]);
    out << buf;
  }
  std::cout << "shift applied: " << res.shift << " mL/s";
  if (res.floor_shift != 0.0) std::cout << " (+" << res.floor_shift << " floor)";
  std::cout << "\n";
  return 0;
}

int run_single_simulation(const std::string& network_path, const std::string& inlet_path,
                          const std::string& theta_csv, const std::string& out_path,
                          const std::string& spectrum_prefix) {
  const ArterialNetwork net = parse_network(read_text_file(network_path));
  const InletFlow inlet = read_inlet_csv(inlet_path, net.period);

  std::array<double, 4> th{};
  std::istringstream ss(theta_csv);
  std::string tok;
  int i = 0;
  while (std::getline(ss, tok, ',') && i < 4) th[static_cast<std::size_t>(i++)] = std::stod(tok);
  if (i != 4) throw UsageError("--theta needs 4 comma-separated values (eta_L,lrr_L,eta_R,lrr_R)");
  const ParameterVector theta = ParameterVector::from_array(th);

  if (!spectrum_prefix.empty()) {
    for (std::size_t oi : net.outlets) {
      const StructuredTreeSpec spec = outlet_tree_spec(net, theta, oi);
      const ImpedanceSpectrum spectrum = root_impedance_spectrum(spec, 512);
      std::ofstream out(spectrum_prefix + "_" + net.vessel(oi).id + ".csv");
      write_spectrum_csv(out, spectrum);
    }
  }

  const SimulationOutput sim = simulate(net, theta, inlet);
  write_simulation_csv(out_path, sim, net.period);
  std::cout << (sim.converged ? "converged" : "NOT converged") << " after " << sim.cycles_run
            << " cycles; max pressure " << sim.max_pressure_mmhg << " mmHg\n";
  return sim.converged ? 0 : 3;
}

void report_manifest(const Manifest& manifest) {
  for (const auto& [name, rec] : manifest)
    std::cout << name << ": " << (rec.skipped ? "up to date" : "ran") << " (hash "
              << rec.config_hash << ")\n";
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"1D pulmonary pulse-wave model with structured-tree outlets,\n"
               "GP emulation, and Bayesian calibration"};
  app.require_subcommand(1);

  // preprocess
  std::string flows_path, out_path = "adjusted_inlet.csv";
  bool floor_to_zero = false;
  auto* pre = app.add_subcommand("preprocess", "Shift measured MPA flow to conserve branch means");
  pre->add_option("--flows", flows_path, "CSV with columns time,q_mpa,q_lpa,q_rpa")->required();
  pre->add_option("--out", out_path, "adjusted inlet CSV");
  pre->add_flag("--floor-to-zero", floor_to_zero, "shift again so min flow is zero");

  // stage commands share these
  std::string config_path;
  bool force = false;
  int workers = 0;
  std::string prior_override;

  auto add_stage = [&](const char* name, const char* desc) {
    auto* cmd = app.add_subcommand(name, desc);
    cmd->add_option("--config", config_path, "run configuration JSON")->required();
    cmd->add_flag("--force", force, "rebuild on config-hash mismatch");
    return cmd;
  };

  auto* design_cmd = add_stage("design", "Latin hypercube parameter design");
  auto* simulate_cmd = app.add_subcommand("simulate", "PDE solves over the design, or one run with --theta");
  simulate_cmd->add_option("--config", config_path, "run configuration JSON");
  simulate_cmd->add_flag("--force", force, "rebuild on config-hash mismatch");
  simulate_cmd->add_option("--workers", workers, "parallel PDE workers");
  std::string network_path, inlet_path, theta_csv, sim_out = "simulation.csv", spectrum_prefix;
  simulate_cmd->add_option("--network", network_path, "network JSON (single-run mode)");
  simulate_cmd->add_option("--inlet", inlet_path, "inlet CSV (single-run mode)");
  simulate_cmd->add_option("--theta", theta_csv, "eta_L,lrr_L,eta_R,lrr_R (single-run mode)");
  simulate_cmd->add_option("--out", sim_out, "single-run output CSV");
  simulate_cmd->add_option("--dump-spectrum", spectrum_prefix, "write per-outlet impedance spectra");

  auto* train_cmd = add_stage("train", "PCA + GP emulator training");
  auto* calibrate_cmd = add_stage("calibrate", "DRAM posterior sampling");
  calibrate_cmd->add_option("--prior", prior_override, "gaussian|uniform (overrides config)");
  bool use_pde = false;
  calibrate_cmd->add_flag("--use-pde", use_pde, "PDE-in-the-loop likelihood (slow)");
  auto* propagate_cmd = add_stage("propagate", "credible/prediction bands from the chain");
  auto* analyze_cmd = add_stage("analyze", "posterior comparisons and plot data");

  auto* pipeline_cmd = add_stage("pipeline", "run stages in order");
  std::string stages_csv = "design,simulate,train,calibrate,propagate,analyze";
  pipeline_cmd->add_option("--stages", stages_csv, "comma-separated stage subset");
  pipeline_cmd->add_option("--workers", workers, "parallel PDE workers");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (pre->parsed()) return run_preprocess(flows_path, out_path, floor_to_zero);

    if (simulate_cmd->parsed() && !theta_csv.empty())
      return run_single_simulation(network_path, inlet_path, theta_csv, sim_out, spectrum_prefix);

    if (simulate_cmd->parsed() && config_path.empty())
      throw UsageError("simulate needs either --config or --network/--inlet/--theta");

    RunConfig cfg = load_run_config(config_path);
    if (workers > 0) cfg.workers = workers;
    if (!prior_override.empty()) cfg.prior_kind = prior_override;
    if (use_pde) cfg.use_pde = true;
    if (cfg.prior_kind != "gaussian" && cfg.prior_kind != "uniform")
      throw UsageError("--prior must be gaussian or uniform");

    std::vector<Stage> stages;
    if (design_cmd->parsed()) stages = {Stage::Design};
    else if (simulate_cmd->parsed()) stages = {Stage::Simulate};
    else if (train_cmd->parsed()) stages = {Stage::Train};
    else if (calibrate_cmd->parsed()) stages = {Stage::Calibrate};
    else if (propagate_cmd->parsed()) stages = {Stage::Propagate};
    else if (analyze_cmd->parsed()) stages = {Stage::Analyze};
    else if (pipeline_cmd->parsed()) stages = parse_stages(stages_csv);

    report_manifest(run_pipeline(cfg, stages, force));
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
