#ifndef PULSETREE_PIPELINE_HPP
#define PULSETREE_PIPELINE_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pulsetree/calibration.hpp"
#include "pulsetree/emulator.hpp"
#include "pulsetree/solver.hpp"

namespace pulsetree {

inline constexpr const char* kVersion = "0.1.0";

/// Everything one end-to-end run needs; loaded from a JSON file with
/// defaults for any missing field.
struct RunConfig {
  // paths
  std::string network_path;
  std::string inlet_path;
  std::string observations_path;
  std::string artifact_dir = "artifacts";
  std::string metrics_path;  // optional severity-metrics table for analyze

  // design stage
  int n_design = 500;
  std::uint64_t design_seed = 1;
  ParameterBounds bounds = ParameterBounds::table_defaults();

  // simulate stage
  SolverOptions solver;
  int workers = 0;  // 0: hardware concurrency

  // train stage
  EmulatorOptions emulator;
  double holdout_fraction = 0.05;
  std::uint64_t holdout_seed = 7;
  bool exclude_nonphys = false;
  double nonphys_pressure_mmhg = 120.0;

  // calibrate stage
  int mcmc_iterations = 10000;
  int mcmc_burn_in = 2000;
  std::uint64_t mcmc_seed = 3;
  std::string prior_kind = "gaussian";  // gaussian | uniform
  double eta_prior_mean = 2.13, eta_prior_sd = 0.37;
  double lrr_prior_mean = 10.7, lrr_prior_sd = 8.0;
  double noise_shape = 1.0;
  double noise_scale_frac = 0.01;  // b_s = frac * var(data_s)
  bool use_pde = false;            // PDE-in-the-loop likelihood

  // propagate stage
  int n_tail = 2000;
  std::uint64_t propagate_seed = 4;
  int noise_replicates = 10;
};

RunConfig load_run_config(const std::string& path);
RunConfig run_config_from_json_text(const std::string& text);

enum class Stage { Design, Simulate, Train, Calibrate, Propagate, Analyze };

const char* stage_name(Stage s);
std::vector<Stage> parse_stages(const std::string& csv);  // "design,simulate,..."
std::vector<Stage> all_stages();

/// FNV-1a 64-bit; stable across runs and builds.
std::uint64_t fnv1a_hash(const std::string& text);

struct StageRecord {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string version;
  std::vector<std::string> outputs;
  bool skipped = false;  // no-op because hash and outputs matched
};

using Manifest = std::map<std::string, StageRecord>;

Manifest read_manifest(const std::string& artifact_dir);
void write_manifest(const std::string& artifact_dir, const Manifest& manifest);

/// Runs the requested stages in dependency order. A stage whose config hash
/// matches the manifest and whose outputs exist is a no-op; a mismatch
/// without force is an error.
Manifest run_pipeline(const RunConfig& config, const std::vector<Stage>& stages,
                      bool force = false);

/// Section 2.2-style inflow correction: a uniform shift matching the mean MPA
/// flow to the summed branch means, plus an optional floor shift to zero.
struct PreprocessResult {
  std::vector<double> adjusted_q_mpa;
  double shift = 0.0;        // mean-matching shift applied
  double floor_shift = 0.0;  // extra shift from the zero-floor option
  double conservation_gap = 0.0;  // residual mean mismatch after both shifts
};

PreprocessResult preprocess_flows(std::span<const double> q_mpa,
                                  std::span<const double> q_lpa,
                                  std::span<const double> q_rpa,
                                  bool floor_to_zero = false);

/// Parallel map of the PDE over design rows. Rows that throw are flagged
/// failed (outputs NaN); non-converged rows keep their outputs and are
/// tagged downstream.
struct BatchResult {
  Eigen::MatrixXd outputs;  // n x 140
  std::vector<char> converged;
  std::vector<char> failed;
  std::vector<double> max_pressure_mmhg;
  std::vector<int> cycles;
};

BatchResult simulate_batch(const ArterialNetwork& net, const Eigen::MatrixXd& design,
                           const InletFlow& inlet, const SolverOptions& opts, int workers);

/// Single-run output CSV: 35 rows of (t, p_mmHg, q_lpa, q_rpa, a_cm2).
void write_simulation_csv(const std::string& path, const SimulationOutput& sim, double period,
                          const std::string& header_comment = "");

// Artifact I/O shared by the stages and the tests.
void write_design_csv(const std::string& path, const DesignMatrix& design,
                      const std::string& header_comment);
DesignMatrix read_design_csv(const std::string& path, const ParameterBounds& bounds);
void write_outputs_csv(const std::string& path, const BatchResult& batch,
                       double nonphys_pressure_mmhg, const std::string& header_comment);
BatchResult read_outputs_csv(const std::string& path);

std::string read_text_file(const std::string& path);

} // namespace pulsetree

#endif
