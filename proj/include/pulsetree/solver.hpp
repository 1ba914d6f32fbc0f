#ifndef PULSETREE_SOLVER_HPP
#define PULSETREE_SOLVER_HPP

#include <array>
#include <vector>

#include <Eigen/Core>

#include "pulsetree/inlet_flow.hpp"
#include "pulsetree/network.hpp"

namespace pulsetree {

/// The four inferred microvascular parameters. Vector order everywhere
/// (design CSVs, chains, bounds) is (eta_L, lrr_L, eta_R, lrr_R).
struct ParameterVector {
  double eta_left = 0.0;
  double lrr_left = 0.0;
  double eta_right = 0.0;
  double lrr_right = 0.0;

  std::array<double, 4> to_array() const { return {eta_left, lrr_left, eta_right, lrr_right}; }
  static ParameterVector from_array(const std::array<double, 4>& a) {
    return {a[0], a[1], a[2], a[3]};
  }
  static const std::array<const char*, 4>& names();
};

struct ParameterBounds {
  std::array<double, 4> lo{};
  std::array<double, 4> hi{};

  bool contains(const ParameterVector& theta) const;
  void validate() const;

  /// eta in [1.5, 3], lrr in [2, 70] for both lungs.
  static ParameterBounds table_defaults();
};

struct SolverOptions {
  int steps_per_period = 1 << 13;      // power of two
  int max_steps_per_period = 1 << 16;  // refinement ceiling before "unstable"
  double cfl = 0.5;
  int min_cells = 8;                   // per vessel
  double resolution_scale = 1.0;       // multiplies the cell count
  int max_cycles = 30;
  double convergence_tol = 1e-3;       // relative L2 change of MPA pressure
  double junction_tol = 1e-10;
  int sample_count = 35;
  bool record_diagnostics = false;
};

struct SolverDiagnostics {
  std::vector<double> cycle_residuals;  // relative L2 change of MPA pressure per cycle
  double inflow_cycle_volume = 0.0;    // mL over the final cycle
  double outflow_cycle_volume = 0.0;
  double max_junction_pressure_jump = 0.0;  // g/(cm s^2)
  double max_junction_flow_defect = 0.0;    // mL/s
  double pulse_pressure = 0.0;              // g/(cm s^2), MPA midpoint
  double mean_inlet_pressure = 0.0;         // g/(cm s^2), root inlet node
  double mean_root_end_pressure = 0.0;      // g/(cm s^2), root outlet node
  std::vector<double> tree_z0;              // g/(cm^4 s), per outlet
  double cfl_peak = 0.0;
  int steps_per_period_used = 0;
};

/// Waveforms sampled on the 35-point observation grid (data units).
struct SimulationOutput {
  std::vector<double> mpa_pressure;  // mmHg
  std::vector<double> lpa_flow;      // mL/s
  std::vector<double> rpa_flow;      // mL/s
  std::vector<double> mpa_area;      // cm^2
  bool converged = false;
  int cycles_run = 0;
  double max_pressure_mmhg = 0.0;
  SolverDiagnostics diagnostics;
};

/// Linear wall law: P = K (sqrt(A/A_dia) - 1) + P_dia.
double wall_pressure(double area, double area_dia, double stiffness, double p_dia);

// Forward declaration; defined in structured_tree.hpp.
struct StructuredTreeSpec;

/// Structured-tree parameters for one outlet under the given theta (left or
/// right components picked by the outlet's side).
StructuredTreeSpec outlet_tree_spec(const ArterialNetwork& net, const ParameterVector& theta,
                                    std::size_t outlet_vessel);

/// Advances the 1D pulse-wave system to a periodic steady state and samples
/// the final cycle. Left/right outlets carry structured trees built from the
/// corresponding components of theta.
SimulationOutput simulate(const ArterialNetwork& net, const ParameterVector& theta,
                          const InletFlow& inlet, const SolverOptions& opts = {});

/// Concatenated model output [pressure(35), lpa(35), rpa(35), area(35)].
Eigen::VectorXd model_vector_140(const SimulationOutput& sim);

/// Observation-space vector [p_sys, p_dia, lpa(35), rpa(35), strain_pct(35)]
/// derived from a model vector; strain is 100 * (A - A_dia) / A_dia.
Eigen::VectorXd likelihood_vector_107(const Eigen::VectorXd& model140, double a_dia_cm2);

struct Observables {
  Eigen::VectorXd model140;
  Eigen::VectorXd likelihood107;
};

Observables extract_observables(const SimulationOutput& sim, double a_dia_cm2);

} // namespace pulsetree

#endif
