#ifndef PULSETREE_EMULATOR_HPP
#define PULSETREE_EMULATOR_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pulsetree/solver.hpp"

namespace pulsetree {

struct DesignMatrix {
  Eigen::MatrixXd theta;  // n x 4, column order (eta_L, lrr_L, eta_R, lrr_R)
  ParameterBounds bounds;
};

/// Latin hypercube over the given box: every column places exactly one sample
/// in each of n equal strata. Reproducible from the seed.
DesignMatrix lhs_design(const ParameterBounds& bounds, int n, std::uint64_t seed);

/// Per-column min-max map onto [0, 1]; exactly invertible on the fit range.
struct MinMaxScaler {
  Eigen::VectorXd lo, span;

  void fit(const Eigen::MatrixXd& data);
  Eigen::MatrixXd scale(const Eigen::MatrixXd& data) const;
  Eigen::MatrixXd unscale(const Eigen::MatrixXd& data) const;
  Eigen::VectorXd scale_row(const Eigen::VectorXd& row) const;
  Eigen::VectorXd unscale_row(const Eigen::VectorXd& row) const;
};

struct PcaReduction {
  Eigen::VectorXd mean;          // output-space mean
  Eigen::MatrixXd basis;         // dim x n_components, orthonormal columns
  Eigen::VectorXd eigenvalues;   // all, descending
  Eigen::VectorXd explained;     // fraction per component (all)
  int n_components = 0;

  Eigen::MatrixXd scores(const Eigen::MatrixXd& data) const;        // n x n_components
  Eigen::VectorXd reconstruct(const Eigen::VectorXd& score) const;  // back to output space
  double cumulative_explained() const;
};

/// Eigendecomposition of the sample covariance. Uses n_fixed components when
/// given, otherwise the smallest count reaching variance_target.
PcaReduction fit_pca(const Eigen::MatrixXd& data, double variance_target,
                     std::optional<int> n_fixed = std::nullopt);

/// Matern nu=5/2 covariance with per-dimension lengthscales.
double matern52(const Eigen::VectorXd& x, const Eigen::VectorXd& xp, double sigma2,
                const Eigen::VectorXd& lengthscales);

struct GpOptions {
  int iterations = 1000;
  double learning_rate = 0.1;
  double rel_tol = 1e-8;  // early stop when the best NLL stalls; 0 disables
  int tol_window = 25;
  double jitter = 1e-6;
  double noise_floor = 1e-8;
};

/// Zero-mean GP on one principal-component score.
struct GpComponent {
  Eigen::MatrixXd inputs;       // n x d, scaled units
  Eigen::VectorXd targets;
  Eigen::VectorXd lengthscales; // d
  double sigma2 = 1.0;
  double noise2 = 1e-2;
  double jitter = 1e-6;
  double initial_nll = 0.0;
  double final_nll = 0.0;
  int iterations_run = 0;

  // Derived factors; rebuilt by refactor() after loading.
  Eigen::MatrixXd chol_lower;
  Eigen::VectorXd alpha;

  void refactor();
  double predict_mean(const Eigen::VectorXd& x) const;
  double predict_variance(const Eigen::VectorXd& x) const;  // latent + noise
  double nll() const;
};

GpComponent train_gp(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets,
                     const GpOptions& opts = {});

struct EmulatorOptions {
  std::optional<int> n_pca = 20;  // paper pipeline default
  double variance_target = 0.999;
  GpOptions gp;
  int threads = 0;  // 0: hardware concurrency
};

struct EmulatorModel {
  MinMaxScaler input_scaler;
  MinMaxScaler output_scaler;
  PcaReduction pca;
  std::vector<GpComponent> gps;
  ParameterBounds train_bounds;
};

struct EmulatorPrediction {
  Eigen::VectorXd mean140;
  Eigen::VectorXd score_variance;  // per PCA component, scaled units
  bool extrapolated = false;       // theta outside the training bounds
};

EmulatorModel train_emulator(const DesignMatrix& design, const Eigen::MatrixXd& outputs,
                             const EmulatorOptions& opts = {});

EmulatorPrediction predict(const EmulatorModel& model, const ParameterVector& theta);

void save_emulator(const std::string& path, const EmulatorModel& model);
EmulatorModel load_emulator(const std::string& path);

} // namespace pulsetree

#endif
