#ifndef PULSETREE_CALIBRATION_HPP
#define PULSETREE_CALIBRATION_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pulsetree/solver.hpp"

namespace pulsetree {

/// The measured data entering the likelihood: 2 pressure scalars plus three
/// 35-sample waveforms, N_t = 107 entries in total.
struct ObservationVector {
  double p_sys = 0.0;  // mmHg
  double p_dia = 0.0;  // mmHg
  std::vector<double> q_lpa;    // mL/s
  std::vector<double> q_rpa;    // mL/s
  std::vector<double> strain;   // percent

  static constexpr int kSources = 4;
  static constexpr std::array<int, 4> block_sizes() { return {2, 35, 35, 35}; }
  static constexpr int total_size() { return 107; }
  static const std::array<const char*, 4>& source_names();

  Eigen::VectorXd as_vector() const;
  static ObservationVector from_vector(const Eigen::VectorXd& y);
  void validate() const;
};

ObservationVector read_observation_csv(const std::string& path);
void write_observation_csv(const std::string& path, const ObservationVector& obs,
                           const std::vector<double>& times,
                           const std::string& header_comment = "");

struct PriorSpec {
  enum class Kind { TruncatedGaussian, Uniform };
  struct Component {
    Kind kind = Kind::Uniform;
    double mean = 0.0, sd = 1.0;  // gaussian only
    double lo = 0.0, hi = 1.0;    // support
  };
  std::array<Component, 4> components;

  /// eta ~ N(2.13, 0.37), lrr ~ N(10.7, 8), truncated to the box.
  static PriorSpec gaussian_defaults(const ParameterBounds& bounds);
  static PriorSpec uniform(const ParameterBounds& bounds);

  ParameterVector initial_point() const;
  ParameterBounds support() const;
};

/// Sum of per-parameter log densities; -inf outside the support. Truncated
/// Gaussians are unnormalized (MCMC only needs ratios).
double log_prior(const ParameterVector& theta, const PriorSpec& prior);

/// One error variance per data source, updated by conjugate inverse-gamma
/// Gibbs steps.
struct NoiseModel {
  std::array<double, 4> variance{1.0, 1.0, 1.0, 1.0};
  std::array<double, 4> shape{1.0, 1.0, 1.0, 1.0};   // a_s
  std::array<double, 4> scale{0.01, 0.01, 0.01, 0.01};  // b_s

  Eigen::VectorXd diagonal107() const;
  void validate() const;
};

double gaussian_diag_loglik(const Eigen::VectorXd& residual, const Eigen::VectorXd& variances);

double log_likelihood(const ObservationVector& y, const Eigen::VectorXd& m107,
                      const NoiseModel& noise);

/// Per-source residual sums of squares for the Gibbs update.
std::array<double, 4> residual_ss(const Eigen::VectorXd& residual107);

/// sigma2_s ~ InvGamma(a_s + n_s/2, b_s + ss_s/2), drawn per source.
std::array<double, 4> update_noise(const std::array<double, 4>& ss,
                                   const std::array<int, 4>& counts,
                                   const NoiseModel& hyper, std::mt19937_64& rng);

struct DramOptions {
  int iterations = 10000;
  int burn_in = 2000;
  std::uint64_t seed = 0;
  int adapt_start = 100;
  int adapt_interval = 100;
  double dr_scale = 0.2;       // second-stage proposal shrink factor
  double cov_reg = 1e-10;
  Eigen::MatrixXd init_cov;    // empty: diag((0.05 * range)^2) from support
};

struct PosteriorChain {
  Eigen::MatrixXd samples;     // iterations x dim
  Eigen::MatrixXd noise;       // iterations x 4 (empty when no Gibbs step)
  Eigen::VectorXd log_post;
  std::vector<char> accepted;
  double acceptance_rate = 0.0;
  int burn_in = 0;

  Eigen::MatrixXd post_burn_in() const;
};

/// Delayed-rejection adaptive Metropolis on an arbitrary log-density.
PosteriorChain dram_sample(const std::function<double(const Eigen::VectorXd&)>& log_target,
                           const Eigen::VectorXd& init, const DramOptions& opts);

struct GewekeResult {
  double z = 0.0;
  double p = 0.0;
};

/// Compares the first 10% and last 50% of the series; the segment-mean
/// variances use a Bartlett-windowed spectral estimate.
GewekeResult geweke_test(std::span<const double> chain, double first = 0.1, double last = 0.5);

/// Maps theta to the 107-dimensional model observable.
using ModelFn = std::function<Eigen::VectorXd(const ParameterVector&)>;

struct CalibrationResult {
  PosteriorChain chain;
  NoiseModel final_noise;
};

/// Joint sampler: DRAM moves on theta interleaved with one inverse-gamma
/// Gibbs update of the four noise variances per iteration.
CalibrationResult calibrate(const ModelFn& model, const ObservationVector& y,
                            const PriorSpec& prior, const NoiseModel& noise_init,
                            const DramOptions& opts);

struct UncertaintyBands {
  Eigen::MatrixXd credible;    // n_coord x 3 (2.5 / 50 / 97.5 percentiles)
  Eigen::MatrixXd prediction;  // same layout, measurement noise added
};

/// Pointwise bands over the last n_tail posterior draws, in the 107-entry
/// observation space. Prediction bands add zero-mean noise with each draw's
/// sampled source variances (several replicates per draw).
UncertaintyBands propagate_uncertainty(const PosteriorChain& chain, const ModelFn& model,
                                       int n_tail, std::uint64_t seed,
                                       int noise_replicates = 10);

void write_chain_csv(const std::string& path, const PosteriorChain& chain,
                     const std::string& header_comment = "");
PosteriorChain read_chain_csv(const std::string& path);

} // namespace pulsetree

#endif
