#include "pulsetree/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <Eigen/Dense>

#include "pulsetree/errors.hpp"

namespace pulsetree {

namespace {
constexpr double kLog2Pi = 1.83787706640934548356065947281;

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }
}

const std::array<const char*, 4>& ObservationVector::source_names() {
  static const std::array<const char*, 4> n = {"pressure", "lpa", "rpa", "strain"};
  return n;
}

Eigen::VectorXd ObservationVector::as_vector() const {
  validate();
  Eigen::VectorXd y(total_size());
  y(0) = p_sys;
  y(1) = p_dia;
  for (int i = 0; i < 35; ++i) {
    y(2 + i) = q_lpa[static_cast<std::size_t>(i)];
    y(37 + i) = q_rpa[static_cast<std::size_t>(i)];
    y(72 + i) = strain[static_cast<std::size_t>(i)];
  }
  return y;
}

ObservationVector ObservationVector::from_vector(const Eigen::VectorXd& y) {
  if (y.size() != total_size())
    throw ValidationError("observation vector must have 107 entries");
  ObservationVector obs;
  obs.p_sys = y(0);
  obs.p_dia = y(1);
  obs.q_lpa.assign(y.data() + 2, y.data() + 37);
  obs.q_rpa.assign(y.data() + 37, y.data() + 72);
  obs.strain.assign(y.data() + 72, y.data() + 107);
  return obs;
}

void ObservationVector::validate() const {
  if (!(p_sys > p_dia)) throw ValidationError("p_sys must exceed p_dia");
  if (q_lpa.size() != 35 || q_rpa.size() != 35 || strain.size() != 35)
    throw ValidationError("observation waveforms must have 35 samples each");
}

ObservationVector read_observation_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open observation CSV: " + path);
  ObservationVector obs;
  std::string line;
  bool have_sys = false, have_dia = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::string scrubbed = line;
    std::replace(scrubbed.begin(), scrubbed.end(), ',', ' ');
    std::istringstream ss(scrubbed);
    std::string first;
    ss >> first;
    if (first == "p_sys_mmHg") { ss >> obs.p_sys; have_sys = true; continue; }
    if (first == "p_dia_mmHg") { ss >> obs.p_dia; have_dia = true; continue; }
    if (first == "t") continue;  // column header
    double t = 0.0, ql = 0.0, qr = 0.0, eps = 0.0;
    std::istringstream row(scrubbed);
    if (!(row >> t >> ql >> qr >> eps)) continue;
    obs.q_lpa.push_back(ql);
    obs.q_rpa.push_back(qr);
    obs.strain.push_back(eps);
  }
  if (!have_sys || !have_dia)
    throw ValidationError("observation CSV is missing the p_sys_mmHg/p_dia_mmHg header scalars");
  obs.validate();
  return obs;
}

void write_observation_csv(const std::string& path, const ObservationVector& obs,
                           const std::vector<double>& times,
                           const std::string& header_comment) {
  obs.validate();
  if (times.size() != obs.q_lpa.size())
    throw ValidationError("time axis length does not match the waveforms");
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write observation CSV: " + path);
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "p_sys_mmHg,%.17g\np_dia_mmHg,%.17g\n", obs.p_sys, obs.p_dia);
  out << buf << "t,q_lpa,q_rpa,strain_pct\n";
  for (std::size_t i = 0; i < times.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g\n", times[i], obs.q_lpa[i],
                  obs.q_rpa[i], obs.strain[i]);
    out << buf;
  }
}

PriorSpec PriorSpec::gaussian_defaults(const ParameterBounds& bounds) {
  PriorSpec prior;
  const std::array<double, 4> means = {2.13, 10.7, 2.13, 10.7};
  const std::array<double, 4> sds = {0.37, 8.0, 0.37, 8.0};
  for (int i = 0; i < 4; ++i) {
    auto& c = prior.components[static_cast<std::size_t>(i)];
    c.kind = Kind::TruncatedGaussian;
    c.mean = means[static_cast<std::size_t>(i)];
    c.sd = sds[static_cast<std::size_t>(i)];
    c.lo = bounds.lo[static_cast<std::size_t>(i)];
    c.hi = bounds.hi[static_cast<std::size_t>(i)];
  }
  return prior;
}

PriorSpec PriorSpec::uniform(const ParameterBounds& bounds) {
  PriorSpec prior;
  for (int i = 0; i < 4; ++i) {
    auto& c = prior.components[static_cast<std::size_t>(i)];
    c.kind = Kind::Uniform;
    c.lo = bounds.lo[static_cast<std::size_t>(i)];
    c.hi = bounds.hi[static_cast<std::size_t>(i)];
  }
  return prior;
}

ParameterVector PriorSpec::initial_point() const {
  std::array<double, 4> a{};
  for (int i = 0; i < 4; ++i) {
    const auto& c = components[static_cast<std::size_t>(i)];
    if (c.kind == Kind::TruncatedGaussian)
      a[static_cast<std::size_t>(i)] = std::clamp(c.mean, c.lo, c.hi);
    else
      a[static_cast<std::size_t>(i)] = 0.5 * (c.lo + c.hi);
  }
  return ParameterVector::from_array(a);
}

ParameterBounds PriorSpec::support() const {
  ParameterBounds b;
  for (int i = 0; i < 4; ++i) {
    b.lo[static_cast<std::size_t>(i)] = components[static_cast<std::size_t>(i)].lo;
    b.hi[static_cast<std::size_t>(i)] = components[static_cast<std::size_t>(i)].hi;
  }
  return b;
}

double log_prior(const ParameterVector& theta, const PriorSpec& prior) {
  const auto a = theta.to_array();
  double lp = 0.0;
  for (int i = 0; i < 4; ++i) {
    const auto& c = prior.components[static_cast<std::size_t>(i)];
    const double x = a[static_cast<std::size_t>(i)];
    if (!(x >= c.lo && x <= c.hi)) return -std::numeric_limits<double>::infinity();
    if (c.kind == PriorSpec::Kind::TruncatedGaussian) {
      const double z = (x - c.mean) / c.sd;
      lp += -0.5 * z * z - std::log(c.sd);
    } else {
      lp += -std::log(c.hi - c.lo);
    }
  }
  return lp;
}

Eigen::VectorXd NoiseModel::diagonal107() const {
  validate();
  Eigen::VectorXd diag(ObservationVector::total_size());
  diag(0) = diag(1) = variance[0];
  diag.segment(2, 35).setConstant(variance[1]);
  diag.segment(37, 35).setConstant(variance[2]);
  diag.segment(72, 35).setConstant(variance[3]);
  return diag;
}

void NoiseModel::validate() const {
  for (double v : variance)
    if (!(v > 0.0)) throw ValidationError("noise variances must be positive");
  for (double a : shape)
    if (!(a > 0.0)) throw ValidationError("inverse-gamma shapes must be positive");
  for (double b : scale)
    if (!(b > 0.0)) throw ValidationError("inverse-gamma scales must be positive");
}

double gaussian_diag_loglik(const Eigen::VectorXd& residual, const Eigen::VectorXd& variances) {
  if (residual.size() != variances.size())
    throw ValidationError("residual/variance size mismatch");
  if ((variances.array() <= 0.0).any())
    throw ValidationError("noise variances must be positive");
  const double n = static_cast<double>(residual.size());
  double logdet = variances.array().log().sum();
  double quad = (residual.array().square() / variances.array()).sum();
  return -0.5 * (n * kLog2Pi + logdet + quad);
}

double log_likelihood(const ObservationVector& y, const Eigen::VectorXd& m107,
                      const NoiseModel& noise) {
  if (m107.size() != ObservationVector::total_size())
    throw ValidationError("model vector must have 107 entries");
  return gaussian_diag_loglik(y.as_vector() - m107, noise.diagonal107());
}

std::array<double, 4> residual_ss(const Eigen::VectorXd& r) {
  if (r.size() != ObservationVector::total_size())
    throw ValidationError("residual vector must have 107 entries");
  return {r.head(2).squaredNorm(), r.segment(2, 35).squaredNorm(),
          r.segment(37, 35).squaredNorm(), r.segment(72, 35).squaredNorm()};
}

std::array<double, 4> update_noise(const std::array<double, 4>& ss,
                                   const std::array<int, 4>& counts,
                                   const NoiseModel& hyper, std::mt19937_64& rng) {
  std::array<double, 4> out{};
  for (int s = 0; s < 4; ++s) {
    const double shape = hyper.shape[static_cast<std::size_t>(s)] + 0.5 * counts[static_cast<std::size_t>(s)];
    const double scale = hyper.scale[static_cast<std::size_t>(s)] + 0.5 * ss[static_cast<std::size_t>(s)];
    std::gamma_distribution<double> gamma(shape, 1.0);
    out[static_cast<std::size_t>(s)] = scale / gamma(rng);
  }
  return out;
}

Eigen::MatrixXd PosteriorChain::post_burn_in() const {
  return samples.bottomRows(samples.rows() - burn_in);
}

namespace {

/// One DRAM chain over an arbitrary log-density; shared by the generic
/// sampler and the calibration loop (which refreshes the density after each
/// noise Gibbs step).
class DramCore {
public:
  DramCore(std::function<double(const Eigen::VectorXd&)> log_target, Eigen::VectorXd init,
           const DramOptions& opts)
      : target_(std::move(log_target)), opts_(opts), x_(std::move(init)),
        dim_(static_cast<int>(x_.size())), rng_(opts.seed), normal_(0.0, 1.0) {
    logp_ = target_(x_);
    if (!std::isfinite(logp_))
      throw ValidationError("log-posterior is not finite at the initial point");
    Eigen::MatrixXd cov = opts_.init_cov;
    if (cov.size() == 0)
      cov = Eigen::MatrixXd::Identity(dim_, dim_) * 0.01;
    if (cov.rows() != dim_ || cov.cols() != dim_)
      throw ValidationError("initial proposal covariance has the wrong shape");
    set_proposal(cov);
    mean_ = Eigen::VectorXd::Zero(dim_);
    moment2_ = Eigen::MatrixXd::Zero(dim_, dim_);
  }

  bool step() {
    ++iteration_;
    bool accepted = false;

    const Eigen::VectorXd y1 = x_ + chol_ * draw();
    const double l1 = target_(y1);
    const double log_a1 = l1 - logp_;
    if (std::log(uniform()) < log_a1) {
      x_ = y1;
      logp_ = l1;
      accepted = true;
    } else if (log_a1 < 0.0) {
      // Delayed rejection: one extra stage with a shrunk proposal.
      const Eigen::VectorXd y2 = x_ + opts_.dr_scale * (chol_ * draw());
      const double l2 = target_(y2);
      if (std::isfinite(l2) && l1 < l2) {
        // log alpha1(y2 -> y1) < 0, so both log1p terms are finite.
        const double log_num = l2 + proposal_logq(y2, y1) + std::log1p(-std::exp(l1 - l2));
        const double log_den = logp_ + proposal_logq(x_, y1) + std::log1p(-std::exp(log_a1));
        if (std::log(uniform()) < log_num - log_den) {
          x_ = y2;
          logp_ = l2;
          accepted = true;
        }
      }
    }

    update_moments();
    if (iteration_ >= opts_.adapt_start && iteration_ % opts_.adapt_interval == 0) adapt();
    return accepted;
  }

  /// Recomputes the cached density after the target changed underneath us.
  void refresh() { logp_ = target_(x_); }

  const Eigen::VectorXd& state() const { return x_; }
  double log_posterior() const { return logp_; }

private:
  Eigen::VectorXd draw() {
    Eigen::VectorXd z(dim_);
    for (int i = 0; i < dim_; ++i) z(i) = normal_(rng_);
    return z;
  }
  double uniform() {
    // (0, 1]: keeps log() finite.
    return 1.0 - std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
  }

  double proposal_logq(const Eigen::VectorXd& from, const Eigen::VectorXd& to) const {
    const Eigen::VectorXd v =
        chol_.triangularView<Eigen::Lower>().solve(to - from);
    return -0.5 * v.squaredNorm();
  }

  void set_proposal(const Eigen::MatrixXd& cov) {
    Eigen::MatrixXd c = cov;
    for (int tries = 0; tries < 6; ++tries) {
      Eigen::LLT<Eigen::MatrixXd> llt(c);
      if (llt.info() == Eigen::Success) {
        chol_ = llt.matrixL();
        return;
      }
      c.diagonal().array() += std::max(opts_.cov_reg, 1e-12) * std::pow(10.0, tries);
    }
    throw NumericalError("proposal covariance is not positive definite");
  }

  void update_moments() {
    mean_ += (x_ - mean_) / iteration_;
    moment2_ += x_ * x_.transpose();
  }

  void adapt() {
    if (iteration_ < 2) return;
    const double n = iteration_;
    Eigen::MatrixXd cov =
        (moment2_ - n * mean_ * mean_.transpose()) / (n - 1.0);
    const double sd = 2.38 * 2.38 / dim_;
    cov = sd * cov;
    cov.diagonal().array() += sd * opts_.cov_reg;
    set_proposal(cov);
  }

  std::function<double(const Eigen::VectorXd&)> target_;
  DramOptions opts_;
  Eigen::VectorXd x_;
  int dim_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_;
  double logp_ = 0.0;
  Eigen::MatrixXd chol_;
  long iteration_ = 0;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd moment2_;
};

Eigen::MatrixXd default_init_cov(const ParameterBounds& support) {
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(4, 4);
  for (int i = 0; i < 4; ++i) {
    const double range = support.hi[static_cast<std::size_t>(i)] - support.lo[static_cast<std::size_t>(i)];
    cov(i, i) = (0.05 * range) * (0.05 * range);
  }
  return cov;
}

} // namespace

PosteriorChain dram_sample(const std::function<double(const Eigen::VectorXd&)>& log_target,
                           const Eigen::VectorXd& init, const DramOptions& opts) {
  if (opts.iterations < 1) throw ValidationError("iterations must be >= 1");
  if (opts.burn_in < 0 || opts.burn_in >= opts.iterations)
    throw ValidationError("burn-in must lie in [0, iterations)");

  DramCore core(log_target, init, opts);
  PosteriorChain chain;
  chain.samples.resize(opts.iterations, init.size());
  chain.log_post.resize(opts.iterations);
  chain.accepted.resize(static_cast<std::size_t>(opts.iterations));
  chain.burn_in = opts.burn_in;

  long accepted = 0;
  for (int it = 0; it < opts.iterations; ++it) {
    const bool acc = core.step();
    accepted += acc ? 1 : 0;
    chain.samples.row(it) = core.state().transpose();
    chain.log_post(it) = core.log_posterior();
    chain.accepted[static_cast<std::size_t>(it)] = acc ? 1 : 0;
  }
  chain.acceptance_rate = static_cast<double>(accepted) / opts.iterations;
  return chain;
}

CalibrationResult calibrate(const ModelFn& model, const ObservationVector& y,
                            const PriorSpec& prior, const NoiseModel& noise_init,
                            const DramOptions& opts) {
  if (opts.iterations < 1) throw ValidationError("iterations must be >= 1");
  if (opts.burn_in < 0 || opts.burn_in >= opts.iterations)
    throw ValidationError("burn-in must lie in [0, iterations)");
  noise_init.validate();

  const Eigen::VectorXd data = y.as_vector();
  NoiseModel noise = noise_init;

  // Small memo so the Gibbs step and density refresh reuse the model output
  // evaluated during the Metropolis move.
  struct CacheEntry {
    Eigen::VectorXd theta, m;
    bool valid = false;
  };
  std::array<CacheEntry, 4> cache;
  int cache_next = 0;
  auto model_at = [&](const Eigen::VectorXd& th) -> Eigen::VectorXd {
    for (const auto& entry : cache)
      if (entry.valid && entry.theta == th) return entry.m;
    Eigen::VectorXd m = model(ParameterVector::from_array({th(0), th(1), th(2), th(3)}));
    cache[static_cast<std::size_t>(cache_next)] = {th, m, true};
    cache_next = (cache_next + 1) % static_cast<int>(cache.size());
    return m;
  };

  auto log_target = [&](const Eigen::VectorXd& th) -> double {
    const ParameterVector theta = ParameterVector::from_array({th(0), th(1), th(2), th(3)});
    const double lp = log_prior(theta, prior);
    if (!std::isfinite(lp)) return lp;
    const Eigen::VectorXd m = model_at(th);
    return lp + gaussian_diag_loglik(data - m, noise.diagonal107());
  };

  DramOptions dram = opts;
  if (dram.init_cov.size() == 0) dram.init_cov = default_init_cov(prior.support());

  const ParameterVector theta0 = prior.initial_point();
  Eigen::VectorXd x0(4);
  {
    const auto a = theta0.to_array();
    for (int i = 0; i < 4; ++i) x0(i) = a[static_cast<std::size_t>(i)];
  }

  std::mt19937_64 gibbs_rng(opts.seed ^ 0x9e3779b97f4a7c15ULL);
  const auto counts_arr = ObservationVector::block_sizes();
  std::array<int, 4> counts = {counts_arr[0], counts_arr[1], counts_arr[2], counts_arr[3]};

  // Draw initial variances conditioned on the starting residuals.
  noise.variance = update_noise(residual_ss(data - model_at(x0)), counts, noise, gibbs_rng);

  DramCore core(log_target, x0, dram);
  PosteriorChain chain;
  chain.samples.resize(opts.iterations, 4);
  chain.noise.resize(opts.iterations, 4);
  chain.log_post.resize(opts.iterations);
  chain.accepted.resize(static_cast<std::size_t>(opts.iterations));
  chain.burn_in = opts.burn_in;

  long accepted = 0;
  for (int it = 0; it < opts.iterations; ++it) {
    const bool acc = core.step();
    accepted += acc ? 1 : 0;

    // Conjugate Gibbs update of the per-source variances, then refresh the
    // cached density so the next Metropolis ratio uses the new noise.
    const Eigen::VectorXd resid = data - model_at(core.state());
    noise.variance = update_noise(residual_ss(resid), counts, noise, gibbs_rng);
    core.refresh();

    chain.samples.row(it) = core.state().transpose();
    for (int s = 0; s < 4; ++s) chain.noise(it, s) = noise.variance[static_cast<std::size_t>(s)];
    chain.log_post(it) = core.log_posterior();
    chain.accepted[static_cast<std::size_t>(it)] = acc ? 1 : 0;
  }
  chain.acceptance_rate = static_cast<double>(accepted) / opts.iterations;
  return {std::move(chain), noise};
}

GewekeResult geweke_test(std::span<const double> chain, double first, double last) {
  const std::size_t n = chain.size();
  if (n < 100) throw ValidationError("Geweke test needs at least 100 samples");
  if (!(first > 0.0 && last > 0.0 && first + last < 1.0))
    throw ValidationError("invalid Geweke segment fractions");

  const std::size_t na = static_cast<std::size_t>(first * n);
  const std::size_t nb = static_cast<std::size_t>(last * n);
  auto spectral_var = [](std::span<const double> seg) {
    const std::size_t m = seg.size();
    double mean = 0.0;
    for (double v : seg) mean += v;
    mean /= static_cast<double>(m);
    const std::size_t lags = std::min<std::size_t>(
        m - 1, static_cast<std::size_t>(std::cbrt(static_cast<double>(m))));
    double s = 0.0;
    for (std::size_t k = 0; k <= lags; ++k) {
      double gamma = 0.0;
      for (std::size_t i = 0; i + k < m; ++i)
        gamma += (seg[i] - mean) * (seg[i + k] - mean);
      gamma /= static_cast<double>(m);
      const double w = 1.0 - static_cast<double>(k) / static_cast<double>(lags + 1);
      s += (k == 0 ? 1.0 : 2.0 * w) * gamma;
    }
    return std::pair<double, double>(mean, s);
  };

  const auto [mean_a, var_a] = spectral_var(chain.subspan(0, na));
  const auto [mean_b, var_b] = spectral_var(chain.subspan(n - nb, nb));
  if (!(var_a > 0.0) || !(var_b > 0.0)) throw ValidationError("degenerate chain");

  GewekeResult res;
  res.z = (mean_a - mean_b) /
          std::sqrt(var_a / static_cast<double>(na) + var_b / static_cast<double>(nb));
  res.p = 2.0 * (1.0 - normal_cdf(std::abs(res.z)));
  return res;
}

namespace {

Eigen::Vector3d percentiles_257(std::vector<double>& values) {
  std::sort(values.begin(), values.end());
  auto quantile = [&](double q) {
    const double pos = q * (static_cast<double>(values.size()) - 1.0);
    const std::size_t i = static_cast<std::size_t>(pos);
    const double w = pos - static_cast<double>(i);
    if (i + 1 >= values.size()) return values.back();
    return values[i] * (1.0 - w) + values[i + 1] * w;
  };
  return {quantile(0.025), quantile(0.5), quantile(0.975)};
}

} // namespace

UncertaintyBands propagate_uncertainty(const PosteriorChain& chain, const ModelFn& model,
                                       int n_tail, std::uint64_t seed, int noise_replicates) {
  const int total = static_cast<int>(chain.samples.rows());
  if (n_tail < 1 || n_tail > total - chain.burn_in)
    throw ValidationError("n_tail exceeds the post-burn-in draws");
  if (chain.noise.rows() != total)
    throw ValidationError("chain carries no noise draws; run calibrate first");
  if (noise_replicates < 1) throw ValidationError("noise_replicates must be >= 1");

  const int dim = ObservationVector::total_size();
  Eigen::MatrixXd means(n_tail, dim);
  for (int k = 0; k < n_tail; ++k) {
    const int row = total - n_tail + k;
    const ParameterVector theta = ParameterVector::from_array(
        {chain.samples(row, 0), chain.samples(row, 1), chain.samples(row, 2),
         chain.samples(row, 3)});
    means.row(k) = model(theta).transpose();
  }

  // Coordinate -> noise source: {0,1} pressure, then 35 lpa, 35 rpa, 35 strain.
  auto source_of = [](int coord) {
    if (coord < 2) return 0;
    if (coord < 37) return 1;
    if (coord < 72) return 2;
    return 3;
  };

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  UncertaintyBands bands;
  bands.credible.resize(dim, 3);
  bands.prediction.resize(dim, 3);

  std::vector<double> cred(static_cast<std::size_t>(n_tail));
  std::vector<double> pred(static_cast<std::size_t>(n_tail) * noise_replicates);
  for (int c = 0; c < dim; ++c) {
    const int s = source_of(c);
    for (int k = 0; k < n_tail; ++k) {
      cred[static_cast<std::size_t>(k)] = means(k, c);
      const int row = total - n_tail + k;
      const double sd = std::sqrt(chain.noise(row, s));
      for (int r = 0; r < noise_replicates; ++r)
        pred[static_cast<std::size_t>(k) * noise_replicates + r] = means(k, c) + sd * normal(rng);
    }
    bands.credible.row(c) = percentiles_257(cred).transpose();
    bands.prediction.row(c) = percentiles_257(pred).transpose();
  }
  return bands;
}

void write_chain_csv(const std::string& path, const PosteriorChain& chain,
                     const std::string& header_comment) {
  if (chain.samples.cols() != 4)
    throw ValidationError("chain CSV layout is defined for 4-parameter chains");
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write chain CSV: " + path);
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  out << "# burn_in: " << chain.burn_in << "\n";
  out << "# acceptance_rate: " << chain.acceptance_rate << "\n";
  out << "iteration,eta_left,lrr_left,eta_right,lrr_right,"
         "sigma2_pressure,sigma2_lpa,sigma2_rpa,sigma2_strain,logpost,accepted\n";
  const bool has_noise = chain.noise.rows() == chain.samples.rows();
  char buf[512];
  for (int i = 0; i < chain.samples.rows(); ++i) {
    const double s0 = has_noise ? chain.noise(i, 0) : 0.0;
    const double s1 = has_noise ? chain.noise(i, 1) : 0.0;
    const double s2 = has_noise ? chain.noise(i, 2) : 0.0;
    const double s3 = has_noise ? chain.noise(i, 3) : 0.0;
    std::snprintf(buf, sizeof(buf),
                  "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n", i,
                  chain.samples(i, 0), chain.samples(i, 1), chain.samples(i, 2),
                  chain.samples(i, 3), s0, s1, s2, s3, chain.log_post(i),
                  static_cast<int>(chain.accepted[static_cast<std::size_t>(i)]));
    out << buf;
  }
}

PosteriorChain read_chain_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open chain CSV: " + path);
  PosteriorChain chain;
  std::vector<std::array<double, 10>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ss(line.substr(1));
      std::string key;
      ss >> key;
      if (key == "burn_in:") ss >> chain.burn_in;
      if (key == "acceptance_rate:") ss >> chain.acceptance_rate;
      continue;
    }
    if (line.rfind("iteration", 0) == 0) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    double iter = 0.0;
    std::array<double, 10> row{};
    if (!(ss >> iter)) continue;
    bool ok = true;
    for (auto& v : row)
      if (!(ss >> v)) { ok = false; break; }
    if (ok) rows.push_back(row);
  }
  if (rows.empty()) throw ValidationError("chain CSV has no samples: " + path);

  const int n = static_cast<int>(rows.size());
  chain.samples.resize(n, 4);
  chain.noise.resize(n, 4);
  chain.log_post.resize(n);
  chain.accepted.resize(static_cast<std::size_t>(n));
  long accepted = 0;
  for (int i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    for (int j = 0; j < 4; ++j) chain.samples(i, j) = r[static_cast<std::size_t>(j)];
    for (int j = 0; j < 4; ++j) chain.noise(i, j) = r[static_cast<std::size_t>(4 + j)];
    chain.log_post(i) = r[8];
    chain.accepted[static_cast<std::size_t>(i)] = r[9] != 0.0 ? 1 : 0;
    accepted += r[9] != 0.0 ? 1 : 0;
  }
  if (chain.acceptance_rate == 0.0)
    chain.acceptance_rate = static_cast<double>(accepted) / n;
  return chain;
}

} // namespace pulsetree
