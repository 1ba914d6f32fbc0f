#include "pulsetree/emulator.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <thread>

#include <Eigen/Dense>
#include <json.hpp>

#include "pulsetree/errors.hpp"

namespace pulsetree {

using nlohmann::json;

DesignMatrix lhs_design(const ParameterBounds& bounds, int n, std::uint64_t seed) {
  bounds.validate();
  if (n < 2) throw ValidationError("design size must be at least 2");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  DesignMatrix design;
  design.bounds = bounds;
  design.theta.resize(n, 4);
  std::vector<int> strata(static_cast<std::size_t>(n));
  for (int col = 0; col < 4; ++col) {
    std::iota(strata.begin(), strata.end(), 0);
    std::shuffle(strata.begin(), strata.end(), rng);
    const double width = (bounds.hi[col] - bounds.lo[col]) / n;
    for (int i = 0; i < n; ++i)
      design.theta(i, col) = bounds.lo[col] + (strata[static_cast<std::size_t>(i)] + unif(rng)) * width;
  }
  return design;
}

void MinMaxScaler::fit(const Eigen::MatrixXd& data) {
  lo = data.colwise().minCoeff();
  Eigen::VectorXd hi = data.colwise().maxCoeff();
  span = hi - lo;
  for (int i = 0; i < span.size(); ++i)
    if (span(i) <= 0.0) span(i) = 1.0;  // constant column maps to 0
}

Eigen::MatrixXd MinMaxScaler::scale(const Eigen::MatrixXd& data) const {
  return (data.rowwise() - lo.transpose()).array().rowwise() / span.transpose().array();
}

Eigen::MatrixXd MinMaxScaler::unscale(const Eigen::MatrixXd& data) const {
  return (data.array().rowwise() * span.transpose().array()).matrix().rowwise() + lo.transpose();
}

Eigen::VectorXd MinMaxScaler::scale_row(const Eigen::VectorXd& row) const {
  return (row - lo).cwiseQuotient(span);
}

Eigen::VectorXd MinMaxScaler::unscale_row(const Eigen::VectorXd& row) const {
  return row.cwiseProduct(span) + lo;
}

Eigen::MatrixXd PcaReduction::scores(const Eigen::MatrixXd& data) const {
  return (data.rowwise() - mean.transpose()) * basis;
}

Eigen::VectorXd PcaReduction::reconstruct(const Eigen::VectorXd& score) const {
  return mean + basis * score;
}

double PcaReduction::cumulative_explained() const {
  return explained.head(n_components).sum();
}

PcaReduction fit_pca(const Eigen::MatrixXd& data, double variance_target,
                     std::optional<int> n_fixed) {
  const int n = static_cast<int>(data.rows());
  const int dim = static_cast<int>(data.cols());
  if (n < 2) throw ValidationError("PCA needs at least 2 rows");

  PcaReduction pca;
  pca.mean = data.colwise().mean();
  Eigen::MatrixXd centered = data.rowwise() - pca.mean.transpose();
  Eigen::MatrixXd cov = centered.transpose() * centered / double(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericalError("PCA eigendecomposition failed");

  // Eigen returns ascending order; flip to descending.
  Eigen::VectorXd values = eig.eigenvalues().reverse();
  Eigen::MatrixXd vectors = eig.eigenvectors().rowwise().reverse();
  values = values.cwiseMax(0.0);

  const double total = values.sum();
  pca.eigenvalues = values;
  pca.explained = total > 0.0 ? Eigen::VectorXd(values / total)
                              : Eigen::VectorXd(Eigen::VectorXd::Zero(dim));

  int rank = 0;
  for (int i = 0; i < dim; ++i)
    if (values(i) > 1e-12 * std::max(values(0), 1e-300)) ++rank;

  if (n_fixed) {
    if (*n_fixed < 1 || *n_fixed > dim)
      throw ValidationError("n_fixed outside [1, output dimension]");
    if (*n_fixed > rank)
      throw ValidationError("requested " + std::to_string(*n_fixed) +
                            " PCA components but data rank is " + std::to_string(rank));
    pca.n_components = *n_fixed;
  } else {
    double cum = 0.0;
    int k = 0;
    while (k < dim && cum < variance_target) cum += pca.explained(k++);
    pca.n_components = std::max(1, k);
  }
  pca.basis = vectors.leftCols(pca.n_components);
  return pca;
}

double matern52(const Eigen::VectorXd& x, const Eigen::VectorXd& xp, double sigma2,
                const Eigen::VectorXd& lengthscales) {
  if (!(sigma2 > 0.0) || (lengthscales.array() <= 0.0).any())
    throw ValidationError("matern52 needs positive variance and lengthscales");
  const double d = std::sqrt(((x - xp).cwiseQuotient(lengthscales)).squaredNorm());
  const double s5d = std::sqrt(5.0) * d;
  return sigma2 * (1.0 + s5d + s5d * s5d / 3.0) * std::exp(-s5d);
}

namespace {

constexpr double kSqrt5 = 2.23606797749978969640917366873;

struct KernelWork {
  Eigen::MatrixXd dist;   // pairwise scaled distance d
  Eigen::MatrixXd decay;  // exp(-sqrt5 d)
  Eigen::MatrixXd kmat;   // full kernel matrix incl. noise + jitter
};

void build_kernel(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& ell, double sigma2,
                  double noise2, double jitter,
                  const std::vector<Eigen::MatrixXd>& sqdiff, KernelWork& w) {
  const int n = static_cast<int>(inputs.rows());
  const int d = static_cast<int>(inputs.cols());
  Eigen::MatrixXd d2 = Eigen::MatrixXd::Zero(n, n);
  for (int k = 0; k < d; ++k) d2 += sqdiff[static_cast<std::size_t>(k)] / (ell(k) * ell(k));
  w.dist = d2.cwiseMax(0.0).cwiseSqrt();
  w.decay = (-kSqrt5 * w.dist).array().exp();
  w.kmat = sigma2 * ((1.0 + kSqrt5 * w.dist.array() + (5.0 / 3.0) * w.dist.array().square()) *
                     w.decay.array()).matrix();
  w.kmat.diagonal().array() += noise2 + jitter;
}

double nll_value(const Eigen::LLT<Eigen::MatrixXd>& llt, const Eigen::VectorXd& y,
                 const Eigen::VectorXd& alpha) {
  const int n = static_cast<int>(y.size());
  double logdet = 0.0;
  for (int i = 0; i < n; ++i) logdet += 2.0 * std::log(llt.matrixLLT()(i, i));
  return 0.5 * (y.dot(alpha) + logdet + n * std::log(2.0 * std::numbers::pi));
}

} // namespace

void GpComponent::refactor() {
  const int n = static_cast<int>(inputs.rows());
  Eigen::MatrixXd kmat(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) {
      const double v = matern52(inputs.row(i), inputs.row(j), sigma2, lengthscales);
      kmat(i, j) = v;
      kmat(j, i) = v;
    }
  kmat.diagonal().array() += noise2 + jitter;
  Eigen::LLT<Eigen::MatrixXd> llt(kmat);
  if (llt.info() != Eigen::Success)
    throw NumericalError("GP kernel factorization failed");
  chol_lower = llt.matrixL();
  alpha = llt.solve(targets);
}

namespace {

// Allocation-free cross-covariance row; the prediction path is hot inside MCMC.
inline double matern52_point(const Eigen::MatrixXd& inputs, int i, const Eigen::VectorXd& x,
                             double sigma2, const Eigen::VectorXd& ell) {
  double d2 = 0.0;
  for (int k = 0; k < x.size(); ++k) {
    const double t = (x(k) - inputs(i, k)) / ell(k);
    d2 += t * t;
  }
  const double s5d = 2.23606797749978969640917366873 * std::sqrt(d2);
  return sigma2 * (1.0 + s5d + s5d * s5d / 3.0) * std::exp(-s5d);
}

} // namespace

double GpComponent::predict_mean(const Eigen::VectorXd& x) const {
  const int n = static_cast<int>(inputs.rows());
  double acc = 0.0;
  for (int i = 0; i < n; ++i)
    acc += matern52_point(inputs, i, x, sigma2, lengthscales) * alpha(i);
  return acc;
}

double GpComponent::predict_variance(const Eigen::VectorXd& x) const {
  const int n = static_cast<int>(inputs.rows());
  Eigen::VectorXd kstar(n);
  for (int i = 0; i < n; ++i) kstar(i) = matern52_point(inputs, i, x, sigma2, lengthscales);
  Eigen::VectorXd v = chol_lower.triangularView<Eigen::Lower>().solve(kstar);
  const double var = sigma2 + noise2 - v.squaredNorm();
  return std::max(var, 0.0);
}

double GpComponent::nll() const {
  Eigen::LLT<Eigen::MatrixXd> llt;
  Eigen::MatrixXd kmat = chol_lower * chol_lower.transpose();
  llt.compute(kmat);
  return nll_value(llt, targets, alpha);
}

GpComponent train_gp(const Eigen::MatrixXd& inputs, const Eigen::VectorXd& targets,
                     const GpOptions& opts) {
  const int n = static_cast<int>(inputs.rows());
  const int d = static_cast<int>(inputs.cols());
  if (n < 2) throw ValidationError("GP training needs at least 2 points");
  if (targets.size() != n) throw ValidationError("GP targets length mismatch");
  if (!targets.allFinite()) throw ValidationError("GP targets must be finite");

  // Pairwise squared differences per input dimension are iteration-invariant.
  std::vector<Eigen::MatrixXd> sqdiff(static_cast<std::size_t>(d));
  for (int k = 0; k < d; ++k) {
    Eigen::VectorXd col = inputs.col(k);
    Eigen::MatrixXd diff = col.replicate(1, n) - col.transpose().replicate(n, 1);
    sqdiff[static_cast<std::size_t>(k)] = diff.array().square();
  }

  // Log-parameterization: [log ell_1..d, log sigma2, log noise2].
  Eigen::VectorXd p(d + 2);
  for (int k = 0; k < d; ++k) p(k) = std::log(0.5);
  p(d) = std::log(1.0);
  p(d + 1) = std::log(1e-2);
  const double log_noise_floor = std::log(opts.noise_floor);

  Eigen::VectorXd m = Eigen::VectorXd::Zero(d + 2);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(d + 2);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  KernelWork work;
  Eigen::VectorXd best_p = p;
  double best_nll = std::numeric_limits<double>::infinity();
  double initial_nll = 0.0;
  int iters_done = 0;
  int since_best = 0;
  double best_at_window = std::numeric_limits<double>::infinity();

  for (int it = 0; it < opts.iterations; ++it) {
    Eigen::VectorXd ell = p.head(d).array().exp();
    const double sigma2 = std::exp(p(d));
    const double noise2 = std::exp(p(d + 1));

    build_kernel(inputs, ell, sigma2, noise2, opts.jitter, sqdiff, work);
    Eigen::LLT<Eigen::MatrixXd> llt(work.kmat);
    double jit = opts.jitter;
    while (llt.info() != Eigen::Success && jit < 1.0) {
      jit *= 10.0;
      Eigen::MatrixXd bumped = work.kmat;
      bumped.diagonal().array() += jit;
      llt.compute(bumped);
    }
    if (llt.info() != Eigen::Success)
      throw NumericalError("GP kernel not positive definite at iteration " + std::to_string(it));

    Eigen::VectorXd alpha = llt.solve(targets);
    const double nll = nll_value(llt, targets, alpha);
    if (!std::isfinite(nll))
      throw NumericalError("non-finite GP loss at iteration " + std::to_string(it));
    if (it == 0) initial_nll = nll;
    if (nll < best_nll) {
      best_nll = nll;
      best_p = p;
    }
    iters_done = it + 1;

    // Convergence monitor: stop when the best NLL has stalled for a window.
    if (opts.rel_tol > 0.0 && ++since_best >= opts.tol_window) {
      const double improve = best_at_window - best_nll;
      if (improve < opts.rel_tol * (std::abs(best_nll) + 1.0)) break;
      best_at_window = best_nll;
      since_best = 0;
    }

    // P = Kinv - alpha alpha^T; gradient of NLL wrt phi is 0.5 tr(P dK/dphi).
    Eigen::MatrixXd kinv = llt.solve(Eigen::MatrixXd::Identity(n, n));
    Eigen::MatrixXd pmat = kinv - alpha * alpha.transpose();

    Eigen::VectorXd grad(d + 2);
    // dK/dlog ell_k = sigma2 * (5/3) (1 + sqrt5 d) exp(-sqrt5 d) * S_k / ell_k^2
    Eigen::MatrixXd wmat = ((1.0 + kSqrt5 * work.dist.array()) * work.decay.array()).matrix();
    Eigen::MatrixXd pw = pmat.cwiseProduct(wmat);
    for (int k = 0; k < d; ++k)
      grad(k) = 0.5 * sigma2 * (5.0 / 3.0) *
                pw.cwiseProduct(sqdiff[static_cast<std::size_t>(k)]).sum() / (ell(k) * ell(k));
    // dK/dlog sigma2 = K - (noise2 + jitter) I
    grad(d) = 0.5 * (pmat.cwiseProduct(work.kmat).sum() - (noise2 + opts.jitter) * pmat.trace());
    grad(d + 1) = 0.5 * noise2 * pmat.trace();

    const double t = it + 1;
    for (int k = 0; k < d + 2; ++k) {
      m(k) = b1 * m(k) + (1.0 - b1) * grad(k);
      v(k) = b2 * v(k) + (1.0 - b2) * grad(k) * grad(k);
      const double mhat = m(k) / (1.0 - std::pow(b1, t));
      const double vhat = v(k) / (1.0 - std::pow(b2, t));
      p(k) -= opts.learning_rate * mhat / (std::sqrt(vhat) + eps);
    }
    p(d + 1) = std::max(p(d + 1), log_noise_floor);
  }

  GpComponent gp;
  gp.inputs = inputs;
  gp.targets = targets;
  gp.lengthscales = best_p.head(d).array().exp();
  gp.sigma2 = std::exp(best_p(d));
  gp.noise2 = std::max(std::exp(best_p(d + 1)), opts.noise_floor);
  gp.jitter = opts.jitter;
  gp.initial_nll = initial_nll;
  gp.final_nll = best_nll;
  gp.iterations_run = iters_done;
  gp.refactor();
  return gp;
}

EmulatorModel train_emulator(const DesignMatrix& design, const Eigen::MatrixXd& outputs,
                             const EmulatorOptions& opts) {
  if (design.theta.rows() != outputs.rows())
    throw ValidationError("design and output row counts differ");
  if (!outputs.allFinite())
    throw ValidationError("training outputs contain non-finite rows");

  EmulatorModel model;
  model.train_bounds = design.bounds;
  model.input_scaler.fit(design.theta);
  model.output_scaler.fit(outputs);

  const Eigen::MatrixXd x = model.input_scaler.scale(design.theta);
  const Eigen::MatrixXd y = model.output_scaler.scale(outputs);

  std::optional<int> n_fixed = opts.n_pca;
  if (n_fixed && *n_fixed > static_cast<int>(outputs.cols()))
    n_fixed = static_cast<int>(outputs.cols());
  model.pca = fit_pca(y, opts.variance_target, n_fixed);

  const Eigen::MatrixXd scores = model.pca.scores(y);
  model.gps.resize(static_cast<std::size_t>(model.pca.n_components));

  int threads = opts.threads > 0 ? opts.threads
                                 : static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min<int>(threads, model.pca.n_components));

  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      try {
        for (int i = next.fetch_add(1); i < model.pca.n_components; i = next.fetch_add(1))
          model.gps[static_cast<std::size_t>(i)] = train_gp(x, scores.col(i), opts.gp);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);

  return model;
}

EmulatorPrediction predict(const EmulatorModel& model, const ParameterVector& theta) {
  const auto arr = theta.to_array();
  Eigen::VectorXd raw(4);
  for (int i = 0; i < 4; ++i) raw(i) = arr[static_cast<std::size_t>(i)];
  if (!raw.allFinite()) throw ValidationError("prediction input must be finite");

  EmulatorPrediction pred;
  pred.extrapolated = !model.train_bounds.contains(theta);

  const Eigen::VectorXd x = model.input_scaler.scale_row(raw);
  const int m = model.pca.n_components;
  Eigen::VectorXd score(m);
  pred.score_variance.resize(m);
  for (int i = 0; i < m; ++i) {
    score(i) = model.gps[static_cast<std::size_t>(i)].predict_mean(x);
    pred.score_variance(i) = model.gps[static_cast<std::size_t>(i)].predict_variance(x);
  }
  pred.mean140 = model.output_scaler.unscale_row(model.pca.reconstruct(score));
  return pred;
}

namespace {

json vector_to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

json matrix_to_json(const Eigen::MatrixXd& m) {
  json a = json::array();
  for (int i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    a.push_back(std::move(row));
  }
  return a;
}

Eigen::VectorXd vector_from_json(const json& a) {
  Eigen::VectorXd v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<int>(i)) = a[i].get<double>();
  return v;
}

Eigen::MatrixXd matrix_from_json(const json& a) {
  const int rows = static_cast<int>(a.size());
  const int cols = rows > 0 ? static_cast<int>(a[0].size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = a[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].get<double>();
  return m;
}

} // namespace

void save_emulator(const std::string& path, const EmulatorModel& model) {
  json j;
  j["format"] = "pulsetree-emulator";
  j["version"] = 1;
  j["input_scaler"] = {{"lo", vector_to_json(model.input_scaler.lo)},
                       {"span", vector_to_json(model.input_scaler.span)}};
  j["output_scaler"] = {{"lo", vector_to_json(model.output_scaler.lo)},
                        {"span", vector_to_json(model.output_scaler.span)}};
  j["pca"] = {{"mean", vector_to_json(model.pca.mean)},
              {"basis", matrix_to_json(model.pca.basis)},
              {"eigenvalues", vector_to_json(model.pca.eigenvalues)},
              {"explained", vector_to_json(model.pca.explained)},
              {"n_components", model.pca.n_components}};
  j["bounds"] = {{"lo", std::vector<double>(model.train_bounds.lo.begin(), model.train_bounds.lo.end())},
                 {"hi", std::vector<double>(model.train_bounds.hi.begin(), model.train_bounds.hi.end())}};
  json gps = json::array();
  for (const auto& gp : model.gps) {
    json g;
    g["inputs"] = matrix_to_json(gp.inputs);
    g["targets"] = vector_to_json(gp.targets);
    g["lengthscales"] = vector_to_json(gp.lengthscales);
    g["sigma2"] = gp.sigma2;
    g["noise2"] = gp.noise2;
    g["jitter"] = gp.jitter;
    g["initial_nll"] = gp.initial_nll;
    g["final_nll"] = gp.final_nll;
    g["iterations_run"] = gp.iterations_run;
    gps.push_back(std::move(g));
  }
  j["gps"] = std::move(gps);

  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write emulator file: " + path);
  out << j.dump();
}

EmulatorModel load_emulator(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open emulator file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("emulator file is not valid JSON: ") + e.what());
  }
  if (j.value("format", "") != "pulsetree-emulator")
    throw ValidationError("not a pulsetree emulator file: " + path);

  EmulatorModel model;
  model.input_scaler.lo = vector_from_json(j["input_scaler"]["lo"]);
  model.input_scaler.span = vector_from_json(j["input_scaler"]["span"]);
  model.output_scaler.lo = vector_from_json(j["output_scaler"]["lo"]);
  model.output_scaler.span = vector_from_json(j["output_scaler"]["span"]);
  model.pca.mean = vector_from_json(j["pca"]["mean"]);
  model.pca.basis = matrix_from_json(j["pca"]["basis"]);
  model.pca.eigenvalues = vector_from_json(j["pca"]["eigenvalues"]);
  model.pca.explained = vector_from_json(j["pca"]["explained"]);
  model.pca.n_components = j["pca"]["n_components"].get<int>();
  auto lo = j["bounds"]["lo"].get<std::vector<double>>();
  auto hi = j["bounds"]["hi"].get<std::vector<double>>();
  std::copy(lo.begin(), lo.end(), model.train_bounds.lo.begin());
  std::copy(hi.begin(), hi.end(), model.train_bounds.hi.begin());
  for (const auto& g : j["gps"]) {
    GpComponent gp;
    gp.inputs = matrix_from_json(g["inputs"]);
    gp.targets = vector_from_json(g["targets"]);
    gp.lengthscales = vector_from_json(g["lengthscales"]);
    gp.sigma2 = g["sigma2"].get<double>();
    gp.noise2 = g["noise2"].get<double>();
    gp.jitter = g["jitter"].get<double>();
    gp.initial_nll = g.value("initial_nll", 0.0);
    gp.final_nll = g.value("final_nll", 0.0);
    gp.iterations_run = g.value("iterations_run", 0);
    gp.refactor();
    model.gps.push_back(std::move(gp));
  }
  return model;
}

} // namespace pulsetree
