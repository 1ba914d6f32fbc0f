#include "pulsetree/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "pulsetree/errors.hpp"

namespace pulsetree {

namespace {

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

// Asymptotic KS survival function Q(lambda) = 2 sum (-1)^{j-1} exp(-2 j^2 lambda^2).
double ks_pvalue(double lambda) {
  if (lambda < 1e-8) return 1.0;
  double sum = 0.0, sign = 1.0;
  for (int j = 1; j <= 100; ++j) {
    const double term = std::exp(-2.0 * j * j * lambda * lambda);
    sum += sign * term;
    if (term < 1e-12) break;
    sign = -sign;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

} // namespace

double flow_split(std::span<const double> q_lpa, std::span<const double> q_rpa) {
  if (q_lpa.empty() || q_lpa.size() != q_rpa.size())
    throw ValidationError("flow series must be non-empty and equally long");
  const double ml = mean_of(q_lpa);
  const double mr = mean_of(q_rpa);
  if (!(ml + mr > 0.0)) throw ValidationError("zero total mean flow");
  return ml / (ml + mr);
}

TestResult ks_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw ValidationError("KS test needs >= 2 samples per side");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());

  double d = 0.0;
  std::size_t i = 0, j = 0;
  const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
  while (i < sa.size() && j < sb.size()) {
    const double x = std::min(sa[i], sb[j]);
    while (i < sa.size() && sa[i] <= x) ++i;
    while (j < sb.size() && sb[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }

  const double ne = na * nb / (na + nb);
  const double lambda = (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * d;
  return {d, ks_pvalue(lambda)};
}

TestResult ks_test_cdf(std::span<const double> a, const std::function<double(double)>& cdf) {
  if (a.size() < 2) throw ValidationError("KS test needs >= 2 samples");
  std::vector<double> sa(a.begin(), a.end());
  std::sort(sa.begin(), sa.end());
  const double n = static_cast<double>(sa.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    const double f = cdf(sa[i]);
    d = std::max(d, std::abs(static_cast<double>(i + 1) / n - f));
    d = std::max(d, std::abs(f - static_cast<double>(i) / n));
  }
  const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  return {d, ks_pvalue(lambda)};
}

TestResult mannwhitney_u(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2)
    throw ValidationError("Mann-Whitney test needs >= 2 samples per side");
  const std::size_t na = a.size(), nb = b.size(), n = na + nb;

  struct Tagged {
    double value;
    bool from_a;
  };
  std::vector<Tagged> all;
  all.reserve(n);
  for (double x : a) all.push_back({x, true});
  for (double x : b) all.push_back({x, false});
  std::sort(all.begin(), all.end(), [](const Tagged& l, const Tagged& r) { return l.value < r.value; });

  // Midranks and the tie correction term sum(t^3 - t).
  double rank_sum_a = 0.0, tie_term = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && all[j + 1].value == all[i].value) ++j;
    const double t = static_cast<double>(j - i + 1);
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k)
      if (all[k].from_a) rank_sum_a += midrank;
    tie_term += t * t * t - t;
    i = j + 1;
  }

  const double dna = static_cast<double>(na), dnb = static_cast<double>(nb), dn = static_cast<double>(n);
  const double u = rank_sum_a - dna * (dna + 1.0) / 2.0;  // counts a>b pairs + half-ties
  const double mu = dna * dnb / 2.0;
  const double var = dna * dnb / 12.0 * ((dn + 1.0) - tie_term / (dn * (dn - 1.0)));
  if (!(var > 0.0)) return {u, 1.0};  // all values tied

  double z = u - mu;
  z -= std::copysign(std::min(0.5, std::abs(z)), z);  // continuity correction
  z /= std::sqrt(var);
  return {u, 2.0 * (1.0 - normal_cdf(std::abs(z)))};
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 3)
    throw ValidationError("Pearson correlation needs equal lengths >= 3");
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw ValidationError("zero variance in correlation input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

CorrelationReport correlation_report(const std::vector<std::string>& names,
                                     const Eigen::MatrixXd& columns, double threshold) {
  const int d = static_cast<int>(columns.cols());
  if (static_cast<int>(names.size()) != d)
    throw ValidationError("name count does not match column count");
  CorrelationReport report;
  report.names = names;
  report.threshold = threshold;
  report.rho = Eigen::MatrixXd::Identity(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      std::vector<double> x(columns.col(i).data(), columns.col(i).data() + columns.rows());
      std::vector<double> y(columns.col(j).data(), columns.col(j).data() + columns.rows());
      const double r = pearson(x, y);
      report.rho(i, j) = r;
      report.rho(j, i) = r;
      if (std::abs(r) > threshold) report.strong.emplace_back(i, j);
    }
  return report;
}

double relative_change(double baseline, double disease) {
  if (baseline == 0.0) throw ValidationError("relative change undefined for zero baseline");
  return (disease - baseline) / std::abs(baseline);
}

Histogram histogram(std::span<const double> values, int bins) {
  if (values.empty() || bins < 1) throw ValidationError("histogram needs data and >= 1 bin");
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  double lo = *mn, hi = *mx;
  if (lo == hi) hi = lo + 1.0;
  Histogram h;
  h.edges.resize(static_cast<std::size_t>(bins) + 1);
  h.counts.assign(static_cast<std::size_t>(bins), 0.0);
  for (int i = 0; i <= bins; ++i)
    h.edges[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / bins;
  for (double v : values) {
    int idx = static_cast<int>((v - lo) / (hi - lo) * bins);
    idx = std::clamp(idx, 0, bins - 1);
    h.counts[static_cast<std::size_t>(idx)] += 1.0;
  }
  return h;
}

} // namespace pulsetree
