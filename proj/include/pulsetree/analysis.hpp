#ifndef PULSETREE_ANALYSIS_HPP
#define PULSETREE_ANALYSIS_HPP

#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace pulsetree {

/// Fraction of mean flow entering the left lung.
double flow_split(std::span<const double> q_lpa, std::span<const double> q_rpa);

struct TestResult {
  double statistic = 0.0;
  double p = 0.0;
};

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
TestResult ks_test(std::span<const double> a, std::span<const double> b);

/// One-sample KS test against an analytic CDF.
TestResult ks_test_cdf(std::span<const double> a, const std::function<double(double)>& cdf);

/// Mann-Whitney U with midranks for ties and a tie-corrected normal
/// approximation. The statistic counts (a > b) pairs plus half-ties.
TestResult mannwhitney_u(std::span<const double> a, std::span<const double> b);

/// Sample Pearson correlation.
double pearson(std::span<const double> x, std::span<const double> y);

/// Correlation matrix of named columns; |rho| > 0.8 entries are flagged.
struct CorrelationReport {
  std::vector<std::string> names;
  Eigen::MatrixXd rho;
  std::vector<std::pair<int, int>> strong;  // index pairs with |rho| > threshold
  double threshold = 0.8;
};

CorrelationReport correlation_report(const std::vector<std::string>& names,
                                     const Eigen::MatrixXd& columns, double threshold = 0.8);

/// (x_disease - x_baseline) / |x_baseline|.
double relative_change(double baseline, double disease);

/// Equal-width histogram used by the plot-data bundles.
struct Histogram {
  std::vector<double> edges;   // size bins+1
  std::vector<double> counts;  // size bins
};

Histogram histogram(std::span<const double> values, int bins);

} // namespace pulsetree

#endif
