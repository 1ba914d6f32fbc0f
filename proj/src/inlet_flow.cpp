#include "pulsetree/inlet_flow.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "pulsetree/errors.hpp"

namespace pulsetree {

void InletFlow::validate() const {
  if (!(period > 0.0)) throw ValidationError("inlet flow period must be positive");
  if (times.size() != values.size() || times.size() < 3)
    throw ValidationError("inlet flow needs at least 3 (time, value) samples");
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!std::isfinite(times[i]) || !std::isfinite(values[i]))
      throw ValidationError("inlet flow contains non-finite entries");
    if (i > 0 && !(times[i] > times[i - 1]))
      throw ValidationError("inlet flow times must be strictly increasing");
  }
  if (times.front() < 0.0 || times.back() >= period)
    throw ValidationError("inlet flow times must lie in [0, period)");
}

double InletFlow::mean() const {
  // Trapezoidal average over one full period with periodic wrap.
  double integral = 0.0;
  const std::size_t n = times.size();
  for (std::size_t i = 0; i + 1 < n; ++i)
    integral += 0.5 * (values[i] + values[i + 1]) * (times[i + 1] - times[i]);
  integral += 0.5 * (values.back() + values.front()) * (period - times.back() + times.front());
  return integral / period;
}

InletFlow read_inlet_csv(const std::string& path, double period) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open inlet CSV: " + path);
  InletFlow flow;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    double t, q;
    if (!(ss >> t >> q)) continue;  // header row
    flow.times.push_back(t);
    flow.values.push_back(q);
  }
  if (flow.times.size() < 3) throw ValidationError("inlet CSV has fewer than 3 samples: " + path);

  if (period > 0.0) {
    flow.period = period;
  } else {
    flow.period = flow.times.back();
  }
  // A closing sample at t == period duplicates t = 0; drop it.
  if (!flow.times.empty() && flow.times.back() >= flow.period) {
    flow.times.pop_back();
    flow.values.pop_back();
  }
  flow.validate();
  return flow;
}

void write_inlet_csv(const std::string& path, const InletFlow& flow,
                     const std::string& header_comment) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write inlet CSV: " + path);
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  out << "time_s,flow_ml_s\n";
  char buf[80];
  for (std::size_t i = 0; i < flow.times.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", flow.times[i], flow.values[i]);
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", flow.period, flow.values.front());
  out << buf;
}

PeriodicSpline::PeriodicSpline(const InletFlow& flow) {
  flow.validate();
  period_ = flow.period;
  const std::size_t n = flow.times.size();
  knots_ = flow.times;
  vals_ = flow.values;

  // Periodic natural spline: solve the cyclic tridiagonal system for the
  // second derivatives M_i. Knot intervals h_i wrap at the period boundary.
  std::vector<double> h(n);
  for (std::size_t i = 0; i + 1 < n; ++i) h[i] = knots_[i + 1] - knots_[i];
  h[n - 1] = period_ - knots_[n - 1] + knots_[0];

  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd rhs(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t prev = (i + n - 1) % n;
    const std::size_t next = (i + 1) % n;
    A(i, prev) += h[prev] / 6.0;
    A(i, i) += (h[prev] + h[i]) / 3.0;
    A(i, next) += h[i] / 6.0;
    const double slope_next = (vals_[next] - vals_[i]) / h[i];
    const double slope_prev = (vals_[i] - vals_[prev]) / h[prev];
    rhs(i) = slope_next - slope_prev;
  }
  Eigen::VectorXd m = A.partialPivLu().solve(rhs);
  second_.assign(m.data(), m.data() + n);
}

double PeriodicSpline::operator()(double t) const {
  double s = std::fmod(t - knots_[0], period_);
  if (s < 0.0) s += period_;
  s += knots_[0];

  const std::size_t n = knots_.size();
  // Locate the knot interval containing s (the last interval wraps).
  auto it = std::upper_bound(knots_.begin(), knots_.end(), s);
  std::size_t i = (it == knots_.begin()) ? n - 1 : static_cast<std::size_t>(it - knots_.begin()) - 1;
  const std::size_t j = (i + 1) % n;
  const double hi = (i + 1 < n) ? knots_[i + 1] - knots_[i] : period_ - knots_[n - 1] + knots_[0];

  const double a = (i + 1 < n ? knots_[i + 1] : knots_[0] + period_) - s;
  const double b = s - knots_[i];
  return (second_[i] * a * a * a + second_[j] * b * b * b) / (6.0 * hi) +
         (vals_[i] / hi - second_[i] * hi / 6.0) * a +
         (vals_[j] / hi - second_[j] * hi / 6.0) * b;
}

} // namespace pulsetree
