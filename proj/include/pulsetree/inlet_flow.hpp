#ifndef PULSETREE_INLET_FLOW_HPP
#define PULSETREE_INLET_FLOW_HPP

#include <string>
#include <vector>

namespace pulsetree {

/// One period of measured volumetric inflow (mL/s).
struct InletFlow {
  std::vector<double> times;   // s, strictly increasing, within [0, period)
  std::vector<double> values;  // mL/s
  double period = 0.0;         // s

  void validate() const;
  double mean() const;
};

/// Parses a CSV with columns (time_s, flow_ml_s); '#' lines are comments.
/// The period is max(time) when the last sample closes the cycle, otherwise
/// it must be passed explicitly.
InletFlow read_inlet_csv(const std::string& path, double period = 0.0);

void write_inlet_csv(const std::string& path, const InletFlow& flow,
                     const std::string& header_comment = "");

/// Periodic cubic-spline interpolant of one flow period.
class PeriodicSpline {
public:
  explicit PeriodicSpline(const InletFlow& flow);

  double operator()(double t) const;  // any t, wrapped into the period
  double period() const { return period_; }

private:
  std::vector<double> knots_;   // with wrap sentinel
  std::vector<double> vals_;
  std::vector<double> second_;  // second derivatives at knots
  double period_ = 0.0;
};

} // namespace pulsetree

#endif
