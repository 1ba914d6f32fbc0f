#ifndef PULSETREE_NETWORK_HPP
#define PULSETREE_NETWORK_HPP

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace pulsetree {

/// Blood properties shared by the whole network (CGS units).
struct FluidConstants {
  double density = 1.03;           // g/mL
  double viscosity = 0.03;         // g/(cm s)
  double profile_exponent = 5.0;   // power-law velocity profile exponent

  void validate() const;
};

enum class Side { Left, Right, Trunk };

const char* side_name(Side s);
Side side_from_name(const std::string& name);

struct VesselSegment {
  std::string id;
  double length = 0.0;        // cm
  double radius_dia = 0.0;    // cm, at the diastolic reference
  std::optional<std::size_t> parent;
  std::vector<std::size_t> children;  // 0 or 2 entries
  Side side = Side::Trunk;

  double area_dia() const;    // pi * radius_dia^2
};

/// Linear pressure-area wall law, one stiffness for the whole vasculature.
struct WallModel {
  double stiffness = 0.0;  // K, g/(cm s^2)
  double p_dia = 0.0;      // diastolic reference pressure, g/(cm s^2)
};

struct ArterialNetwork {
  std::vector<VesselSegment> vessels;
  WallModel wall;
  FluidConstants fluid;
  double period = 0.0;  // s
  std::size_t root = 0;
  std::vector<std::size_t> outlets;

  // Microvascular tree settings carried with the network description.
  double r_min = 0.005;               // cm, tree truncation radius
  std::optional<double> zeta;         // area ratio; if unset, derived from bifurcations

  const VesselSegment& vessel(std::size_t i) const { return vessels.at(i); }
  std::size_t index_of(const std::string& id) const;
  std::size_t bifurcation_count() const;

  /// Area ratio used when building trees: configured value or the network median.
  double effective_zeta() const;

  void validate() const;
};

/// Parses the JSON network description (schema documented in the README).
/// Pressures are converted from mmHg to CGS on the way in.
ArterialNetwork parse_network(const std::string& config_text);

/// Inverse of parse_network: emits JSON that reparses to an identical network.
std::string serialize_network(const ArterialNetwork& net);

/// Wall stiffness from measured systolic/diastolic pressure and area
/// (inversion of the wall law at systole). Inputs and output in consistent
/// pressure units.
double compute_stiffness(double p_sys, double p_dia, double a_sys, double a_dia);

/// Median offspring area ratio A_d2/A_d1 (smaller over larger) over all
/// bifurcations of the network.
double median_area_ratio(const ArterialNetwork& net);

/// Solves r_p^eta = r_d1^eta + r_d2^eta for eta on [0.1, 10] by safeguarded
/// Newton with bisection fallback; |residual| < 1e-10.
double solve_murray_exponent(double r_p, double r_d1, double r_d2);

bool operator==(const FluidConstants& a, const FluidConstants& b);
bool operator==(const VesselSegment& a, const VesselSegment& b);
bool operator==(const WallModel& a, const WallModel& b);
bool operator==(const ArterialNetwork& a, const ArterialNetwork& b);

} // namespace pulsetree

#endif
