#include "pulsetree/network.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_map>

#include <json.hpp>

#include "pulsetree/errors.hpp"
#include "pulsetree/units.hpp"

namespace pulsetree {

using nlohmann::json;

void FluidConstants::validate() const {
  if (!(density > 0.0)) throw ValidationError("fluid density must be positive");
  if (!(viscosity > 0.0)) throw ValidationError("fluid viscosity must be positive");
  if (!(profile_exponent >= 2.0)) throw ValidationError("profile exponent must be >= 2");
}

const char* side_name(Side s) {
  switch (s) {
    case Side::Left: return "left";
    case Side::Right: return "right";
    default: return "trunk";
  }
}

Side side_from_name(const std::string& name) {
  if (name == "left") return Side::Left;
  if (name == "right") return Side::Right;
  if (name == "trunk") return Side::Trunk;
  throw ValidationError("unknown vessel side '" + name + "' (expected left|right|trunk)");
}

double VesselSegment::area_dia() const {
  return std::numbers::pi * radius_dia * radius_dia;
}

std::size_t ArterialNetwork::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < vessels.size(); ++i)
    if (vessels[i].id == id) return i;
  throw ValidationError("unknown vessel id '" + id + "'");
}

std::size_t ArterialNetwork::bifurcation_count() const {
  std::size_t n = 0;
  for (const auto& v : vessels)
    if (v.children.size() == 2) ++n;
  return n;
}

double ArterialNetwork::effective_zeta() const {
  if (zeta) return *zeta;
  return median_area_ratio(*this);
}

void ArterialNetwork::validate() const {
  fluid.validate();
  if (!(period > 0.0)) throw ValidationError("cardiac period must be positive");
  if (vessels.empty()) throw ValidationError("network has no vessels");
  if (!(wall.stiffness > 0.0)) throw ValidationError("wall stiffness must be positive");
  if (!(r_min > 0.0)) throw ValidationError("r_min must be positive");
  if (zeta && !(*zeta > 0.0 && *zeta <= 1.0))
    throw ValidationError("zeta must lie in (0, 1]");

  std::size_t roots = 0;
  for (std::size_t i = 0; i < vessels.size(); ++i) {
    const auto& v = vessels[i];
    if (!(v.length > 0.0)) throw ValidationError("vessel '" + v.id + "': nonpositive length");
    if (!(v.radius_dia > 0.0)) throw ValidationError("vessel '" + v.id + "': nonpositive radius");
    if (v.children.size() != 0 && v.children.size() != 2)
      throw ValidationError("vessel '" + v.id + "' has exactly one child");
    if (!v.parent) ++roots;
    for (auto c : v.children) {
      if (c >= vessels.size()) throw ValidationError("dangling reference in '" + v.id + "'");
      if (!vessels[c].parent || *vessels[c].parent != i)
        throw ValidationError("inconsistent parent link for '" + vessels[c].id + "'");
    }
  }
  if (roots != 1) throw ValidationError("network must have exactly one root vessel");

  // Reachability from the root catches cycles and orphans.
  std::vector<char> seen(vessels.size(), 0);
  std::vector<std::size_t> stack{root};
  std::size_t reached = 0;
  while (!stack.empty()) {
    std::size_t i = stack.back();
    stack.pop_back();
    if (seen[i]) throw ValidationError("cyclic connectivity");
    seen[i] = 1;
    ++reached;
    for (auto c : vessels[i].children) stack.push_back(c);
  }
  if (reached != vessels.size()) throw ValidationError("cyclic connectivity or unreachable vessels");

  for (std::size_t i = 0; i < vessels.size(); ++i) {
    bool leaf = vessels[i].children.empty();
    bool listed = std::find(outlets.begin(), outlets.end(), i) != outlets.end();
    if (leaf != listed)
      throw ValidationError("outlet list does not match the leaves of the tree");
  }
}

ArterialNetwork parse_network(const std::string& config_text) {
  json cfg;
  try {
    cfg = json::parse(config_text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("network config is not valid JSON: ") + e.what());
  }

  ArterialNetwork net;
  try {
    if (!cfg.contains("vessels") || !cfg["vessels"].is_array() || cfg["vessels"].empty())
      throw ValidationError("network config needs a non-empty 'vessels' array");

    std::unordered_map<std::string, std::size_t> index;
    for (const auto& jv : cfg["vessels"]) {
      VesselSegment v;
      v.id = jv.at("id").get<std::string>();
      v.length = jv.at("length_cm").get<double>();
      v.radius_dia = jv.at("radius_cm").get<double>();
      if (jv.contains("side")) v.side = side_from_name(jv["side"].get<std::string>());
      if (index.count(v.id)) throw ValidationError("duplicate vessel id '" + v.id + "'");
      index[v.id] = net.vessels.size();
      net.vessels.push_back(std::move(v));
    }

    // Second pass resolves child references.
    for (std::size_t i = 0; i < net.vessels.size(); ++i) {
      const auto& jv = cfg["vessels"][i];
      if (!jv.contains("children")) continue;
      for (const auto& jc : jv["children"]) {
        auto name = jc.get<std::string>();
        auto it = index.find(name);
        if (it == index.end())
          throw ValidationError("dangling reference: vessel '" + net.vessels[i].id +
                                "' lists unknown child '" + name + "'");
        if (net.vessels[it->second].parent)
          throw ValidationError("vessel '" + name + "' has multiple parents");
        net.vessels[it->second].parent = i;
        net.vessels[i].children.push_back(it->second);
      }
    }

    net.period = cfg.at("period_s").get<double>();
    const double p_dia = mmhg_to_cgs(cfg.at("p_dia_mmHg").get<double>());
    net.wall.p_dia = p_dia;

    if (cfg.contains("k_mmHg")) {
      net.wall.stiffness = mmhg_to_cgs(cfg["k_mmHg"].get<double>());
    } else if (cfg.contains("a_sys_over_a_dia") && cfg.contains("p_sys_mmHg")) {
      const double p_sys = mmhg_to_cgs(cfg["p_sys_mmHg"].get<double>());
      const double ratio = cfg["a_sys_over_a_dia"].get<double>();
      net.wall.stiffness = compute_stiffness(p_sys, p_dia, ratio, 1.0);
    } else {
      throw ValidationError("config must give either k_mmHg or p_sys_mmHg with a_sys_over_a_dia");
    }

    if (cfg.contains("r_min_cm")) net.r_min = cfg["r_min_cm"].get<double>();
    if (cfg.contains("zeta")) net.zeta = cfg["zeta"].get<double>();
    if (cfg.contains("fluid")) {
      const auto& jf = cfg["fluid"];
      if (jf.contains("density")) net.fluid.density = jf["density"].get<double>();
      if (jf.contains("viscosity")) net.fluid.viscosity = jf["viscosity"].get<double>();
      if (jf.contains("profile_exponent"))
        net.fluid.profile_exponent = jf["profile_exponent"].get<double>();
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("network config schema violation: ") + e.what());
  }

  std::size_t roots = 0;
  for (std::size_t i = 0; i < net.vessels.size(); ++i)
    if (!net.vessels[i].parent) {
      net.root = i;
      ++roots;
    }
  if (roots != 1) throw ValidationError("network must have exactly one root vessel");

  for (std::size_t i = 0; i < net.vessels.size(); ++i)
    if (net.vessels[i].children.empty()) net.outlets.push_back(i);

  net.validate();
  return net;
}

namespace {

// Picks the mmHg double whose CGS conversion reproduces the stored value
// bit-exactly, so that parse(serialize(net)) == net.
double mmhg_exact_inverse(double cgs) {
  const double guess = cgs_to_mmhg(cgs);
  for (double m : {guess, std::nextafter(guess, -1e308), std::nextafter(guess, 1e308)})
    if (mmhg_to_cgs(m) == cgs) return m;
  return guess;
}

} // namespace

std::string serialize_network(const ArterialNetwork& net) {
  json cfg;
  cfg["period_s"] = net.period;
  cfg["p_dia_mmHg"] = mmhg_exact_inverse(net.wall.p_dia);
  cfg["k_mmHg"] = mmhg_exact_inverse(net.wall.stiffness);
  cfg["r_min_cm"] = net.r_min;
  if (net.zeta) cfg["zeta"] = *net.zeta;
  cfg["fluid"] = {{"density", net.fluid.density},
                  {"viscosity", net.fluid.viscosity},
                  {"profile_exponent", net.fluid.profile_exponent}};
  cfg["vessels"] = json::array();
  for (const auto& v : net.vessels) {
    json jv;
    jv["id"] = v.id;
    jv["length_cm"] = v.length;
    jv["radius_cm"] = v.radius_dia;
    jv["side"] = side_name(v.side);
    jv["children"] = json::array();
    for (auto c : v.children) jv["children"].push_back(net.vessels[c].id);
    cfg["vessels"].push_back(std::move(jv));
  }
  return cfg.dump(2);
}

double compute_stiffness(double p_sys, double p_dia, double a_sys, double a_dia) {
  if (!(a_dia > 0.0)) throw ValidationError("diastolic area must be positive");
  if (!(p_sys > p_dia)) throw ValidationError("systolic pressure must exceed diastolic");
  const double strain = std::sqrt(a_sys / a_dia) - 1.0;
  if (!(strain > 0.0)) throw ValidationError("nonpositive strain at systole");
  return (p_sys - p_dia) / strain;
}

double median_area_ratio(const ArterialNetwork& net) {
  std::vector<double> ratios;
  for (const auto& v : net.vessels) {
    if (v.children.size() != 2) continue;
    const double a0 = net.vessels[v.children[0]].area_dia();
    const double a1 = net.vessels[v.children[1]].area_dia();
    ratios.push_back(std::min(a0, a1) / std::max(a0, a1));
  }
  if (ratios.empty()) throw ValidationError("network has no bifurcations");
  std::sort(ratios.begin(), ratios.end());
  const std::size_t n = ratios.size();
  if (n % 2 == 1) return ratios[n / 2];
  return 0.5 * (ratios[n / 2 - 1] + ratios[n / 2]);
}

double solve_murray_exponent(double r_p, double r_d1, double r_d2) {
  if (!(r_p > 0.0 && r_d1 > 0.0 && r_d2 > 0.0))
    throw ValidationError("radii must be positive");
  if (r_d1 >= r_p || r_d2 >= r_p)
    throw ValidationError("no positive-exponent root: offspring radius >= parent radius");

  const double x1 = r_d1 / r_p;
  const double x2 = r_d2 / r_p;
  auto f = [&](double eta) { return std::pow(x1, eta) + std::pow(x2, eta) - 1.0; };
  auto df = [&](double eta) {
    return std::pow(x1, eta) * std::log(x1) + std::pow(x2, eta) * std::log(x2);
  };

  // f is strictly decreasing in eta (0 < x1, x2 < 1).
  double lo = 0.1, hi = 10.0;
  if (f(lo) < 0.0 || f(hi) > 0.0)
    throw ValidationError("no positive-exponent root in [0.1, 10]");

  double eta = 0.5 * (lo + hi);
  for (int it = 0; it < 200; ++it) {
    const double fe = f(eta);
    if (std::abs(fe) < 1e-12) return eta;
    if (fe > 0.0) lo = eta; else hi = eta;
    const double dfe = df(eta);
    double next = eta - fe / dfe;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    eta = next;
  }
  if (std::abs(f(eta)) > 1e-10) throw NumericalError("Murray exponent solve did not converge");
  return eta;
}

bool operator==(const FluidConstants& a, const FluidConstants& b) {
  return a.density == b.density && a.viscosity == b.viscosity &&
         a.profile_exponent == b.profile_exponent;
}

bool operator==(const VesselSegment& a, const VesselSegment& b) {
  return a.id == b.id && a.length == b.length && a.radius_dia == b.radius_dia &&
         a.parent == b.parent && a.children == b.children && a.side == b.side;
}

bool operator==(const WallModel& a, const WallModel& b) {
  return a.stiffness == b.stiffness && a.p_dia == b.p_dia;
}

bool operator==(const ArterialNetwork& a, const ArterialNetwork& b) {
  return a.vessels == b.vessels && a.wall == b.wall && a.fluid == b.fluid &&
         a.period == b.period && a.root == b.root && a.outlets == b.outlets &&
         a.r_min == b.r_min && a.zeta == b.zeta;
}

} // namespace pulsetree
