#include "pulsetree/solver.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include <Eigen/Dense>

#include "pulsetree/errors.hpp"
#include "pulsetree/structured_tree.hpp"
#include "pulsetree/units.hpp"

namespace pulsetree {

namespace {
constexpr double kPi = std::numbers::pi;
}

const std::array<const char*, 4>& ParameterVector::names() {
  static const std::array<const char*, 4> n = {"eta_left", "lrr_left", "eta_right", "lrr_right"};
  return n;
}

bool ParameterBounds::contains(const ParameterVector& theta) const {
  const auto a = theta.to_array();
  for (int i = 0; i < 4; ++i)
    if (!(a[i] >= lo[i] && a[i] <= hi[i])) return false;
  return true;
}

void ParameterBounds::validate() const {
  for (int i = 0; i < 4; ++i)
    if (!(lo[i] < hi[i]))
      throw ValidationError(std::string("bad bound for ") + ParameterVector::names()[i]);
}

ParameterBounds ParameterBounds::table_defaults() {
  ParameterBounds b;
  b.lo = {1.5, 2.0, 1.5, 2.0};
  b.hi = {3.0, 70.0, 3.0, 70.0};
  return b;
}

double wall_pressure(double area, double area_dia, double stiffness, double p_dia) {
  return stiffness * (std::sqrt(area / area_dia) - 1.0) + p_dia;
}

StructuredTreeSpec outlet_tree_spec(const ArterialNetwork& net, const ParameterVector& theta,
                                    std::size_t outlet_vessel) {
  const auto& v = net.vessel(outlet_vessel);
  if (!v.children.empty())
    throw ValidationError("vessel '" + v.id + "' is not an outlet");
  if (v.side == Side::Trunk)
    throw ValidationError("outlet '" + v.id + "' has side=trunk; calibration networks need left or right");
  StructuredTreeSpec spec;
  spec.eta = v.side == Side::Left ? theta.eta_left : theta.eta_right;
  spec.lrr = v.side == Side::Left ? theta.lrr_left : theta.lrr_right;
  spec.zeta = net.effective_zeta();
  spec.r_min = net.r_min;
  spec.r_term = v.radius_dia;
  spec.stiffness = net.wall.stiffness;
  spec.fluid = net.fluid;
  spec.period = net.period;
  return spec;
}

namespace {

struct VesselGrid {
  int cells = 0;        // nodes 0..cells
  double dx = 0.0;
  double a_dia = 0.0;
  double c0 = 0.0;      // sqrt(K / (2 rho))
  double k = 0.0;
  double p_dia = 0.0;
  double flux_coef = 0.0;  // K / (3 rho sqrt(A_dia))
  std::vector<double> a, q;       // node values
  std::vector<double> ah, qh;     // half-step values (cells entries)
};

struct Junction {
  std::size_t parent, child1, child2;
};

struct Outlet {
  std::size_t vessel;
  std::vector<double> kernel;   // z(t_k) for one period
  std::vector<double> history;  // outlet flow ring buffer
  double z0 = 0.0;              // mean impedance of the tree
};

struct Engine {
  const ArterialNetwork* net = nullptr;
  SolverOptions opts;
  double delta = 0.0;  // (gamma+2)/(gamma+1)
  double fric = 0.0;   // 2 pi mu (gamma+2) / rho
  double dt = 0.0;
  int steps = 0;
  std::vector<VesselGrid> grids;
  std::vector<Junction> junctions;
  std::vector<Outlet> outlets;
  std::vector<double> inflow;  // resampled onto solver steps (one period)

  double celerity(const VesselGrid& g, double a) const {
    return g.c0 * std::sqrt(std::sqrt(a / g.a_dia));
  }
  double pressure(const VesselGrid& g, double a) const {
    return wall_pressure(a, g.a_dia, g.k, g.p_dia);
  }
  double dpressure(const VesselGrid& g, double a) const {
    return g.k / (2.0 * std::sqrt(a * g.a_dia));
  }
  double flux2(const VesselGrid& g, double a, double q) const {
    return delta * q * q / a + g.flux_coef * a * std::sqrt(a);
  }
  double source2(double a, double q) const { return -fric * q / a; }
};

// Linear interpolation of the outgoing characteristic invariant at the foot
// of the characteristic inside the boundary cell.
double foot_invariant(const Engine& e, const VesselGrid& g, bool right_end) {
  if (right_end) {
    const int m = g.cells;
    const double u = g.q[m] / g.a[m];
    const double lam = u + e.celerity(g, g.a[m]);
    double frac = lam * e.dt / g.dx;  // distance back from the boundary
    frac = std::clamp(frac, 0.0, 1.0);
    const double u1 = g.q[m - 1] / g.a[m - 1];
    const double w_m = u + 4.0 * e.celerity(g, g.a[m]);
    const double w_1 = u1 + 4.0 * e.celerity(g, g.a[m - 1]);
    return w_m * (1.0 - frac) + w_1 * frac;
  }
  const double u = g.q[0] / g.a[0];
  const double lam = u - e.celerity(g, g.a[0]);
  double frac = -lam * e.dt / g.dx;
  frac = std::clamp(frac, 0.0, 1.0);
  const double u1 = g.q[1] / g.a[1];
  const double w_0 = u - 4.0 * e.celerity(g, g.a[0]);
  const double w_1 = u1 - 4.0 * e.celerity(g, g.a[1]);
  return w_0 * (1.0 - frac) + w_1 * frac;
}

// Solves u(A) - 4c(A) = w_minus with u = q_in/A for the inlet area.
double solve_inlet_area(const Engine& e, const VesselGrid& g, double q_in, double w_minus) {
  double a = g.a[0];
  for (int it = 0; it < 100; ++it) {
    const double c = e.celerity(g, a);
    const double f = q_in / a - 4.0 * c - w_minus;
    const double df = -q_in / (a * a) - c / a;
    double step = f / df;
    // keep the iterate within a sane area range
    double next = a - step;
    next = std::clamp(next, 1e-4 * g.a_dia, 1e4 * g.a_dia);
    if (std::abs(next - a) < 1e-14 * g.a_dia) return next;
    a = next;
  }
  throw NumericalError("inlet boundary solve failed to converge");
}

// Newton iteration on (A_p, A_1, A_2) enforcing pressure continuity and flow
// conservation at a bifurcation, with flows expressed through the outgoing
// characteristic invariants.
void solve_junction(const Engine& e, VesselGrid& gp, VesselGrid& g1, VesselGrid& g2,
                    double tol) {
  const double wp = foot_invariant(e, gp, true);
  const double w1 = foot_invariant(e, g1, false);
  const double w2 = foot_invariant(e, g2, false);

  Eigen::Vector3d x(gp.a[gp.cells], g1.a[0], g2.a[0]);
  const double p_scale = gp.k;
  double q_scale = std::max(1.0, std::abs(gp.q[gp.cells]));

  for (int it = 0; it < 100; ++it) {
    const double ap = x(0), a1 = x(1), a2 = x(2);
    const double cp = e.celerity(gp, ap);
    const double c1 = e.celerity(g1, a1);
    const double c2 = e.celerity(g2, a2);
    const double qp = ap * (wp - 4.0 * cp);
    const double q1 = a1 * (w1 + 4.0 * c1);
    const double q2 = a2 * (w2 + 4.0 * c2);

    Eigen::Vector3d f(e.pressure(gp, ap) - e.pressure(g1, a1),
                      e.pressure(gp, ap) - e.pressure(g2, a2),
                      qp - q1 - q2);
    const double res = std::max({std::abs(f(0)) / p_scale, std::abs(f(1)) / p_scale,
                                 std::abs(f(2)) / q_scale});
    if (res < tol) {
      gp.a[gp.cells] = ap; gp.q[gp.cells] = qp;
      g1.a[0] = a1; g1.q[0] = q1;
      g2.a[0] = a2; g2.q[0] = q2;
      return;
    }

    Eigen::Matrix3d jac;
    jac << e.dpressure(gp, ap), -e.dpressure(g1, a1), 0.0,
           e.dpressure(gp, ap), 0.0, -e.dpressure(g2, a2),
           wp - 5.0 * cp, -(w1 + 5.0 * c1), -(w2 + 5.0 * c2);
    Eigen::Vector3d step = jac.partialPivLu().solve(f);
    Eigen::Vector3d next = x - step;
    for (int i = 0; i < 3; ++i) {
      const double floor_a = 0.05 * (i == 0 ? gp.a_dia : (i == 1 ? g1.a_dia : g2.a_dia));
      next(i) = std::max(next(i), floor_a);
    }
    x = next;
  }
  throw NumericalError("junction solve failed to converge");
}

// Outlet closure: wall pressure equals the impedance convolution, with the
// current-step flow entering through the z_0 term.
void solve_outlet(const Engine& e, VesselGrid& g, Outlet& out, int pos) {
  const double w_plus = foot_invariant(e, g, true);
  const int n = e.steps;
  const double* z = out.kernel.data();
  const double* h = out.history.data();
  double acc = 0.0;
  for (int j = 0; j < pos; ++j) acc += z[pos - j] * h[j];
  for (int j = pos + 1; j < n; ++j) acc += z[pos - j + n] * h[j];
  const double hist = e.dt * acc;
  const double z0dt = e.dt * z[0];

  double a = g.a[g.cells];
  bool done = false;
  for (int it = 0; it < 100; ++it) {
    const double c = e.celerity(g, a);
    const double q = a * (w_plus - 4.0 * c);
    const double f = e.pressure(g, a) - z0dt * q - hist;
    const double df = e.dpressure(g, a) - z0dt * (w_plus - 5.0 * c);
    double next = a - f / df;
    next = std::clamp(next, 1e-4 * g.a_dia, 1e4 * g.a_dia);
    if (std::abs(next - a) < 1e-14 * g.a_dia) {
      a = next;
      done = true;
      break;
    }
    a = next;
  }
  if (!done) {
    // Bisection fallback: f is -inf near collapse and +inf for very large A.
    double lo = 1e-4 * g.a_dia, hi = 1e4 * g.a_dia;
    auto fval = [&](double aa) {
      const double q = aa * (w_plus - 4.0 * e.celerity(g, aa));
      return e.pressure(g, aa) - z0dt * q - hist;
    };
    if (fval(lo) > 0.0 || fval(hi) < 0.0)
      throw NumericalError("outlet boundary solve failed to bracket");
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (fval(mid) < 0.0) lo = mid; else hi = mid;
    }
    a = 0.5 * (lo + hi);
  }
  const double q_new = a * (w_plus - 4.0 * e.celerity(g, a));
  g.a[g.cells] = a;
  g.q[g.cells] = q_new;
  out.history[static_cast<std::size_t>(pos)] = q_new;
}

void lax_wendroff_step(const Engine& e, VesselGrid& g) {
  const double dt = e.dt;
  const double r = dt / g.dx;
  const int m = g.cells;
  for (int j = 0; j < m; ++j) {
    const double al = g.a[j], ar = g.a[j + 1];
    const double ql = g.q[j], qr = g.q[j + 1];
    const double f2l = e.flux2(g, al, ql), f2r = e.flux2(g, ar, qr);
    const double s2l = e.source2(al, ql), s2r = e.source2(ar, qr);
    g.ah[j] = 0.5 * (al + ar) - 0.5 * r * (qr - ql);
    g.qh[j] = 0.5 * (ql + qr) - 0.5 * r * (f2r - f2l) + 0.25 * dt * (s2l + s2r);
  }
  for (int j = m - 1; j >= 1; --j) {
    const double f2l = e.flux2(g, g.ah[j - 1], g.qh[j - 1]);
    const double f2r = e.flux2(g, g.ah[j], g.qh[j]);
    const double s2l = e.source2(g.ah[j - 1], g.qh[j - 1]);
    const double s2r = e.source2(g.ah[j], g.qh[j]);
    g.a[j] = g.a[j] - r * (g.qh[j] - g.qh[j - 1]);
    g.q[j] = g.q[j] - r * (f2r - f2l) + 0.5 * dt * (s2l + s2r);
  }
}

int ceil_power_of_two(int n) {
  int p = 1;
  while (p < n) p <<= 1;
  return p;
}

struct CycleBuffers {
  std::vector<double> p_mpa, a_mpa, q_lpa, q_rpa, q_in, q_out, p_in, p_root_end;
  std::vector<double> junction_p_jump, junction_q_defect;

  void resize(int n) {
    for (auto* v : {&p_mpa, &a_mpa, &q_lpa, &q_rpa, &q_in, &q_out, &p_in, &p_root_end,
                    &junction_p_jump, &junction_q_defect})
      v->assign(static_cast<std::size_t>(n), 0.0);
  }
};

std::vector<double> sample_series(const std::vector<double>& cycle, int count) {
  const int n = static_cast<int>(cycle.size());
  std::vector<double> out(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    const double pos = static_cast<double>(s) * n / count;
    const int i0 = static_cast<int>(pos);
    const double w = pos - i0;
    const int i1 = (i0 + 1) % n;
    out[static_cast<std::size_t>(s)] = cycle[i0] * (1.0 - w) + cycle[i1] * w;
  }
  return out;
}

} // namespace

SimulationOutput simulate(const ArterialNetwork& net, const ParameterVector& theta,
                          const InletFlow& inlet, const SolverOptions& opts) {
  net.validate();
  inlet.validate();
  const auto th = theta.to_array();
  for (int i = 0; i < 4; ++i)
    if (!(std::isfinite(th[i]) && th[i] > 0.0))
      throw ValidationError(std::string("parameter ") + ParameterVector::names()[i] +
                            " must be positive and finite");
  if (std::abs(inlet.period - net.period) > 1e-9 * net.period)
    throw ValidationError("inlet flow period does not match the network period");
  if (opts.steps_per_period < 2 || (opts.steps_per_period & (opts.steps_per_period - 1)) != 0)
    throw ValidationError("steps_per_period must be a power of two");

  const double zeta = net.effective_zeta();
  const PeriodicSpline spline(inlet);

  Engine e;
  e.net = &net;
  e.opts = opts;
  const double gamma = net.fluid.profile_exponent;
  e.delta = (gamma + 2.0) / (gamma + 1.0);
  e.fric = 2.0 * kPi * net.fluid.viscosity * (gamma + 2.0) / net.fluid.density;

  // Vessel grids.
  e.grids.resize(net.vessels.size());
  for (std::size_t i = 0; i < net.vessels.size(); ++i) {
    const auto& v = net.vessels[i];
    auto& g = e.grids[i];
    g.cells = std::max(2, static_cast<int>(std::ceil(opts.min_cells * opts.resolution_scale)));
    g.dx = v.length / g.cells;
    g.a_dia = v.area_dia();
    g.k = net.wall.stiffness;
    g.p_dia = net.wall.p_dia;
    g.c0 = std::sqrt(net.wall.stiffness / (2.0 * net.fluid.density));
    g.flux_coef = net.wall.stiffness / (3.0 * net.fluid.density * std::sqrt(g.a_dia));
  }

  for (std::size_t i = 0; i < net.vessels.size(); ++i)
    if (net.vessels[i].children.size() == 2)
      e.junctions.push_back({i, net.vessels[i].children[0], net.vessels[i].children[1]});

  // Structured trees per outlet; kernels shared between outlets with the same
  // side and radius.
  struct TreeSpecKey {
    Side side;
    double radius;
    bool operator<(const TreeSpecKey& o) const {
      return side != o.side ? side < o.side : radius < o.radius;
    }
  };

  // Estimate a CFL-safe step count before committing to kernels.
  double peak_u = 0.0;
  for (double q : inlet.values) {
    double a_min = e.grids[net.root].a_dia;
    peak_u = std::max(peak_u, std::abs(q) / (0.7 * a_min));
  }
  double speed = 0.0, dx_min = 1e300;
  for (const auto& g : e.grids) {
    speed = std::max(speed, 1.6 * g.c0);  // c at A up to ~6.5 A_dia
    dx_min = std::min(dx_min, g.dx);
  }
  speed += peak_u;
  int want = static_cast<int>(std::ceil(1.2 * net.period * speed / (opts.cfl * dx_min)));
  int steps = std::max(opts.steps_per_period, ceil_power_of_two(want));

  SimulationOutput out;
  const int count = opts.sample_count;

  for (; steps <= opts.max_steps_per_period; steps *= 2) {
    e.steps = steps;
    e.dt = net.period / steps;

    // Reset state.
    for (auto& g : e.grids) {
      g.a.assign(static_cast<std::size_t>(g.cells) + 1, g.a_dia);
      g.q.assign(static_cast<std::size_t>(g.cells) + 1, 0.0);
      g.ah.assign(static_cast<std::size_t>(g.cells), 0.0);
      g.qh.assign(static_cast<std::size_t>(g.cells), 0.0);
    }

    e.outlets.clear();
    std::map<TreeSpecKey, std::pair<std::vector<double>, double>> kernel_cache;
    for (std::size_t oi : net.outlets) {
      const auto& v = net.vessels[oi];
      if (v.side == Side::Trunk)
        throw ValidationError("outlet '" + v.id + "' has side=trunk; calibration networks need left or right");
      TreeSpecKey key{v.side, v.radius_dia};
      auto it = kernel_cache.find(key);
      if (it == kernel_cache.end()) {
        StructuredTreeSpec spec = outlet_tree_spec(net, theta, oi);
        spec.zeta = zeta;
        const auto spectrum = root_impedance_spectrum(spec, steps / 2);
        it = kernel_cache.emplace(key, std::make_pair(impedance_kernel_time(spectrum, steps),
                                                      spectrum.values[0].real())).first;
      }
      Outlet o;
      o.vessel = oi;
      o.kernel = it->second.first;
      o.z0 = it->second.second;
      o.history.assign(static_cast<std::size_t>(steps), 0.0);
      e.outlets.push_back(std::move(o));
    }

    e.inflow.resize(static_cast<std::size_t>(steps));
    for (int n = 0; n < steps; ++n) e.inflow[static_cast<std::size_t>(n)] = spline(n * e.dt);

    // Identify sampling locations.
    const std::size_t root = net.root;
    const int mid_root = e.grids[root].cells / 2;
    std::size_t lpa = root, rpa = root;
    int mid_lpa = 0, mid_rpa = 0;
    bool have_branches = net.vessels[root].children.size() == 2;
    if (have_branches) {
      for (auto c : net.vessels[root].children) {
        if (net.vessels[c].side == Side::Left) { lpa = c; mid_lpa = e.grids[c].cells / 2; }
        if (net.vessels[c].side == Side::Right) { rpa = c; mid_rpa = e.grids[c].cells / 2; }
      }
      if (lpa == root || rpa == root) have_branches = false;
    }

    CycleBuffers buf, prev;
    buf.resize(steps);
    prev.resize(steps);

    bool unstable = false;
    bool converged = false;
    int cycles = 0;
    double cfl_peak_total = 0.0;
    std::vector<double> cycle_residuals;
    std::string failure = "unstable: CFL violation persists at the step-count ceiling";

    try {
    for (int cycle = 0; cycle < opts.max_cycles && !converged && !unstable; ++cycle) {
      double cfl_peak = 0.0;
      std::swap(buf, prev);
      for (int n = 0; n < steps; ++n) {
        // Record state at t = n dt, then advance to (n+1) dt.
        buf.p_mpa[n] = e.pressure(e.grids[root], e.grids[root].a[mid_root]);
        buf.a_mpa[n] = e.grids[root].a[mid_root];
        if (have_branches) {
          buf.q_lpa[n] = e.grids[lpa].q[mid_lpa];
          buf.q_rpa[n] = e.grids[rpa].q[mid_rpa];
        }
        buf.q_in[n] = e.grids[root].q[0];
        buf.p_in[n] = e.pressure(e.grids[root], e.grids[root].a[0]);
        buf.p_root_end[n] = e.pressure(e.grids[root], e.grids[root].a[e.grids[root].cells]);
        double q_out = 0.0;
        for (const auto& o : e.outlets) q_out += e.grids[o.vessel].q[e.grids[o.vessel].cells];
        buf.q_out[n] = q_out;
        if (opts.record_diagnostics) {
          double pj = 0.0, qd = 0.0;
          for (const auto& jn : e.junctions) {
            const auto& gp = e.grids[jn.parent];
            const double pp = e.pressure(gp, gp.a[gp.cells]);
            pj = std::max(pj, std::abs(pp - e.pressure(e.grids[jn.child1], e.grids[jn.child1].a[0])));
            pj = std::max(pj, std::abs(pp - e.pressure(e.grids[jn.child2], e.grids[jn.child2].a[0])));
            qd = std::max(qd, std::abs(gp.q[gp.cells] - e.grids[jn.child1].q[0] - e.grids[jn.child2].q[0]));
          }
          buf.junction_p_jump[n] = pj;
          buf.junction_q_defect[n] = qd;
        }

        for (auto& g : e.grids) {
          for (int j = 0; j <= g.cells; ++j) {
            const double c = e.celerity(g, g.a[j]);
            const double u = std::abs(g.q[j] / g.a[j]);
            cfl_peak = std::max(cfl_peak, (u + c) * e.dt / g.dx);
          }
        }

        // Boundary solves use the time-n state; interior update is independent.
        const double q_next = e.inflow[static_cast<std::size_t>((n + 1) % steps)];
        const double w_minus = foot_invariant(e, e.grids[root], false);
        const double a_in = solve_inlet_area(e, e.grids[root], q_next, w_minus);

        struct JuncResult { double ap, qp, a1, q1, a2, q2; };
        std::vector<JuncResult> jr(e.junctions.size());
        for (std::size_t ji = 0; ji < e.junctions.size(); ++ji) {
          auto& jn = e.junctions[ji];
          // The junction solver writes directly into the boundary nodes; stash
          // and restore so interior updates still see the time-n state.
          auto& gp = e.grids[jn.parent];
          auto& g1 = e.grids[jn.child1];
          auto& g2 = e.grids[jn.child2];
          const double sp_a = gp.a[gp.cells], sp_q = gp.q[gp.cells];
          const double s1_a = g1.a[0], s1_q = g1.q[0];
          const double s2_a = g2.a[0], s2_q = g2.q[0];
          solve_junction(e, gp, g1, g2, opts.junction_tol);
          jr[ji] = {gp.a[gp.cells], gp.q[gp.cells], g1.a[0], g1.q[0], g2.a[0], g2.q[0]};
          gp.a[gp.cells] = sp_a; gp.q[gp.cells] = sp_q;
          g1.a[0] = s1_a; g1.q[0] = s1_q;
          g2.a[0] = s2_a; g2.q[0] = s2_q;
        }

        struct OutResult { double a, q; };
        std::vector<OutResult> orr(e.outlets.size());
        const int pos = (n + 1) % steps;
        for (std::size_t oi = 0; oi < e.outlets.size(); ++oi) {
          auto& o = e.outlets[oi];
          auto& g = e.grids[o.vessel];
          const double s_a = g.a[g.cells], s_q = g.q[g.cells];
          solve_outlet(e, g, o, pos);
          orr[oi] = {g.a[g.cells], g.q[g.cells]};
          g.a[g.cells] = s_a; g.q[g.cells] = s_q;
        }

        for (auto& g : e.grids) lax_wendroff_step(e, g);

        // Commit boundary values.
        e.grids[root].a[0] = a_in;
        e.grids[root].q[0] = q_next;
        for (std::size_t ji = 0; ji < e.junctions.size(); ++ji) {
          auto& jn = e.junctions[ji];
          auto& gp = e.grids[jn.parent];
          gp.a[gp.cells] = jr[ji].ap; gp.q[gp.cells] = jr[ji].qp;
          e.grids[jn.child1].a[0] = jr[ji].a1; e.grids[jn.child1].q[0] = jr[ji].q1;
          e.grids[jn.child2].a[0] = jr[ji].a2; e.grids[jn.child2].q[0] = jr[ji].q2;
        }
        for (std::size_t oi = 0; oi < e.outlets.size(); ++oi) {
          auto& g = e.grids[e.outlets[oi].vessel];
          g.a[g.cells] = orr[oi].a;
          g.q[g.cells] = orr[oi].q;
        }

        for (const auto& g : e.grids) {
          for (int j = 0; j <= g.cells; ++j) {
            if (!std::isfinite(g.a[j]) || !std::isfinite(g.q[j])) {
              unstable = true;
              break;
            }
            if (g.a[j] <= 0.0)
              throw NumericalError("vessel collapse: negative area");
          }
          if (unstable) break;
        }
        if (unstable) break;
      }

      cfl_peak_total = std::max(cfl_peak_total, cfl_peak);
      if (cfl_peak > opts.cfl) unstable = true;
      if (unstable) break;

      ++cycles;
      if (cycle >= 1) {
        double num = 0.0, den = 0.0;
        for (int n = 0; n < steps; ++n) {
          const double d = buf.p_mpa[n] - prev.p_mpa[n];
          num += d * d;
          den += prev.p_mpa[n] * prev.p_mpa[n];
        }
        const double residual = den > 0.0 ? std::sqrt(num / den) : 1.0;
        cycle_residuals.push_back(residual);
        if (residual < opts.convergence_tol) converged = true;
      }
    }
    } catch (const NumericalError& err) {
      // Retried on a finer time grid; rethrown only at the ceiling.
      unstable = true;
      failure = err.what();
    }

    if (unstable) {
      if (steps * 2 > opts.max_steps_per_period) throw NumericalError(failure);
      continue;  // refine dt and retry
    }

    out.mpa_pressure = sample_series(buf.p_mpa, count);
    for (double& p : out.mpa_pressure) p = cgs_to_mmhg(p);
    out.mpa_area = sample_series(buf.a_mpa, count);
    out.lpa_flow = sample_series(buf.q_lpa, count);
    out.rpa_flow = sample_series(buf.q_rpa, count);
    out.converged = converged;
    out.cycles_run = cycles;
    out.max_pressure_mmhg = *std::max_element(out.mpa_pressure.begin(), out.mpa_pressure.end());

    auto& d = out.diagnostics;
    d.steps_per_period_used = steps;
    d.cfl_peak = cfl_peak_total;
    d.cycle_residuals = std::move(cycle_residuals);
    if (opts.record_diagnostics) {
      for (int n = 0; n < steps; ++n) {
        d.inflow_cycle_volume += buf.q_in[n] * e.dt;
        d.outflow_cycle_volume += buf.q_out[n] * e.dt;
        d.mean_inlet_pressure += buf.p_in[n] / steps;
        d.mean_root_end_pressure += buf.p_root_end[n] / steps;
        d.max_junction_pressure_jump = std::max(d.max_junction_pressure_jump, buf.junction_p_jump[n]);
        d.max_junction_flow_defect = std::max(d.max_junction_flow_defect, buf.junction_q_defect[n]);
      }
      const auto [pmin, pmax] = std::minmax_element(buf.p_mpa.begin(), buf.p_mpa.end());
      d.pulse_pressure = *pmax - *pmin;
      for (const auto& o : e.outlets) d.tree_z0.push_back(o.z0);
    }
    return out;
  }
  throw NumericalError("unstable: CFL violation persists at the step-count ceiling");
}

Eigen::VectorXd model_vector_140(const SimulationOutput& sim) {
  const int n = static_cast<int>(sim.mpa_pressure.size());
  Eigen::VectorXd v(4 * n);
  for (int i = 0; i < n; ++i) {
    v(i) = sim.mpa_pressure[i];
    v(n + i) = sim.lpa_flow[i];
    v(2 * n + i) = sim.rpa_flow[i];
    v(3 * n + i) = sim.mpa_area[i];
  }
  return v;
}

Eigen::VectorXd likelihood_vector_107(const Eigen::VectorXd& model140, double a_dia_cm2) {
  const int n = static_cast<int>(model140.size()) / 4;
  Eigen::VectorXd y(2 + 3 * n);
  y(0) = model140.head(n).maxCoeff();
  y(1) = model140.head(n).minCoeff();
  y.segment(2, n) = model140.segment(n, n);
  y.segment(2 + n, n) = model140.segment(2 * n, n);
  for (int i = 0; i < n; ++i)
    y(2 + 2 * n + i) = 100.0 * (model140(3 * n + i) - a_dia_cm2) / a_dia_cm2;
  return y;
}

Observables extract_observables(const SimulationOutput& sim, double a_dia_cm2) {
  Observables obs;
  obs.model140 = model_vector_140(sim);
  obs.likelihood107 = likelihood_vector_107(obs.model140, a_dia_cm2);
  return obs;
}

} // namespace pulsetree
