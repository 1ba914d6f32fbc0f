#ifndef PULSETREE_STRUCTURED_TREE_HPP
#define PULSETREE_STRUCTURED_TREE_HPP

#include <complex>
#include <functional>
#include <iosfwd>
#include <vector>

#include "pulsetree/network.hpp"

namespace pulsetree {

/// Offspring radius scaling factors of the asymmetric binary tree.
struct ScalingPair {
  double alpha = 0.0;
  double beta = 0.0;
};

/// alpha = (1 + zeta^(eta/2))^(-1/eta), beta = alpha * sqrt(zeta).
ScalingPair alpha_beta(double eta, double zeta);

/// Reference radius of the tree vessel reached by g alpha-steps and h beta-steps.
double vessel_radius(double r_term, const ScalingPair& pair, int g, int h);

/// Vessel length from the length-to-radius ratio.
double vessel_length(double r, double lrr);

/// Radius-dependent viscosity law; when empty a constant value is used.
using ViscosityFn = std::function<double(double r)>;

struct StructuredTreeSpec {
  double eta = 0.0;
  double zeta = 0.0;
  double lrr = 0.0;
  double r_min = 0.0;    // cm, truncation radius
  double r_term = 0.0;   // cm, radius of the feeding large vessel
  double stiffness = 0.0;  // g/(cm s^2), same K as the large vessels
  FluidConstants fluid;
  double period = 0.0;   // s
  ViscosityFn viscosity; // empty -> fluid.viscosity for every radius

  double viscosity_at(double r) const;
  void validate() const;
};

struct TreeDepthStats {
  int max_alpha_depth = 0;          // smallest g with r_term * alpha^g < r_min
  long long vessel_count_bound = 0; // number of (g,h) classes with radius >= r_min
};

TreeDepthStats tree_depth_stats(const StructuredTreeSpec& spec);

/// Root input impedance sampled at omega_j = 2*pi*j/T for j = 0..n_freq.
struct ImpedanceSpectrum {
  double period = 0.0;
  std::vector<std::complex<double>> values;  // index j

  double omega(std::size_t j) const;
  std::size_t n_freq() const { return values.empty() ? 0 : values.size() - 1; }
};

/// Computes the root impedance spectrum of the structured tree.
///
/// Each vessel is a lossy transmission line with series impedance
/// z_s = i*omega*rho/A0 + 8*mu/(pi*r0^4) per unit length and shunt admittance
/// y_p = i*omega*C with wall compliance C = 2*A0/K. Bifurcations combine the
/// offspring input impedances in parallel; positions below r_min load their
/// parent with zero impedance. The zero-frequency bin is the resistive
/// recursion Z(0) = 8*mu(r0)*lrr/(pi*r0^3) + Z_L(0).
///
/// The recursion is memoized over (g, h) generation classes, since radius and
/// length depend only on the class.
ImpedanceSpectrum root_impedance_spectrum(const StructuredTreeSpec& spec, int n_freq);

/// Time-domain kernel z(t_k), k = 0..n_time-1, from the conjugate-symmetric
/// extension of the spectrum (DC and Nyquist bins projected to real). The
/// discrete periodic convolution p_n = dt * sum_k z_k q_{n-k} then reproduces
/// p_hat_j = Z(omega_j) q_hat_j, and in particular mean(p) = Z(0) mean(q).
std::vector<double> impedance_kernel_time(const ImpedanceSpectrum& spectrum, int n_time);

/// Debug dump: one row per frequency bin (j, omega, Re Z, Im Z).
void write_spectrum_csv(std::ostream& out, const ImpedanceSpectrum& spectrum);

} // namespace pulsetree

#endif
