#include "pulsetree/structured_tree.hpp"

#include <cmath>
#include <limits>
#include <mutex>
#include <numbers>
#include <ostream>

#include <fftw3.h>

#include "pulsetree/errors.hpp"

namespace pulsetree {

namespace {
constexpr double kPi = std::numbers::pi;
using cplx = std::complex<double>;
}

ScalingPair alpha_beta(double eta, double zeta) {
  if (!(eta > 0.0)) throw ValidationError("eta must be positive");
  if (!(zeta > 0.0 && zeta <= 1.0)) throw ValidationError("zeta must lie in (0, 1]");
  ScalingPair pair;
  pair.alpha = std::pow(1.0 + std::pow(zeta, eta / 2.0), -1.0 / eta);
  pair.beta = pair.alpha * std::sqrt(zeta);
  return pair;
}

double vessel_radius(double r_term, const ScalingPair& pair, int g, int h) {
  return r_term * std::pow(pair.alpha, g) * std::pow(pair.beta, h);
}

double vessel_length(double r, double lrr) { return r * lrr; }

double StructuredTreeSpec::viscosity_at(double r) const {
  return viscosity ? viscosity(r) : fluid.viscosity;
}

void StructuredTreeSpec::validate() const {
  fluid.validate();
  if (!(eta > 0.0)) throw ValidationError("eta must be positive");
  if (!(zeta > 0.0 && zeta <= 1.0)) throw ValidationError("zeta must lie in (0, 1]");
  if (!(lrr > 0.0)) throw ValidationError("lrr must be positive");
  if (!(r_min > 0.0)) throw ValidationError("r_min must be positive");
  if (!(r_term > r_min))
    throw ValidationError("tree vanishes below truncation radius (r_term <= r_min)");
  if (!(stiffness > 0.0)) throw ValidationError("stiffness must be positive");
  if (!(period > 0.0)) throw ValidationError("period must be positive");
}

TreeDepthStats tree_depth_stats(const StructuredTreeSpec& spec) {
  spec.validate();
  const ScalingPair pair = alpha_beta(spec.eta, spec.zeta);
  TreeDepthStats stats;
  while (vessel_radius(spec.r_term, pair, stats.max_alpha_depth, 0) >= spec.r_min)
    ++stats.max_alpha_depth;
  for (int g = 0; g < stats.max_alpha_depth; ++g) {
    int h = 0;
    while (vessel_radius(spec.r_term, pair, g, h) >= spec.r_min) ++h;
    stats.vessel_count_bound += h;
  }
  return stats;
}

namespace {

/// Per-class geometry shared by every frequency evaluation.
struct TreeTable {
  int max_g = 0;                     // classes have g in [0, max_g)
  std::vector<int> h_count;          // per g: number of existing h values
  std::vector<double> radius;        // flattened [g][h]
  std::vector<double> length;
  std::vector<double> resistance_per_len;  // 8*mu(r)/(pi r^4)
  std::vector<std::size_t> offset;   // row start per g

  std::size_t at(int g, int h) const { return offset[g] + h; }
  bool exists(int g, int h) const { return g < max_g && h < h_count[g]; }
};

TreeTable build_table(const StructuredTreeSpec& spec) {
  const ScalingPair pair = alpha_beta(spec.eta, spec.zeta);
  TreeTable t;
  while (vessel_radius(spec.r_term, pair, t.max_g, 0) >= spec.r_min) ++t.max_g;
  t.h_count.resize(t.max_g);
  t.offset.resize(t.max_g);
  for (int g = 0; g < t.max_g; ++g) {
    t.offset[g] = t.radius.size();
    int h = 0;
    while (true) {
      const double r = vessel_radius(spec.r_term, pair, g, h);
      if (r < spec.r_min) break;
      t.radius.push_back(r);
      t.length.push_back(vessel_length(r, spec.lrr));
      t.resistance_per_len.push_back(8.0 * spec.viscosity_at(r) / (kPi * r * r * r * r));
      ++h;
    }
    t.h_count[g] = h;
  }
  return t;
}

/// Zero-frequency resistive recursion: Z(0) = R_vessel + parallel(offspring).
class MeanImpedance {
public:
  explicit MeanImpedance(const TreeTable& table)
      : table_(table), memo_(table.radius.size(), std::numeric_limits<double>::quiet_NaN()) {}

  double root() { return input(0, 0); }

private:
  double input(int g, int h) {
    if (!table_.exists(g, h)) return 0.0;  // below r_min: terminal load
    double& slot = memo_[table_.at(g, h)];
    if (!std::isnan(slot)) return slot;
    const double z1 = input(g + 1, h);
    const double z2 = input(g, h + 1);
    const double denom = z1 + z2;
    const double z_load = denom > 0.0 ? z1 * z2 / denom : 0.0;
    const std::size_t i = table_.at(g, h);
    slot = table_.resistance_per_len[i] * table_.length[i] + z_load;
    return slot;
  }

  const TreeTable& table_;
  std::vector<double> memo_;
};

/// One-frequency transmission-line recursion over (g,h) classes.
class LineImpedance {
public:
  LineImpedance(const TreeTable& table, const StructuredTreeSpec& spec, double omega)
      : table_(table), spec_(spec), omega_(omega),
        memo_(table.radius.size(), cplx(std::numeric_limits<double>::quiet_NaN(), 0.0)) {}

  cplx root() { return input(0, 0); }

private:
  cplx input(int g, int h) {
    if (!table_.exists(g, h)) return cplx(0.0, 0.0);
    cplx& slot = memo_[table_.at(g, h)];
    if (!std::isnan(slot.real())) return slot;

    const cplx z1 = input(g + 1, h);
    const cplx z2 = input(g, h + 1);
    const cplx denom = z1 + z2;
    const cplx z_load = std::abs(denom) > 0.0 ? z1 * z2 / denom : cplx(0.0, 0.0);

    const std::size_t i = table_.at(g, h);
    const double r = table_.radius[i];
    const double len = table_.length[i];
    const double area = kPi * r * r;
    const cplx series(table_.resistance_per_len[i], omega_ * spec_.fluid.density / area);
    const cplx shunt(0.0, omega_ * 2.0 * area / spec_.stiffness);
    const cplx kappa = std::sqrt(series * shunt);
    const cplx z_char = std::sqrt(series / shunt);
    const cplx th = std::tanh(kappa * len);
    slot = z_char * (z_load + z_char * th) / (z_char + z_load * th);
    return slot;
  }

  const TreeTable& table_;
  const StructuredTreeSpec& spec_;
  double omega_;
  std::vector<cplx> memo_;
};

} // namespace

double ImpedanceSpectrum::omega(std::size_t j) const {
  return 2.0 * kPi * static_cast<double>(j) / period;
}

ImpedanceSpectrum root_impedance_spectrum(const StructuredTreeSpec& spec, int n_freq) {
  spec.validate();
  if (n_freq < 1) throw ValidationError("n_freq must be at least 1");

  const TreeTable table = build_table(spec);
  ImpedanceSpectrum spectrum;
  spectrum.period = spec.period;
  spectrum.values.resize(static_cast<std::size_t>(n_freq) + 1);

  spectrum.values[0] = cplx(MeanImpedance(table).root(), 0.0);
  for (int j = 1; j <= n_freq; ++j) {
    const double omega = 2.0 * kPi * j / spec.period;
    spectrum.values[static_cast<std::size_t>(j)] = LineImpedance(table, spec, omega).root();
  }
  return spectrum;
}

std::vector<double> impedance_kernel_time(const ImpedanceSpectrum& spectrum, int n_time) {
  if (n_time < 2 || n_time % 2 != 0) throw ValidationError("n_time must be even and >= 2");
  const std::size_t half = static_cast<std::size_t>(n_time) / 2;
  if (spectrum.n_freq() < half)
    throw ValidationError("spectrum is missing frequencies: need j = 0.." + std::to_string(half));

  // Conjugate-symmetric extension; a real kernel requires real DC and Nyquist
  // bins, so their imaginary parts are dropped here.
  std::vector<cplx> bins(static_cast<std::size_t>(n_time));
  bins[0] = cplx(spectrum.values[0].real(), 0.0);
  for (std::size_t j = 1; j < half; ++j) {
    bins[j] = spectrum.values[j];
    bins[static_cast<std::size_t>(n_time) - j] = std::conj(spectrum.values[j]);
  }
  bins[half] = cplx(spectrum.values[half].real(), 0.0);

  // FFTW planning is not thread-safe; execution is.
  static std::mutex plan_mutex;
  std::vector<cplx> out(static_cast<std::size_t>(n_time));
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(plan_mutex);
    plan = fftw_plan_dft_1d(n_time,
                            reinterpret_cast<fftw_complex*>(bins.data()),
                            reinterpret_cast<fftw_complex*>(out.data()),
                            FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard<std::mutex> lock(plan_mutex);
    fftw_destroy_plan(plan);
  }

  // z_k = (1/T) sum_j Z_j e^{2 pi i j k / N}; FFTW backward is unnormalized.
  const double scale = 1.0 / spectrum.period;
  std::vector<double> kernel(static_cast<std::size_t>(n_time));
  double norm = 0.0, imag_max = 0.0;
  for (std::size_t k = 0; k < kernel.size(); ++k) {
    kernel[k] = out[k].real() * scale;
    norm = std::max(norm, std::abs(kernel[k]));
    imag_max = std::max(imag_max, std::abs(out[k].imag() * scale));
  }
  if (norm > 0.0 && imag_max > 1e-10 * norm)
    throw NumericalError("impedance kernel has a non-real residue");
  return kernel;
}

void write_spectrum_csv(std::ostream& out, const ImpedanceSpectrum& spectrum) {
  out << "j,omega_rad_s,re_z,im_z\n";
  char buf[128];
  for (std::size_t j = 0; j < spectrum.values.size(); ++j) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", j, spectrum.omega(j),
                  spectrum.values[j].real(), spectrum.values[j].imag());
    out << buf;
  }
}

} // namespace pulsetree
