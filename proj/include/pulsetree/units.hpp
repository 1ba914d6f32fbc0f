#ifndef PULSETREE_UNITS_HPP
#define PULSETREE_UNITS_HPP

namespace pulsetree {

// All internal computation is in CGS: cm, g, s. Pressures in g/(cm s^2),
// flows in mL/s, impedances in g/(cm^4 s). Interfaces use mmHg for pressures.
inline constexpr double kMmHgToCgs = 1333.22;

inline constexpr double mmhg_to_cgs(double p_mmhg) { return p_mmhg * kMmHgToCgs; }
inline constexpr double cgs_to_mmhg(double p_cgs) { return p_cgs / kMmHgToCgs; }

} // namespace pulsetree

#endif
