#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include "pulsetree/errors.hpp"
#include "pulsetree/network.hpp"
#include "pulsetree/structured_tree.hpp"
#include "pulsetree/units.hpp"

using namespace pulsetree;

namespace {

const char* kYConfig = R"({
  "period_s": 0.6,
  "p_dia_mmHg": 10.0,
  "p_sys_mmHg": 25.0,
  "a_sys_over_a_dia": 1.3,
  "zeta": 0.6,
  "vessels": [
    {"id": "mpa", "length_cm": 3.0, "radius_cm": 0.65, "side": "trunk", "children": ["lpa", "rpa"]},
    {"id": "lpa", "length_cm": 2.0, "radius_cm": 0.50, "side": "left"},
    {"id": "rpa", "length_cm": 2.2, "radius_cm": 0.52, "side": "right"}
  ]
})";

} // namespace

TEST_CASE("single-vessel config parses to a degenerate tree") {
  const char* cfg = R"({
    "period_s": 0.8, "p_dia_mmHg": 8.0, "k_mmHg": 100.0,
    "vessels": [{"id": "v", "length_cm": 2.0, "radius_cm": 0.2, "side": "left"}]
  })";
  const ArterialNetwork net = parse_network(cfg);
  CHECK(net.vessels.size() == 1);
  CHECK(net.outlets.size() == 1);
  CHECK(net.outlets[0] == net.root);
  CHECK(net.wall.stiffness == doctest::Approx(100.0 * kMmHgToCgs));
}

TEST_CASE("Y config parses with two outlets and the mpa root") {
  const ArterialNetwork net = parse_network(kYConfig);
  CHECK(net.vessels.size() == 3);
  CHECK(net.outlets.size() == 2);
  CHECK(net.vessels[net.root].id == "mpa");
  CHECK(net.bifurcation_count() == 1);
  // K derived from the systolic point: (25-10)/(sqrt(1.3)-1) mmHg
  const double k_mmhg = 15.0 / (std::sqrt(1.3) - 1.0);
  CHECK(cgs_to_mmhg(net.wall.stiffness) == doctest::Approx(k_mmhg).epsilon(1e-12));
}

TEST_CASE("dangling child reference is rejected") {
  const char* cfg = R"({
    "period_s": 0.6, "p_dia_mmHg": 10.0, "k_mmHg": 100.0,
    "vessels": [
      {"id": "a", "length_cm": 3.0, "radius_cm": 0.6, "children": ["b", "missing"]},
      {"id": "b", "length_cm": 2.0, "radius_cm": 0.5, "side": "left"}
    ]
  })";
  CHECK_THROWS_WITH_AS(parse_network(cfg),
                       doctest::Contains("dangling reference"), ValidationError);
}

TEST_CASE("one-child vessels and cycles are rejected") {
  const char* one_child = R"({
    "period_s": 0.6, "p_dia_mmHg": 10.0, "k_mmHg": 100.0,
    "vessels": [
      {"id": "a", "length_cm": 3.0, "radius_cm": 0.6, "children": ["b"]},
      {"id": "b", "length_cm": 2.0, "radius_cm": 0.5, "side": "left"}
    ]
  })";
  CHECK_THROWS_AS(parse_network(one_child), ValidationError);

  const char* cycle = R"({
    "period_s": 0.6, "p_dia_mmHg": 10.0, "k_mmHg": 100.0,
    "vessels": [
      {"id": "a", "length_cm": 3.0, "radius_cm": 0.6, "children": ["b", "c"]},
      {"id": "b", "length_cm": 2.0, "radius_cm": 0.5, "children": ["a", "d"]},
      {"id": "c", "length_cm": 2.0, "radius_cm": 0.5, "side": "left"},
      {"id": "d", "length_cm": 2.0, "radius_cm": 0.5, "side": "right"}
    ]
  })";
  CHECK_THROWS_AS(parse_network(cycle), ValidationError);
}

TEST_CASE("nonpositive dimensions are rejected") {
  const char* cfg = R"({
    "period_s": 0.6, "p_dia_mmHg": 10.0, "k_mmHg": 100.0,
    "vessels": [{"id": "v", "length_cm": -2.0, "radius_cm": 0.2, "side": "left"}]
  })";
  CHECK_THROWS_AS(parse_network(cfg), ValidationError);
}

TEST_CASE("serialize/parse round trip is exact") {
  const ArterialNetwork net = parse_network(kYConfig);
  const ArterialNetwork again = parse_network(serialize_network(net));
  CHECK(again == net);
  // and the round trip is a fixed point
  CHECK(serialize_network(again) == serialize_network(net));
}

TEST_CASE("compute_stiffness inverts the wall law at systole") {
  // p_sys 25, p_dia 8, area ratio 1.21: sqrt(1.21) = 1.1 exactly
  const double k = compute_stiffness(25.0, 8.0, 1.21, 1.0);
  CHECK(k == doctest::Approx(170.0).epsilon(1e-12));
  CHECK(compute_stiffness(25.0 * kMmHgToCgs, 8.0 * kMmHgToCgs, 1.21, 1.0) ==
        doctest::Approx(226647.4).epsilon(1e-6));

  CHECK_THROWS_WITH_AS(compute_stiffness(25.0, 8.0, 1.0, 1.0),
                       doctest::Contains("nonpositive strain"), ValidationError);

  // epsilon pulse pressure with unit strain denominator: sqrt(4) - 1 = 1
  const double eps = 1e-6;
  CHECK(compute_stiffness(8.0 + eps, 8.0, 4.0, 1.0) == doctest::Approx(eps).epsilon(1e-9));
}

TEST_CASE("stiffness round trip through the wall law") {
  // forward Eq at systole reproduces p_sys to 1e-12 relative
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    const double p_dia = 5.0 + 10.0 * unif(rng);
    const double p_sys = p_dia + 5.0 + 20.0 * unif(rng);
    const double a_dia = 0.5 + unif(rng);
    const double a_sys = a_dia * (1.05 + 0.5 * unif(rng));
    const double k = compute_stiffness(p_sys, p_dia, a_sys, a_dia);
    const double p_back = k * (std::sqrt(a_sys / a_dia) - 1.0) + p_dia;
    CHECK(p_back == doctest::Approx(p_sys).epsilon(1e-12));
  }
}

TEST_CASE("median area ratio") {
  ArterialNetwork net = parse_network(kYConfig);

  SUBCASE("single bifurcation, direct arithmetic") {
    // radii 0.50 and 0.52 -> (0.50/0.52)^2
    const double expect = (0.50 * 0.50) / (0.52 * 0.52);
    CHECK(median_area_ratio(net) == doctest::Approx(expect).epsilon(1e-12));
  }

  SUBCASE("symmetric bifurcation gives 1, asymmetric (0.4, 0.2) gives 0.25") {
    const char* sym = R"({
      "period_s": 0.6, "p_dia_mmHg": 10.0, "k_mmHg": 100.0,
      "vessels": [
        {"id": "a", "length_cm": 3.0, "radius_cm": 0.6, "children": ["b", "c"]},
        {"id": "b", "length_cm": 2.0, "radius_cm": 0.3, "side": "left"},
        {"id": "c", "length_cm": 2.0, "radius_cm": 0.3, "side": "right"}
      ]
    })";
    CHECK(median_area_ratio(parse_network(sym)) == doctest::Approx(1.0));

    const char* asym = R"({
      "period_s": 0.6, "p_dia_mmHg": 10.0, "k_mmHg": 100.0,
      "vessels": [
        {"id": "a", "length_cm": 3.0, "radius_cm": 0.6, "children": ["b", "c"]},
        {"id": "b", "length_cm": 2.0, "radius_cm": 0.4, "side": "left"},
        {"id": "c", "length_cm": 2.0, "radius_cm": 0.2, "side": "right"}
      ]
    })";
    CHECK(median_area_ratio(parse_network(asym)) == doctest::Approx(0.25).epsilon(1e-12));
  }

  SUBCASE("configured zeta wins over the measured median") {
    CHECK(net.effective_zeta() == doctest::Approx(0.6));
  }

  SUBCASE("no bifurcations is an error") {
    const char* single = R"({
      "period_s": 0.6, "p_dia_mmHg": 10.0, "k_mmHg": 100.0,
      "vessels": [{"id": "v", "length_cm": 2.0, "radius_cm": 0.2, "side": "left"}]
    })";
    CHECK_THROWS_AS(median_area_ratio(parse_network(single)), ValidationError);
  }
}

TEST_CASE("median area ratio is permutation invariant") {
  // A two-level tree with distinct ratios; shuffle the vessel listing order.
  const char* base = R"({
    "period_s": 0.6, "p_dia_mmHg": 10.0, "k_mmHg": 100.0,
    "vessels": [
      {"id": "v0", "length_cm": 3.0, "radius_cm": 0.6, "children": ["v1", "v2"]},
      {"id": "v1", "length_cm": 2.0, "radius_cm": 0.5, "children": ["v3", "v4"]},
      {"id": "v2", "length_cm": 2.0, "radius_cm": 0.4, "side": "right"},
      {"id": "v3", "length_cm": 1.0, "radius_cm": 0.35, "side": "left"},
      {"id": "v4", "length_cm": 1.0, "radius_cm": 0.25, "side": "left"}
    ]
  })";
  const double reference = median_area_ratio(parse_network(base));

  const char* shuffled = R"({
    "period_s": 0.6, "p_dia_mmHg": 10.0, "k_mmHg": 100.0,
    "vessels": [
      {"id": "v4", "length_cm": 1.0, "radius_cm": 0.25, "side": "left"},
      {"id": "v2", "length_cm": 2.0, "radius_cm": 0.4, "side": "right"},
      {"id": "v0", "length_cm": 3.0, "radius_cm": 0.6, "children": ["v1", "v2"]},
      {"id": "v3", "length_cm": 1.0, "radius_cm": 0.35, "side": "left"},
      {"id": "v1", "length_cm": 2.0, "radius_cm": 0.5, "children": ["v3", "v4"]}
    ]
  })";
  CHECK(median_area_ratio(parse_network(shuffled)) == doctest::Approx(reference).epsilon(1e-15));
}

TEST_CASE("Murray exponent solve") {
  SUBCASE("symmetric cube and square laws") {
    const double r3 = std::pow(2.0, -1.0 / 3.0);
    CHECK(solve_murray_exponent(1.0, r3, r3) == doctest::Approx(3.0).epsilon(1e-10));
    const double r2 = std::pow(2.0, -0.5);
    CHECK(solve_murray_exponent(1.0, r2, r2) == doctest::Approx(2.0).epsilon(1e-10));
  }

  SUBCASE("asymmetric case against a bisection oracle") {
    // oracle: bisection on f(eta) = 0.9^eta + 0.6^eta - 1
    double lo = 0.1, hi = 10.0;
    for (int i = 0; i < 100; ++i) {
      const double mid = 0.5 * (lo + hi);
      if (std::pow(0.9, mid) + std::pow(0.6, mid) > 1.0) lo = mid; else hi = mid;
    }
    const double oracle = 0.5 * (lo + hi);
    CHECK(oracle == doctest::Approx(2.72).epsilon(1e-2));
    CHECK(solve_murray_exponent(1.0, 0.9, 0.6) == doctest::Approx(oracle).epsilon(1e-9));
  }

  SUBCASE("offspring radius >= parent has no positive root") {
    CHECK_THROWS_WITH_AS(solve_murray_exponent(1.0, 1.0, 0.5),
                         doctest::Contains("no positive-exponent root"), ValidationError);
    CHECK_THROWS_AS(solve_murray_exponent(1.0, 1.2, 0.5), ValidationError);
  }

  SUBCASE("recovers the exponent that generated scaled radii") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> eta_dist(1.5, 3.0);
    std::uniform_real_distribution<double> zeta_dist(0.3, 1.0);
    for (int i = 0; i < 100; ++i) {
      const double eta = eta_dist(rng);
      const double zeta = zeta_dist(rng);
      const ScalingPair pair = alpha_beta(eta, zeta);
      const double r_p = 0.5;
      const double recovered = solve_murray_exponent(r_p, pair.alpha * r_p, pair.beta * r_p);
      CHECK(recovered == doctest::Approx(eta).epsilon(1e-8));
    }
  }
}
