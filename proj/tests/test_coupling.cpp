#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "ensemble_lab/coupling.hpp"
#include "ensemble_lab/paramagnet.hpp"
#include "support/exchangeable.hpp"

namespace el = ensemble_lab;
namespace cp = ensemble_lab::coupling;

namespace {

cp::DiscreteMeasure point_mass(std::vector<double> x) { return {{std::move(x)}, {1.0}}; }

// Equal-size uniform measures: an optimal plan is a permutation (Birkhoff), so
// the minimum over all n! matchings is the exact optimum.
double matching_optimum(const cp::DiscreteMeasure& a, const cp::DiscreteMeasure& b, double p) {
  std::vector<std::size_t> perm(a.points.size());
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) s += cp::specific_cost(a.points[i], b.points[perm[i]], p);
    best = std::min(best, s / static_cast<double>(perm.size()));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

cp::DiscreteMeasure random_uniform_cloud(std::size_t n, std::size_t dim, el::Rng& rng) {
  std::normal_distribution<double> g;
  cp::DiscreteMeasure mu;
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> x(dim);
    for (auto& v : x) v = g(rng);
    mu.points.push_back(x);
  }
  mu.weights.assign(n, 1.0 / static_cast<double>(n));
  return mu;
}

cp::DiscreteMeasure random_weighted_cloud(std::size_t n, std::size_t dim, el::Rng& rng) {
  auto mu = random_uniform_cloud(n, dim, rng);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  double s = 0.0;
  for (auto& w : mu.weights) s += (w = u(rng));
  for (auto& w : mu.weights) w /= s;
  return mu;
}

}  // namespace

TEST(LipschitzErrorBound, Examples) {
  EXPECT_DOUBLE_EQ(cp::lipschitz_error_bound(1, 2, 1.0, 0.5), 1.0);
  EXPECT_NEAR(cp::lipschitz_error_bound(1, 1000000, 2.0, 1.0), std::sqrt(1.0 / (1.0 - 1e-6)), 1e-15);
  EXPECT_NEAR(cp::lipschitz_error_bound(1, 1000000, 2.0, 1.0), 1.0000005, 1e-9);
  EXPECT_EQ(cp::lipschitz_error_bound(2, 4, 2.0, 0.0), 0.0);
}

TEST(LipschitzErrorBound, RejectsIndexSetAsLargeAsN) {
  EXPECT_THROW(cp::lipschitz_error_bound(4, 4, 1.0, 0.1), el::DomainError);
  EXPECT_THROW(cp::lipschitz_error_bound(1, 4, 1.0, -0.1), el::DomainError);
}

TEST(MomentErrorBound, Examples) {
  el::MomentIndex one{{3}};
  EXPECT_NEAR(cp::moment_error_bound(one, 2.0, 2.0, 17.0, 0.1, 100), 0.1 * std::sqrt(1.0 / 0.99), 1e-15);
  el::MomentIndex two{{0, 1}};
  EXPECT_NEAR(cp::moment_error_bound(two, 2.0, 2.0, 1.0, 0.5, 8), 2.0 * std::sqrt(2.0 / 0.75) * 0.5, 1e-15);
  EXPECT_EQ(cp::moment_error_bound(two, 2.0, 4.0, 3.0, 0.0, 8), 0.0);
}

TEST(MomentErrorBound, AdmissibilityIsEnforced) {
  el::MomentIndex three{{0, 1, 2}};
  // p = p0 = 2 allows n_J <= 2.
  try {
    cp::moment_error_bound(three, 2.0, 2.0, 1.0, 0.1, 10);
    FAIL();
  } catch (const el::DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("n_J <= p0 + 1 - p0/p"), std::string::npos);
  }
  EXPECT_NO_THROW(cp::moment_error_bound(three, 2.0, 4.0, 1.0, 0.1, 10));
}

TEST(FreeEnergyBound, Examples) {
  EXPECT_NEAR(cp::free_energy_bound(1.0, 1, 100, 1.0, 0.05, 0.0), 0.05 / 0.99, 1e-15);
  EXPECT_EQ(cp::free_energy_bound(1.0, 1, 100, 1.0, 0.0, 0.0), 0.0);
  EXPECT_THROW(cp::free_energy_bound(1.0, 1, 100, 1.0, -0.1, 0.0), el::DomainError);
  EXPECT_THROW(cp::free_energy_bound(-1.0, 1, 100, 1.0, 0.1, 0.0), el::DomainError);
}

TEST(WpBruteforce, IdenticalMarginalsGiveZero) {
  el::Rng rng(11);
  for (int t = 0; t < 10; ++t) {
    auto mu = random_weighted_cloud(7, 3, rng);
    EXPECT_NEAR(cp::wp_bruteforce(mu, mu, 1.0).wp, 0.0, 1e-12);
    EXPECT_NEAR(cp::wp_bruteforce(mu, mu, 2.0).wp, 0.0, 1e-7);  // sqrt of a ~1e-15 cost
  }
}

TEST(WpBruteforce, PointMasses) {
  auto a = point_mass({1.0, 2.0, -1.0});
  auto b = point_mass({0.0, 2.5, 1.0});
  const double expect = std::sqrt((1.0 + 0.25 + 4.0) / 3.0);
  EXPECT_NEAR(cp::wp_bruteforce(a, b, 2.0).wp, expect, 1e-12);
}

TEST(WpBruteforce, ParamagnetOppositeMagnetizations) {
  auto a = el::paramagnet::mc_measure(-0.5, 4);
  auto b = el::paramagnet::mc_measure(0.5, 4);
  auto r = cp::wp_bruteforce(a, b, 1.0);
  EXPECT_NEAR(r.wp, 1.0, 1e-9);
}

TEST(WpBruteforce, MatchesPermutationEnumeration) {
  el::Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    auto a = random_uniform_cloud(6, 2, rng);
    auto b = random_uniform_cloud(6, 2, rng);
    for (double p : {1.0, 1.5, 2.0}) {
      EXPECT_NEAR(cp::wp_bruteforce(a, b, p).min_cost, matching_optimum(a, b, p), 1e-10);
    }
  }
}

TEST(WpBruteforce, PlanHasTheInputMarginals) {
  el::Rng rng(8);
  for (int t = 0; t < 10; ++t) {
    auto a = random_weighted_cloud(9, 3, rng);
    auto b = random_weighted_cloud(13, 3, rng);
    auto r = cp::wp_bruteforce(a, b, 1.0);
    auto rows = r.plan.row_marginal();
    auto cols = r.plan.col_marginal();
    for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_NEAR(rows[i], a.weights[i], 1e-12);
    for (std::size_t j = 0; j < cols.size(); ++j) EXPECT_NEAR(cols[j], b.weights[j], 1e-12);
    EXPECT_NEAR(r.plan.total(), 1.0, 1e-12);
    double cost = 0.0;
    for (auto& e : r.plan.entries) {
      EXPECT_GE(e.weight, 0.0);
      cost += e.weight * cp::specific_cost(a.points[e.i], b.points[e.j], 1.0);
    }
    EXPECT_NEAR(cost, r.min_cost, 1e-12);
  }
}

TEST(WpBruteforce, SymmetricAndTriangle) {
  el::Rng rng(21);
  for (int t = 0; t < 15; ++t) {
    auto a = random_weighted_cloud(5 + t % 4, 2, rng);
    auto b = random_weighted_cloud(6, 2, rng);
    auto c = random_weighted_cloud(4 + t % 3, 2, rng);
    for (double p : {1.0, 2.0}) {
      const double ab = cp::wp_bruteforce(a, b, p).wp;
      const double ba = cp::wp_bruteforce(b, a, p).wp;
      const double bc = cp::wp_bruteforce(b, c, p).wp;
      const double ac = cp::wp_bruteforce(a, c, p).wp;
      EXPECT_NEAR(ab, ba, 1e-9);
      EXPECT_LE(ac, ab + bc + 1e-9);
    }
  }
}

TEST(WpBruteforce, RejectsUnnormalizedWeights) {
  cp::DiscreteMeasure a{{{0.0}, {1.0}}, {0.5, 0.6}};
  EXPECT_THROW(cp::wp_bruteforce(a, a, 1.0), el::DomainError);
}

TEST(TransportCostEstimate, IdentityMapHasZeroCost) {
  auto rep = cp::transport_cost_estimate(
      [](el::Rng& rng) {
        std::normal_distribution<double> g;
        return std::vector<double>{g(rng), g(rng), g(rng)};
      },
      [](const std::vector<double>& x) { return x; }, 2.0, 3, 1000, 4);
  EXPECT_EQ(rep.cost, 0.0);
  EXPECT_EQ(rep.cost_se, 0.0);
  EXPECT_EQ(rep.estimate, 0.0);
  EXPECT_EQ(rep.samples, 1000u);
  EXPECT_EQ(rep.seed, 4u);
}

TEST(TransportCostEstimate, NonFiniteDrawCarriesIndex) {
  // The call counter below is only meaningful when chunks run in order.
  setenv("ENSEMBLE_LAB_THREADS", "1", 1);
  std::size_t calls = 0;
  try {
    cp::transport_cost_estimate([&](el::Rng&) { return std::vector<double>{1.0}; },
                                [&](const std::vector<double>& x) {
                                  return ++calls == 300 ? std::vector<double>{std::nan("")} : x;
                                },
                                1.0, 1, 1000, 1);
    FAIL();
  } catch (const el::NonFiniteSampleError& e) {
    EXPECT_EQ(e.draw_index(), 299u);
  }
  unsetenv("ENSEMBLE_LAB_THREADS");
}

TEST(TransportCostEstimate, DeterministicForSeed) {
  auto sampler = [](el::Rng& rng) {
    std::normal_distribution<double> g;
    return std::vector<double>{g(rng), g(rng)};
  };
  auto T = [](const std::vector<double>& x) { return std::vector<double>{x[1], x[0]}; };
  auto a = cp::transport_cost_estimate(sampler, T, 1.0, 2, 5000, 99);
  auto b = cp::transport_cost_estimate(sampler, T, 1.0, 2, 5000, 99);
  EXPECT_EQ(a.cost, b.cost);
  EXPECT_EQ(a.cost_se, b.cost_se);
}

TEST(TransportCostEstimate, MapCouplingIsNeverBelowTheOptimum) {
  // Paramagnet flip coupling N=6: its exact cost equals |m'-m| and the LP value.
  for (double m : {-2.0 / 3.0, 0.0}) {
    const double mp = 1.0 / 3.0;
    auto rep = cp::chunked_cost_estimate(
        [&](el::Rng& rng) {
          auto [x, y] = el::paramagnet::sample_optimal_coupling(m, mp, 6, rng);
          return cp::specific_cost(x, y, 1.0);
        },
        1.0, 2000, 3);
    const double lp = cp::wp_bruteforce(el::paramagnet::mc_measure(m, 6), el::paramagnet::mc_measure(mp, 6), 1.0).wp;
    EXPECT_GE(rep.estimate + 1e-12, lp);
    EXPECT_NEAR(rep.estimate, lp, 1e-9);
  }
}

TEST(MomentConstant, OrderOneIsOne) {
  auto mu = el::paramagnet::mc_measure(0.0, 4);
  EXPECT_EQ(cp::moment_constant(el::MomentIndex{{1}}, 2.0, mu, mu), 1.0);
  EXPECT_NEAR(cp::moment_constant(el::MomentIndex{{0, 1}}, 2.0, mu, mu), 1.0, 1e-15);
}

TEST(ExchangeabilitySpotCheck, ExchangeableAndNot) {
  el::Rng rng(2);
  auto mu = testsupport::random_exchangeable(4, {-1.0, 0.0, 2.0}, rng);
  auto f = el::observables::min_pair(0, 1);
  EXPECT_LT(cp::exchangeability_spot_check(mu, f, 7), 1e-12);
  cp::DiscreteMeasure skew{{{1.0, -1.0, -1.0}}, {1.0}};
  EXPECT_GT(cp::exchangeability_spot_check(skew, el::observables::coordinate(0), 7), 0.5);
}

TEST(BoundsEndToEnd, LipschitzAndMomentBoundsDominateExactGaps) {
  el::Rng rng(1234);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t N = 3 + trial % 3;
    const std::vector<double> levels = trial % 2 ? std::vector<double>{-1.0, 1.0} : std::vector<double>{-1.0, 0.0, 2.0};
    auto mu1 = testsupport::random_exchangeable(N, levels, rng);
    auto mu2 = testsupport::random_exchangeable(N, levels, rng);
    for (double p : {1.0, 2.0}) {
      const double wp = cp::wp_bruteforce(mu1, mu2, p).wp;
      auto f = testsupport::random_lipschitz({0, 1}, p, rng);
      const double gap = std::abs(mu1.expectation([&](auto& x) { return f(x); }) -
                                  mu2.expectation([&](auto& x) { return f(x); }));
      EXPECT_LE(gap, cp::lipschitz_error_bound(2, N, p, wp) + 1e-12);
    }
    const double w2 = cp::wp_bruteforce(mu1, mu2, 2.0).wp;
    el::MomentIndex J{{0, 1}};
    const double M = cp::moment_constant(J, 2.0, mu1, mu2);
    const double gap = std::abs(mu1.expectation([&](auto& x) { return J(x); }) -
                                mu2.expectation([&](auto& x) { return J(x); }));
    EXPECT_LE(gap, cp::moment_error_bound(J, 2.0, 2.0, M, w2, N) + 1e-12);
  }
}
