#pragma once

// Random permutation-invariant discrete measures and Lipschitz observables for
// end-to-end checks of the coupling bounds.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <vector>

#include "ensemble_lab/coupling.hpp"
#include "ensemble_lab/observable.hpp"
#include "ensemble_lab/random.hpp"

namespace ensemble_lab::random_measures {

// Uniform measure on the orbit of `base` under coordinate permutations.
inline void add_orbit(std::map<std::vector<double>, double>& acc, std::vector<double> base, double weight) {
  std::sort(base.begin(), base.end());
  std::vector<std::vector<double>> orbit;
  do orbit.push_back(base);
  while (std::next_permutation(base.begin(), base.end()));
  for (auto& x : orbit) acc[x] += weight / static_cast<double>(orbit.size());
}

// Mixture of 1-3 orbits of points with coordinates drawn from `levels`.
inline coupling::DiscreteMeasure random_exchangeable(std::size_t N, const std::vector<double>& levels,
                                                         Rng& rng) {
  std::uniform_int_distribution<int> count(1, 3);
  std::uniform_int_distribution<std::size_t> lvl(0, levels.size() - 1);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  const int k = count(rng);
  std::vector<double> w(k);
  double total = 0.0;
  for (auto& v : w) total += (v = u(rng));
  std::map<std::vector<double>, double> acc;
  for (int j = 0; j < k; ++j) {
    std::vector<double> base(N);
    for (auto& v : base) v = levels[lvl(rng)];
    add_orbit(acc, base, w[j] / total);
  }
  coupling::DiscreteMeasure mu;
  double s = 0.0;
  for (auto& [x, p] : acc) {
    mu.points.push_back(x);
    mu.weights.push_back(p);
    s += p;
  }
  for (auto& p : mu.weights) p /= s;
  return mu;
}

// f(x) = clamp(a.x + c, -B, B) with ||a||_q <= 1 for the dual exponent q of p,
// so f is bounded and 1-Lipschitz in l_p.
inline LocalObservable random_lipschitz(std::vector<std::size_t> sites, double p, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> a(sites.size());
  for (auto& v : a) v = u(rng);
  double qnorm = 0.0;
  if (p == 1.0) {
    for (double v : a) qnorm = std::max(qnorm, std::abs(v));
  } else {
    const double q = p / (p - 1.0);
    for (double v : a) qnorm += std::pow(std::abs(v), q);
    qnorm = std::pow(qnorm, 1.0 / q);
  }
  for (auto& v : a) v /= qnorm;
  const double c = 0.3 * u(rng);
  const double B = 0.5 + 0.5 * std::abs(u(rng));
  LocalObservable f;
  f.name = "clamped_linear";
  f.sites = std::move(sites);
  f.f = [a, c, B](std::span<const double> x) {
    double s = c;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * x[i];
    return std::clamp(s, -B, B);
  };
  f.lipschitz = 1.0;
  f.norm_p = p;
  f.sup_bound = B;
  return f;
}

}  // namespace ensemble_lab::random_measures
