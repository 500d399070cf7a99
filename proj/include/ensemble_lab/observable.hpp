#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ensemble_lab/errors.hpp"

namespace ensemble_lab {

using SpinConfiguration = std::vector<double>;   // entries in {-1, +1}
using FieldConfiguration = std::vector<double>;

// f∘P_I: a function of the coordinates in `sites` (0-based, distinct).
// `lipschitz` is declared with respect to the l_{norm_p} norm on R^|I|; an
// empty `sup_bound` means unbounded.
struct LocalObservable {
  std::string name;
  std::vector<std::size_t> sites;
  std::function<double(std::span<const double>)> f;
  std::optional<double> lipschitz;
  double norm_p = 1.0;
  std::optional<double> sup_bound;

  std::size_t size() const { return sites.size(); }

  double evaluate_local(std::span<const double> x) const { return f(x); }

  double operator()(std::span<const double> state) const {
    double buf[32];
    std::vector<double> heap;
    double* x = buf;
    if (sites.size() > 32) {
      heap.resize(sites.size());
      x = heap.data();
    }
    for (std::size_t k = 0; k < sites.size(); ++k) x[k] = state[sites[k]];
    return f(std::span<const double>(x, sites.size()));
  }

  void validate(std::size_t N) const {
    if (sites.empty()) throw DomainError("observable '" + name + "': index set is empty");
    std::set<std::size_t> seen;
    for (auto s : sites) {
      if (s >= N)
        throw DomainError("observable '" + name + "': label " + std::to_string(s) +
                          " outside [0, " + std::to_string(N) + ")");
      if (!seen.insert(s).second)
        throw DomainError("observable '" + name + "': repeated label " + std::to_string(s));
    }
    if (!f) throw DomainError("observable '" + name + "': no evaluation function");
  }

  double sup() const {
    if (!sup_bound) throw DomainError("observable '" + name + "' is declared unbounded");
    return *sup_bound;
  }
};

// Multi-index J with repetitions; x^J = prod_k x_{J_k}.
struct MomentIndex {
  std::vector<std::size_t> labels;

  std::size_t order() const { return labels.size(); }  // n_J

  std::vector<std::size_t> distinct() const {
    std::vector<std::size_t> d(labels);
    std::sort(d.begin(), d.end());
    d.erase(std::unique(d.begin(), d.end()), d.end());
    return d;
  }

  // (label, multiplicity) pairs in increasing label order.
  std::vector<std::pair<std::size_t, int>> multiplicities() const {
    std::vector<std::pair<std::size_t, int>> out;
    for (auto l : distinct())
      out.emplace_back(l, static_cast<int>(std::count(labels.begin(), labels.end(), l)));
    return out;
  }

  double operator()(std::span<const double> state) const {
    double v = 1.0;
    for (auto l : labels) v *= state[l];
    return v;
  }

  void validate(std::size_t N) const {
    if (labels.empty()) throw DomainError("moment index must be non-empty");
    for (auto l : labels)
      if (l >= N) throw DomainError("moment label " + std::to_string(l) + " outside [0, N)");
  }

  // The moment as an observable of its distinct coordinates.
  LocalObservable as_observable() const {
    auto mult = multiplicities();
    LocalObservable obs;
    obs.name = "moment";
    for (auto& [l, k] : mult) obs.sites.push_back(l);
    std::vector<int> powers;
    for (auto& [l, k] : mult) powers.push_back(k);
    obs.f = [powers](std::span<const double> x) {
      double v = 1.0;
      for (std::size_t i = 0; i < powers.size(); ++i) v *= std::pow(x[i], powers[i]);
      return v;
    };
    return obs;
  }
};

namespace observables {

// phi_site; on spin states it is bounded by 1.
inline LocalObservable coordinate(std::size_t site, std::optional<double> sup = std::nullopt) {
  return {"phi" + std::to_string(site + 1), {site},
          [](std::span<const double> x) { return x[0]; }, 1.0, 1.0, sup};
}

// prod_{i in sites} phi_i. The Lipschitz constant 1 (l1) holds on {-1,1}^n.
inline LocalObservable spin_product(std::vector<std::size_t> sites) {
  std::string name = "phi";
  for (auto s : sites) name += std::to_string(s + 1);
  return {name, std::move(sites),
          [](std::span<const double> x) {
            double v = 1.0;
            for (double xi : x) v *= xi;
            return v;
          },
          1.0, 1.0, 1.0};
}

// min(phi_a, phi_b): 1-Lipschitz in every l_p norm, bounded by 1 on spins.
inline LocalObservable min_pair(std::size_t a, std::size_t b) {
  return {"min_pair", {a, b}, [](std::span<const double> x) { return std::min(x[0], x[1]); },
          1.0, 1.0, 1.0};
}

// clamp(phi_site, -c, c): bounded, 1-Lipschitz.
inline LocalObservable clipped_coordinate(std::size_t site, double c) {
  return {"clip_phi" + std::to_string(site + 1), {site},
          [c](std::span<const double> x) { return std::clamp(x[0], -c, c); }, 1.0, 1.0, c};
}

}  // namespace observables

// Largest |f(x)-f(y)| / ||x-y||_p over all pairs of `points` (local coordinates).
inline double empirical_lipschitz(const LocalObservable& obs,
                                  const std::vector<std::vector<double>>& points) {
  double worst = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t j = i + 1; j < points.size(); ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < points[i].size(); ++k)
        d += std::pow(std::abs(points[i][k] - points[j][k]), obs.norm_p);
      d = std::pow(d, 1.0 / obs.norm_p);
      if (d == 0.0) continue;
      worst = std::max(worst, std::abs(obs.evaluate_local(points[i]) - obs.evaluate_local(points[j])) / d);
    }
  return worst;
}

}  // namespace ensemble_lab
