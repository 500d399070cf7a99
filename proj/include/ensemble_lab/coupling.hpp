#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ensemble_lab/errors.hpp"
#include "ensemble_lab/numerics.hpp"
#include "ensemble_lab/observable.hpp"
#include "ensemble_lab/random.hpp"

namespace ensemble_lab::coupling {

// Parameters of w_p(mu1, mu2) = inf_gamma (E_gamma (1/N) sum_i |x_i - y_i|^p)^{1/p}.
struct FluctuationDistanceQuery {
  enum class CostKind { specific_p_norm };
  double p = 1.0;
  std::size_t N = 1;
  CostKind cost_kind = CostKind::specific_p_norm;

  void validate() const {
    if (!(p >= 1.0)) throw DomainError("cost exponent p must be >= 1");
    if (N < 1) throw DomainError("N must be >= 1");
  }
};

namespace detail {

inline double size_factor(std::size_t size_I, std::size_t N, double p) {
  if (size_I < 1) throw DomainError("|I| must be >= 1");
  if (size_I >= N)
    throw DomainError("|I| = " + std::to_string(size_I) + " must be < N = " + std::to_string(N) +
                      " (1 - |I|/N must be positive)");
  if (!(p >= 1.0)) throw DomainError("p must be >= 1");
  const double r = static_cast<double>(size_I) / static_cast<double>(N);
  return std::pow(static_cast<double>(size_I) / (1.0 - r), 1.0 / p);
}

}  // namespace detail

// (|I| / (1 - |I|/N))^{1/p} * w_p: bounds |<f∘P_I>_1 - <f∘P_I>_2| for 1-Lipschitz f
// (l_p norm) under two permutation-invariant measures.
inline double lipschitz_error_bound(std::size_t size_I, std::size_t N, double p, double wp_value) {
  if (!(wp_value >= 0.0)) throw DomainError("w_p must be >= 0");
  return detail::size_factor(size_I, N, p) * wp_value;
}

inline bool moment_admissible(std::size_t n_J, double p, double p0) {
  return static_cast<double>(n_J) <= p0 + 1.0 - p0 / p + 1e-12;
}

// n_J * M^{n_J - 1} * (|I| / (1 - |I|/N))^{1/p} * w_p for the moment x^J.
inline double moment_error_bound(const MomentIndex& J, double p, double p0, double M,
                                 double wp_value, std::size_t N) {
  J.validate(N);
  if (!(p > 1.0)) throw DomainError("moment bound requires p > 1");
  if (!(p0 >= p)) throw DomainError("moment bound requires p0 >= p");
  if (!(M >= 0.0)) throw DomainError("moment constant M must be >= 0");
  if (!(wp_value >= 0.0)) throw DomainError("w_p must be >= 0");
  const std::size_t n_J = J.order();
  if (!moment_admissible(n_J, p, p0))
    throw DomainError("admissibility n_J <= p0 + 1 - p0/p violated: n_J = " + std::to_string(n_J) +
                      ", p0 + 1 - p0/p = " + std::to_string(p0 + 1.0 - p0 / p));
  const double factor = detail::size_factor(J.distinct().size(), N, p);
  const double mpow = n_J == 1 ? 1.0 : std::pow(M, static_cast<double>(n_J - 1));
  return static_cast<double>(n_J) * mpow * factor * wp_value;
}

// C * (|I| / (1 - |I|/N))^{1/p} * (sigma + |eps - <H>/N|).
inline double free_energy_bound(double C, std::size_t size_I, std::size_t N, double p, double sigma,
                                double mismatch) {
  if (!(C >= 0.0)) throw DomainError("free_energy_bound: C must be >= 0");
  if (!(sigma >= 0.0)) throw DomainError("free_energy_bound: sigma must be >= 0");
  if (!(mismatch >= 0.0)) throw DomainError("free_energy_bound: mismatch must be >= 0");
  return C * detail::size_factor(size_I, N, p) * (sigma + mismatch);
}

struct DiscreteMeasure {
  std::vector<std::vector<double>> points;
  std::vector<double> weights;

  std::size_t dim() const { return points.empty() ? 0 : points.front().size(); }

  void validate() const {
    if (points.empty()) throw DomainError("discrete measure has empty support");
    if (points.size() != weights.size()) throw DomainError("points/weights size mismatch");
    double total = 0.0;
    for (std::size_t k = 0; k < points.size(); ++k) {
      if (points[k].size() != dim()) throw DomainError("support points differ in dimension");
      if (!(weights[k] >= 0.0)) throw DomainError("negative weight");
      total += weights[k];
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw DomainError("weights sum to " + std::to_string(total) + ", not 1");
  }

  template <class G>
  double expectation(G&& g) const {
    double s = 0.0;
    for (std::size_t k = 0; k < points.size(); ++k) s += weights[k] * g(points[k]);
    return s;
  }
};

struct JointEntry {
  std::size_t i;  // index into marginal 1
  std::size_t j;  // index into marginal 2
  double weight;
};

struct DiscreteJointDistribution {
  std::vector<JointEntry> entries;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::vector<double> row_marginal() const {
    std::vector<double> r(rows, 0.0);
    for (auto& e : entries) r[e.i] += e.weight;
    return r;
  }
  std::vector<double> col_marginal() const {
    std::vector<double> c(cols, 0.0);
    for (auto& e : entries) c[e.j] += e.weight;
    return c;
  }
  double total() const {
    double t = 0.0;
    for (auto& e : entries) t += e.weight;
    return t;
  }
};

inline double specific_cost(std::span<const double> x, std::span<const double> y, double p) {
  double s = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double d = std::abs(x[k] - y[k]);
    s += p == 1.0 ? d : (p == 2.0 ? d * d : std::pow(d, p));
  }
  return s / static_cast<double>(x.size());
}

struct TransportSolution {
  double min_cost = 0.0;  // min over couplings of E c(x, y)
  DiscreteJointDistribution plan;
  std::size_t iterations = 0;
};

// Transportation simplex (u-v method) on a dense cost matrix, row-major m x n.
// Start from the north-west corner basis; enter the most negative reduced
// cost; pivot around the unique cycle in the basis tree.
inline TransportSolution solve_transport(std::span<const double> supply, std::span<const double> demand,
                                         std::span<const double> cost) {
  const std::size_t m = supply.size(), n = demand.size();
  if (m == 0 || n == 0) throw DomainError("transport problem with empty side");
  if (cost.size() != m * n) throw DomainError("cost matrix has wrong size");

  struct Cell {
    std::size_t i, j;
    double flow;
  };
  std::vector<Cell> basis;
  basis.reserve(m + n - 1);
  {
    std::size_t i = 0, j = 0;
    double ra = supply[0], rb = demand[0];
    for (;;) {
      if (i == m - 1 && j == n - 1) {
        basis.push_back({i, j, std::max(0.0, std::min(ra, rb))});
        break;
      }
      if (i == m - 1 || (j != n - 1 && rb <= ra)) {
        basis.push_back({i, j, std::max(0.0, rb)});
        ra -= rb;
        rb = demand[++j];
      } else {
        basis.push_back({i, j, std::max(0.0, ra)});
        rb -= ra;
        ra = supply[++i];
      }
    }
  }
  if (basis.size() != m + n - 1) throw InternalError("initial basis is not a spanning tree");

  double scale = 0.0;
  for (double c : cost) scale = std::max(scale, std::abs(c));
  const double tol = 1e-13 * (1.0 + scale);

  std::vector<int> cell_slot(m * n, -1);
  for (std::size_t k = 0; k < basis.size(); ++k) cell_slot[basis[k].i * n + basis[k].j] = static_cast<int>(k);

  const std::size_t nodes = m + n;
  std::vector<std::vector<std::size_t>> adj(nodes);
  std::vector<double> u(m), v(n);
  std::vector<char> seen(nodes);
  std::vector<long> parent_edge(nodes);
  std::vector<std::size_t> queue;
  queue.reserve(nodes);
  auto other = [&](const Cell& c, std::size_t node) { return node < m ? m + c.j : c.i; };

  const std::size_t cap = 20 * m * n + 10000;
  std::size_t iter = 0;
  for (;; ++iter) {
    if (iter > cap) throw InternalError("transportation simplex exceeded its iteration cap");
    for (auto& a : adj) a.clear();
    for (std::size_t k = 0; k < basis.size(); ++k) {
      adj[basis[k].i].push_back(k);
      adj[m + basis[k].j].push_back(k);
    }
    // Potentials: u_i + v_j = c_ij on basic cells, u_0 = 0.
    std::fill(seen.begin(), seen.end(), 0);
    queue.clear();
    queue.push_back(0);
    seen[0] = 1;
    u[0] = 0.0;
    for (std::size_t q = 0; q < queue.size(); ++q) {
      const std::size_t node = queue[q];
      for (auto k : adj[node]) {
        const auto& c = basis[k];
        const std::size_t nb = other(c, node);
        if (seen[nb]) continue;
        seen[nb] = 1;
        if (nb >= m)
          v[c.j] = cost[c.i * n + c.j] - u[c.i];
        else
          u[c.i] = cost[c.i * n + c.j] - v[c.j];
        queue.push_back(nb);
      }
    }
    if (queue.size() != nodes) throw InternalError("basis lost its spanning-tree property");

    double best = -tol;
    std::size_t ei = m, ej = n;
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = &cost[i * n];
      for (std::size_t j = 0; j < n; ++j) {
        const double r = row[j] - u[i] - v[j];
        if (r < best && cell_slot[i * n + j] < 0) {
          best = r;
          ei = i;
          ej = j;
        }
      }
    }
    if (ei == m) break;

    // Tree path from row ei to column ej.
    std::fill(seen.begin(), seen.end(), 0);
    queue.clear();
    queue.push_back(ei);
    seen[ei] = 1;
    parent_edge[ei] = -1;
    const std::size_t target = m + ej;
    for (std::size_t q = 0; q < queue.size() && !seen[target]; ++q) {
      const std::size_t node = queue[q];
      for (auto k : adj[node]) {
        const std::size_t nb = other(basis[k], node);
        if (seen[nb]) continue;
        seen[nb] = 1;
        parent_edge[nb] = static_cast<long>(k);
        queue.push_back(nb);
      }
    }
    if (!seen[target]) throw InternalError("no basis path for entering cell");
    std::vector<std::size_t> path;  // edges ordered from the column back to the row
    for (std::size_t node = target; node != ei;) {
      const auto k = static_cast<std::size_t>(parent_edge[node]);
      path.push_back(k);
      node = other(basis[k], node);
    }
    std::reverse(path.begin(), path.end());  // path[0] touches row ei
    // Cells at even positions lose flow, odd positions gain.
    double theta = std::numeric_limits<double>::infinity();
    std::size_t leave = path[0];
    for (std::size_t t = 0; t < path.size(); t += 2) {
      if (basis[path[t]].flow < theta) {
        theta = basis[path[t]].flow;
        leave = path[t];
      }
    }
    for (std::size_t t = 0; t < path.size(); ++t) {
      auto& c = basis[path[t]];
      c.flow = t % 2 == 0 ? std::max(0.0, c.flow - theta) : c.flow + theta;
    }
    cell_slot[basis[leave].i * n + basis[leave].j] = -1;
    basis[leave] = {ei, ej, theta};
    cell_slot[ei * n + ej] = static_cast<int>(leave);
  }

  TransportSolution sol;
  sol.iterations = iter;
  sol.plan.rows = m;
  sol.plan.cols = n;
  for (auto& c : basis) {
    if (c.flow <= 0.0) continue;
    sol.plan.entries.push_back({c.i, c.j, c.flow});
    sol.min_cost += c.flow * cost[c.i * n + c.j];
  }
  return sol;
}

struct WpResult {
  double wp = 0.0;        // (min cost)^{1/p}
  double min_cost = 0.0;  // min E (1/N) sum |x_i - y_i|^p
  DiscreteJointDistribution plan;  // indices refer to the input supports
};

// Exact w_p between two finite discrete measures on R^N by linear programming.
inline WpResult wp_bruteforce(const DiscreteMeasure& mu1, const DiscreteMeasure& mu2, double p) {
  mu1.validate();
  mu2.validate();
  if (!(p >= 1.0)) throw DomainError("p must be >= 1");
  if (mu1.dim() != mu2.dim()) throw DomainError("marginals live in different dimensions");
  std::vector<std::size_t> r1, r2;
  for (std::size_t k = 0; k < mu1.weights.size(); ++k)
    if (mu1.weights[k] > 0.0) r1.push_back(k);
  for (std::size_t k = 0; k < mu2.weights.size(); ++k)
    if (mu2.weights[k] > 0.0) r2.push_back(k);
  if (static_cast<double>(r1.size()) * static_cast<double>(r2.size()) > 1e6)
    throw CapacityError("support product exceeds 1e6 cells");
  std::vector<double> a, b, c(r1.size() * r2.size());
  for (auto k : r1) a.push_back(mu1.weights[k]);
  for (auto k : r2) b.push_back(mu2.weights[k]);
  for (std::size_t i = 0; i < r1.size(); ++i)
    for (std::size_t j = 0; j < r2.size(); ++j)
      c[i * r2.size() + j] = specific_cost(mu1.points[r1[i]], mu2.points[r2[j]], p);
  auto sol = solve_transport(a, b, c);
  WpResult out;
  out.min_cost = std::max(0.0, sol.min_cost);
  out.wp = std::pow(out.min_cost, 1.0 / p);
  out.plan.rows = mu1.points.size();
  out.plan.cols = mu2.points.size();
  for (auto& e : sol.plan.entries) out.plan.entries.push_back({r1[e.i], r2[e.j], e.weight});
  return out;
}

// M(J, p): max over i in I and both marginals of <|x_i|^{q(n_J-1)}>^{1/(q(n_J-1))},
// q = p/(p-1); equal to 1 when n_J = 1.
inline double moment_constant(const MomentIndex& J, double p, const DiscreteMeasure& mu1,
                              const DiscreteMeasure& mu2) {
  if (J.order() == 1) return 1.0;
  if (!(p > 1.0)) throw DomainError("moment constant requires p > 1");
  const double r = p / (p - 1.0) * static_cast<double>(J.order() - 1);
  double M = 0.0;
  for (auto i : J.distinct())
    for (const auto* mu : {&mu1, &mu2}) {
      const double e = mu->expectation([&](const std::vector<double>& x) { return std::pow(std::abs(x[i]), r); });
      M = std::max(M, std::pow(e, 1.0 / r));
    }
  return M;
}

struct CouplingReport {
  double cost = 0.0;       // mean of (1/N)||x - T x||_p^p
  double cost_se = 0.0;    // plug-in standard error of `cost`
  double estimate = 0.0;   // cost^{1/p}
  double estimate_se = 0.0;  // delta method
  std::optional<double> bound;  // theoretical bound on `cost`, when one applies
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  double p = 1.0;
};

inline constexpr std::size_t kDefaultChunk = 256;

// Monte Carlo mean of cost(rng) in fixed-size chunks; chunk c draws from
// make_rng(seed, c). Results depend only on (seed, chunk).
template <class CostDraw>
CouplingReport chunked_cost_estimate(CostDraw&& draw, double p, std::size_t samples, std::uint64_t seed,
                                     std::size_t chunk = kDefaultChunk) {
  if (samples < 2) throw DomainError("at least 2 samples required");
  if (!(p >= 1.0)) throw DomainError("p must be >= 1");
  const std::size_t chunks = (samples + chunk - 1) / chunk;
  std::vector<numerics::RunningStats> stats(chunks);
  parallel_for(chunks, [&](std::size_t c) {
    Rng rng = make_rng(seed, c);
    const std::size_t begin = c * chunk, end = std::min(samples, begin + chunk);
    for (std::size_t k = begin; k < end; ++k) {
      const double v = draw(rng);
      if (!std::isfinite(v)) throw NonFiniteSampleError(k);
      stats[c].push(v);
    }
  });
  numerics::RunningStats total;
  for (auto& s : stats) total.merge(s);
  CouplingReport rep;
  rep.cost = total.mean;
  rep.cost_se = total.std_error();
  rep.estimate = std::pow(std::max(0.0, rep.cost), 1.0 / p);
  rep.estimate_se = rep.cost > 0.0 ? rep.cost_se * std::pow(rep.cost, 1.0 / p - 1.0) / p
                                   : (rep.cost_se > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
  rep.samples = samples;
  rep.seed = seed;
  rep.p = p;
  return rep;
}

// E[(1/N)||x - T(x)||_p^p]^{1/p} with x drawn by sampler(rng).
template <class Sampler, class Map>
CouplingReport transport_cost_estimate(Sampler&& sampler, Map&& T, double p, std::size_t N,
                                       std::size_t samples, std::uint64_t seed,
                                       std::size_t chunk = kDefaultChunk) {
  if (N < 1) throw DomainError("N must be >= 1");
  return chunked_cost_estimate(
      [&](Rng& rng) {
        const auto x = sampler(rng);
        if (x.size() != N) throw DomainError("sampler returned a state of the wrong length");
        const auto y = T(x);
        return specific_cost(x, y, p);
      },
      p, samples, seed, chunk);
}

// Largest |<f> - <f∘swap>| over up to `swaps` random label transpositions,
// computed exactly on a discrete measure.
inline double exchangeability_spot_check(const DiscreteMeasure& mu, const LocalObservable& f,
                                         std::uint64_t seed, int swaps = 100) {
  mu.validate();
  const std::size_t N = mu.dim();
  if (N < 2) return 0.0;
  Rng rng = make_rng(seed, 0);
  std::uniform_int_distribution<std::size_t> pick(0, N - 1);
  const double base = mu.expectation([&](const std::vector<double>& x) { return f(x); });
  double worst = 0.0;
  std::vector<double> y;
  for (int s = 0; s < swaps; ++s) {
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    while (b == a) b = pick(rng);
    const double e = mu.expectation([&](const std::vector<double>& x) {
      y = x;
      std::swap(y[a], y[b]);
      return f(y);
    });
    worst = std::max(worst, std::abs(e - base));
  }
  return worst;
}

// Sampled variant: largest |mean(f(x) - f(swap x))| / SE over random
// transpositions, using paired differences on the same draws.
template <class Sampler>
double exchangeability_spot_check_sampled(Sampler&& sampler, const LocalObservable& f, std::size_t N,
                                          std::size_t samples, std::uint64_t seed, int swaps = 20) {
  Rng rng = make_rng(seed, 0);
  std::vector<std::vector<double>> draws;
  draws.reserve(samples);
  for (std::size_t k = 0; k < samples; ++k) draws.push_back(sampler(rng));
  std::uniform_int_distribution<std::size_t> pick(0, N - 1);
  double worst = 0.0;
  std::vector<double> y;
  for (int s = 0; s < swaps; ++s) {
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    while (b == a) b = pick(rng);
    numerics::RunningStats diff;
    for (auto& x : draws) {
      y = x;
      std::swap(y[a], y[b]);
      diff.push(f(x) - f(y));
    }
    const double se = diff.std_error();
    if (se > 0.0) worst = std::max(worst, std::abs(diff.mean) / se);
  }
  return worst;
}

}  // namespace ensemble_lab::coupling
