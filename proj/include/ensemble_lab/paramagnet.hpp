#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ensemble_lab/coupling.hpp"
#include "ensemble_lab/errors.hpp"
#include "ensemble_lab/numerics.hpp"
#include "ensemble_lab/observable.hpp"
#include "ensemble_lab/random.hpp"

namespace ensemble_lab::paramagnet {

inline constexpr double kSnapTolerance = 1e-9;
inline constexpr std::size_t kMaxEnumeratedSites = 20;

inline void check_size(std::int64_t N) {
  if (N < 1) throw DomainError("N must be >= 1, got " + std::to_string(N));
}

inline double nearest_admissible_m(double m, std::int64_t N) {
  check_size(N);
  const double k = std::clamp(std::round((1.0 + m) * static_cast<double>(N) / 2.0), 0.0,
                              static_cast<double>(N));
  return 2.0 * k / static_cast<double>(N) - 1.0;
}

// K_+ = (1+m)N/2 when m is within kSnapTolerance of Ran[m_N].
inline std::optional<std::int64_t> try_plus_count(double m, std::int64_t N) {
  check_size(N);
  if (!std::isfinite(m)) return std::nullopt;
  const double k_real = (1.0 + m) * static_cast<double>(N) / 2.0;
  const double k = std::round(k_real);
  if (k < 0.0 || k > static_cast<double>(N)) return std::nullopt;
  if (std::abs(2.0 * k / static_cast<double>(N) - 1.0 - m) > kSnapTolerance) return std::nullopt;
  return static_cast<std::int64_t>(k);
}

inline std::int64_t plus_count(double m, std::int64_t N) {
  if (auto k = try_plus_count(m, N)) return *k;
  throw DomainError("m = " + std::to_string(m) + " is not an admissible magnetization density for N = " +
                    std::to_string(N) + "; nearest admissible m is " +
                    std::to_string(nearest_admissible_m(m, N)));
}

inline double snap_m(double m, std::int64_t N) {
  return 2.0 * static_cast<double>(plus_count(m, N)) / static_cast<double>(N) - 1.0;
}

// The potential whose canonical mean magnetization density is m.
inline double matched_mu(double m) {
  if (!(m > -1.0 && m < 1.0)) throw DomainError("m outside (-1,1)");
  return std::atanh(-m);
}

struct ParamagnetParams {
  std::int64_t N = 1;
  double m = 0.0;
  double mu = 0.0;

  void validate() const {
    check_size(N);
    plus_count(m, N);
    if (!std::isfinite(mu)) throw DomainError("mu must be finite");
  }
};

// ln |S_m| = ln C(N, (1+m)N/2).
inline double log_z_mc(double m, std::int64_t N) {
  return numerics::log_binomial(N, plus_count(m, N));
}

struct CanonicalScalars {
  double log_Z_C;
  double f_C;
  double mean_mdensity;
  double sigma_mdensity;
};

inline CanonicalScalars canonical_scalars(double mu, std::int64_t N) {
  check_size(N);
  const double l2c = numerics::log_two_cosh(mu);
  return {static_cast<double>(N) * l2c, -l2c, -std::tanh(mu),
          1.0 / std::cosh(mu) / std::sqrt(static_cast<double>(N))};
}

namespace detail {

// sum_k weight[k] * (sum of f over sign patterns with k plus signs).
inline double pattern_sum(const LocalObservable& f, const std::vector<double>& weight) {
  const std::size_t n = f.size();
  std::vector<double> per_k(n + 1, 0.0);
  std::vector<double> x(n);
  const std::uint64_t patterns = std::uint64_t{1} << n;
  for (std::uint64_t b = 0; b < patterns; ++b) {
    for (std::size_t j = 0; j < n; ++j) x[j] = (b >> j) & 1u ? 1.0 : -1.0;
    per_k[static_cast<std::size_t>(std::popcount(b))] += f.evaluate_local(x);
  }
  double s = 0.0;
  for (std::size_t k = 0; k <= n; ++k)
    if (weight[k] != 0.0) s += weight[k] * per_k[k];
  return s;
}

inline void check_enumerable(const LocalObservable& f) {
  if (f.size() > kMaxEnumeratedSites)
    throw CapacityError("observable on " + std::to_string(f.size()) +
                        " sites exceeds the 20-site enumeration limit");
}

}  // namespace detail

// Probability of one particular sign pattern on n sites with k plus signs
// under the uniform measure on S_m (K plus spins among N):
// (K)_k (N-K)_{n-k} / (N)_n, written as a product of ratios.
inline double mc_pattern_weight(std::int64_t K, std::int64_t N, std::size_t n, std::size_t k) {
  double w = 1.0;
  for (std::size_t t = 0; t < k; ++t)
    w *= static_cast<double>(K - static_cast<std::int64_t>(t)) / static_cast<double>(N - static_cast<std::int64_t>(t));
  const auto kk = static_cast<std::int64_t>(k);
  for (std::size_t t = 0; t < n - k; ++t)
    w *= static_cast<double>(N - K - static_cast<std::int64_t>(t)) /
         static_cast<double>(N - kk - static_cast<std::int64_t>(t));
  return std::max(0.0, w);
}

// Exact <f∘P_I> under the uniform measure on S_m.
inline double mc_local_expectation(const LocalObservable& f, double m, std::int64_t N) {
  f.validate(static_cast<std::size_t>(N));
  detail::check_enumerable(f);
  const std::int64_t K = plus_count(m, N);
  const std::size_t n = f.size();
  std::vector<double> w(n + 1);
  for (std::size_t k = 0; k <= n; ++k) w[k] = mc_pattern_weight(K, N, n, k);
  return detail::pattern_sum(f, w);
}

// Exact <f∘P_I> under the product measure with P(phi = +1) = e^{-mu} / (2 cosh mu).
inline double c_local_expectation(const LocalObservable& f, double mu) {
  if (f.sites.empty()) throw DomainError("observable has an empty index set");
  if (!f.f) throw DomainError("observable has no evaluation function");
  detail::check_enumerable(f);
  const std::size_t n = f.size();
  const double lp = -numerics::log_two_cosh(mu) - mu;  // ln P(+1)
  const double lq = -numerics::log_two_cosh(mu) + mu;  // ln P(-1)
  std::vector<double> w(n + 1);
  for (std::size_t k = 0; k <= n; ++k)
    w[k] = std::exp(static_cast<double>(k) * lp + static_cast<double>(n - k) * lq);
  return detail::pattern_sum(f, w);
}

// F(m, mu) = ln 2 + ln cosh mu + mu m + ((1+m)/2) ln((1+m)/2) + ((1-m)/2) ln((1-m)/2).
inline double F_of(double m, double mu) {
  if (!(m >= -1.0 && m <= 1.0)) throw DomainError("F_of: m outside [-1,1]");
  return numerics::log_two_cosh(mu) + mu * m + numerics::xlogx((1.0 + m) / 2.0) +
         numerics::xlogx((1.0 - m) / 2.0);
}

// H(MC_m | C_mu) / N, exact.
inline double specific_relative_entropy(double m, double mu, std::int64_t N) {
  const std::int64_t K = plus_count(m, N);
  if (K == 0 || K == N) throw DomainError("relative entropy bound requires m not in {-1, 1}");
  const double ms = 2.0 * static_cast<double>(K) / static_cast<double>(N) - 1.0;
  return mu * ms + numerics::log_two_cosh(mu) - numerics::log_binomial(N, K) / static_cast<double>(N);
}

// sqrt(2|I|) * sup|f| * sqrt(H/N).
inline double pinsker_bound(const LocalObservable& f, double m, double mu, std::int64_t N) {
  const double sup = f.sup();
  const double h = specific_relative_entropy(m, mu, N);
  return std::sqrt(2.0 * static_cast<double>(f.size())) * sup * std::sqrt(std::max(0.0, h));
}

// Free-energy chain with w_1 <= sigma + |m - <M/N>_C| and C = Lipschitz(f).
// A constant valid in any l_q norm is valid in l_1.
inline double coupling_bound(const LocalObservable& f, double m, double mu, std::int64_t N) {
  if (!f.lipschitz) throw DomainError("observable '" + f.name + "' has no declared Lipschitz constant");
  const double ms = snap_m(m, N);
  const auto cs = canonical_scalars(mu, N);
  return coupling::free_energy_bound(*f.lipschitz, f.size(), static_cast<std::size_t>(N), 1.0,
                                     cs.sigma_mdensity, std::abs(ms - cs.mean_mdensity));
}

inline SpinConfiguration sample_mc(double m, std::int64_t N, Rng& rng) {
  const std::int64_t K = plus_count(m, N);
  SpinConfiguration phi(static_cast<std::size_t>(N), -1.0);
  std::fill(phi.begin(), phi.begin() + K, 1.0);
  std::shuffle(phi.begin(), phi.end(), rng);
  return phi;
}

// Draw phi uniform on S_m and flip |K' - K| uniformly chosen sites of the
// opposite sign; the per-pair l1 cost is |m' - m| exactly.
inline std::pair<SpinConfiguration, SpinConfiguration> sample_optimal_coupling(double m, double m_prime,
                                                                               std::int64_t N, Rng& rng) {
  const std::int64_t K = plus_count(m, N);
  const std::int64_t Kp = plus_count(m_prime, N);
  auto phi = sample_mc(m, N, rng);
  auto phi_p = phi;
  const double from = Kp > K ? -1.0 : 1.0;
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < phi.size(); ++i)
    if (phi[i] == from) candidates.push_back(i);
  const auto delta = static_cast<std::size_t>(Kp > K ? Kp - K : K - Kp);
  if (delta > candidates.size()) throw InternalError("not enough opposite-sign sites to flip");
  for (std::size_t t = 0; t < delta; ++t) {
    std::uniform_int_distribution<std::size_t> pick(t, candidates.size() - 1);
    std::swap(candidates[t], candidates[pick(rng)]);
    phi_p[candidates[t]] = -from;
  }
  return {std::move(phi), std::move(phi_p)};
}

inline std::pair<SpinConfiguration, SpinConfiguration> sample_optimal_coupling(double m, double m_prime,
                                                                               std::int64_t N,
                                                                               std::uint64_t seed) {
  Rng rng = make_rng(seed);
  return sample_optimal_coupling(m, m_prime, N, rng);
}

// Uniform measure on S_m as an explicit discrete measure (small N only).
inline coupling::DiscreteMeasure mc_measure(double m, std::int64_t N) {
  if (N > 20) throw CapacityError("explicit microcanonical measure limited to N <= 20");
  const std::int64_t K = plus_count(m, N);
  coupling::DiscreteMeasure mu;
  for (std::uint64_t b = 0; b < (std::uint64_t{1} << N); ++b) {
    if (std::popcount(b) != K) continue;
    std::vector<double> x(static_cast<std::size_t>(N));
    for (std::int64_t j = 0; j < N; ++j) x[static_cast<std::size_t>(j)] = (b >> j) & 1u ? 1.0 : -1.0;
    mu.points.push_back(std::move(x));
  }
  mu.weights.assign(mu.points.size(), 1.0 / static_cast<double>(mu.points.size()));
  return mu;
}

// Curie-Weiss: H = -(J/2N) M^2 - h M.
struct CurieWeissParams {
  double J = 1.0;
  double h = 0.0;

  void validate() const {
    if (!(J > 0.0)) throw DomainError("J must be > 0");
    if (!std::isfinite(h)) throw DomainError("h must be finite");
  }
};

inline double cw_energy_density(double m, const CurieWeissParams& cw) {
  return -0.5 * cw.J * m * m - cw.h * m;
}

struct EnergySplit {
  double m_plus;
  double m_minus;
  double weight_plus;
  double weight_minus;
};

// S_eps as a convex combination of S_{m+} and S_{m-}, weighted by their sizes;
// a branch outside Ran[m_N] carries weight 0.
inline EnergySplit energy_split(double epsilon, const CurieWeissParams& cw, std::int64_t N) {
  cw.validate();
  check_size(N);
  const double disc = cw.h * cw.h / (cw.J * cw.J) - 2.0 * epsilon / cw.J;
  if (disc < 0.0)
    throw DomainError("epsilon = " + std::to_string(epsilon) + " exceeds h^2/(2J); no real magnetization");
  const double root = std::sqrt(disc);
  EnergySplit out{-cw.h / cw.J + root, -cw.h / cw.J - root, 0.0, 0.0};
  const auto kp = try_plus_count(out.m_plus, N);
  const auto km = try_plus_count(out.m_minus, N);
  if (!kp && !km)
    throw DomainError("epsilon = " + std::to_string(epsilon) + " is not an attainable energy density for N = " +
                      std::to_string(N));
  if (kp && km && *kp == *km) {
    out.weight_plus = out.weight_minus = 0.5;
  } else if (kp && km) {
    const double lp = numerics::log_binomial(N, *kp), lm = numerics::log_binomial(N, *km);
    out.weight_plus = 1.0 / (1.0 + std::exp(lm - lp));
    out.weight_minus = 1.0 / (1.0 + std::exp(lp - lm));
  } else {
    (kp ? out.weight_plus : out.weight_minus) = 1.0;
  }
  if (kp) out.m_plus = 2.0 * static_cast<double>(*kp) / static_cast<double>(N) - 1.0;
  if (km) out.m_minus = 2.0 * static_cast<double>(*km) / static_cast<double>(N) - 1.0;
  return out;
}

// <f∘P_I> under the uniform measure on S_eps.
inline double cw_mc_local_expectation(const LocalObservable& f, double epsilon, const CurieWeissParams& cw,
                                      std::int64_t N) {
  const auto split = energy_split(epsilon, cw, N);
  double s = 0.0;
  if (split.weight_plus > 0.0) s += split.weight_plus * mc_local_expectation(f, split.m_plus, N);
  if (split.weight_minus > 0.0) s += split.weight_minus * mc_local_expectation(f, split.m_minus, N);
  return s;
}

}  // namespace ensemble_lab::paramagnet
