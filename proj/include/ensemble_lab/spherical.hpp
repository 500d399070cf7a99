#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "ensemble_lab/coupling.hpp"
#include "ensemble_lab/errors.hpp"
#include "ensemble_lab/numerics.hpp"
#include "ensemble_lab/observable.hpp"
#include "ensemble_lab/random.hpp"

namespace ensemble_lab::spherical {

// H = -(J/2N) M^2 - h M on fields with N[phi] = sum phi^2.
struct SphericalModel {
  std::int64_t N = 5;
  double J = 1.0;
  double h = 0.0;
  double rho = 1.0;

  void validate() const {
    if (N < 5) throw DomainError("N >= 5 required, got N = " + std::to_string(N));
    if (!(J > 0.0)) throw DomainError("J must be > 0");
    if (!(rho > 0.0)) throw DomainError("rho must be > 0");
    if (!std::isfinite(h)) throw DomainError("h must be finite");
  }
  double n() const { return static_cast<double>(N); }
};

// Householder reflection taking e_1 to (1,...,1)/sqrt(N). It is symmetric and
// orthogonal, so it is its own inverse, and (U x)_1 = sum x_i / sqrt(N).
inline void apply_U(std::span<const double> x, std::span<double> out) {
  const std::size_t N = x.size();
  if (out.size() != N) throw DomainError("apply_U: output length mismatch");
  if (N == 1) {
    out[0] = x[0];
    return;
  }
  const double r = 1.0 / std::sqrt(static_cast<double>(N));
  double sum = 0.0;
  for (double xi : x) sum += xi;
  // v = e_1 - u, v.v = 2 - 2/sqrt(N).
  const double vx = x[0] - sum * r;
  const double coef = 2.0 * vx / (2.0 - 2.0 * r);
  out[0] = x[0] - coef * (1.0 - r);
  for (std::size_t i = 1; i < N; ++i) out[i] = x[i] + coef * r;
}

inline std::vector<double> apply_U(std::span<const double> x) {
  std::vector<double> out(x.size());
  apply_U(x, out);
  return out;
}

inline void apply_U_inverse(std::span<const double> y, std::span<double> out) { apply_U(y, out); }

inline std::vector<double> apply_U_inverse(std::span<const double> y) { return apply_U(y); }

// Fixed magnetization density m and particle density rho.
struct MagnetizationEnsemble {
  SphericalModel model;
  double m = 0.0;

  void validate() const {
    model.validate();
    const double gap = model.rho - m * m;
    if (gap == 0.0 || std::abs(gap) <= 1e-14 * model.rho)
      throw DegenerateEnsembleError("m^2 = rho is a degenerate ensemble (m = " + std::to_string(m) + ")");
    if (gap < 0.0) throw DomainError("m^2 > rho: no configurations (m = " + std::to_string(m) + ")");
  }
};

// ln Z_MC = ((N-3)/2) ln(rho - m^2).
inline double log_z_mc(double m, double rho, std::int64_t N) {
  return 0.5 * static_cast<double>(N - 3) * std::log(rho - m * m);
}

// Fill `y` with an (N-1)-dim standard Gaussian direction scaled to radius r.
inline void sample_sphere(std::span<double> y, double radius, Rng& rng) {
  std::normal_distribution<double> gauss;
  for (;;) {
    double norm2 = 0.0;
    for (double& v : y) {
      v = gauss(rng);
      norm2 += v * v;
    }
    if (norm2 > 0.0) {
      const double s = radius / std::sqrt(norm2);
      for (double& v : y) v *= s;
      return;
    }
  }
}

// phi = U^{-1}(m sqrt(N), sqrt(N(rho - m^2)) Omega) with Omega uniform on S^{N-2}.
inline FieldConfiguration sample_aux_mc(const MagnetizationEnsemble& ens, Rng& rng) {
  ens.validate();
  const auto N = static_cast<std::size_t>(ens.model.N);
  std::vector<double> y(N);
  y[0] = ens.m * std::sqrt(ens.model.n());
  sample_sphere(std::span<double>(y).subspan(1), std::sqrt(ens.model.n() * (ens.model.rho - ens.m * ens.m)),
                rng);
  return apply_U_inverse(y);
}

inline FieldConfiguration sample_aux_mc(const MagnetizationEnsemble& ens, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  return sample_aux_mc(ens, rng);
}

struct ConstraintResidual {
  double magnetization;  // |sum phi - mN| / (N sqrt(rho))
  double particle;       // |sum phi^2 - rho N| / (rho N)
};

inline ConstraintResidual constraint_residual(std::span<const double> phi, double m, double rho) {
  double s = 0.0, s2 = 0.0;
  for (double v : phi) {
    s += v;
    s2 += v * v;
  }
  const double N = static_cast<double>(phi.size());
  return {std::abs(s - m * N) / (N * std::sqrt(rho)), std::abs(s2 - rho * N) / (rho * N)};
}

// Law of phi_1 under the auxiliary microcanonical ensemble:
// density ∝ (1 - (v-m)^2 / R^2)^{(N-4)/2} on |v - m| <= R, R^2 = (rho - m^2)(N-1).
class SiteMarginal {
 public:
  explicit SiteMarginal(const MagnetizationEnsemble& ens, double rel_tol = 1e-12) : ens_(ens) {
    ens.validate();
    const double var = ens.model.rho - ens.m * ens.m;
    sd_ = std::sqrt(var);
    R_ = std::sqrt(var * static_cast<double>(ens.model.N - 1));
    a_ = 0.5 * static_cast<double>(ens.model.N - 4);
    // Beyond 60 standard deviations the density is below e^{-1700}.
    W_ = std::min(R_, 60.0 * sd_);
    opts_.rel_tol = rel_tol;
    breaks_ = breakpoints();
    auto res = numerics::integrate([this](double t) { return kernel(t); }, -W_, W_, breaks_, opts_);
    Z_ = res.value;
  }

  double mean() const { return ens_.m; }
  double support_radius() const { return R_; }
  double normalizer() const { return Z_; }

  // Unnormalized kernel in t = v - m.
  double kernel(double t) const {
    const double s = 1.0 - t * t / (R_ * R_);
    if (s <= 0.0) return 0.0;
    return a_ == 0.0 ? 1.0 : std::exp(a_ * std::log(s));
  }

  double density(double v) const {
    const double t = v - ens_.m;
    if (std::abs(t) > R_) return 0.0;
    return kernel(t) / Z_;
  }

  template <class G>
  double expect(G&& g) const {
    auto res = numerics::integrate([&](double t) { return g(ens_.m + t) * kernel(t); }, -W_, W_, breaks_, opts_);
    return res.value / Z_;
  }

  double cdf(double v) const {
    const double t = v - ens_.m;
    if (t <= -W_) return 0.0;
    if (t >= W_) return 1.0;
    std::vector<double> b;
    for (double x : breaks_)
      if (x < t) b.push_back(x);
    auto res = numerics::integrate([this](double s) { return kernel(s); }, -W_, t, b, opts_);
    return std::clamp(res.value / Z_, 0.0, 1.0);
  }

 private:
  std::vector<double> breakpoints() const {
    std::vector<double> b{0.0};
    for (double k = 1.0; k * sd_ < W_; k *= 2.0) {
      b.push_back(k * sd_);
      b.push_back(-k * sd_);
    }
    return b;
  }

  MagnetizationEnsemble ens_;
  double sd_, R_, a_, W_, Z_;
  numerics::QuadratureOptions opts_;
  std::vector<double> breaks_;
};

inline double mc_marginal_density(const MagnetizationEnsemble& ens, double v) {
  return SiteMarginal(ens).density(v);
}

// E phi_1 phi_2 = (m^2 N - rho) / (N - 1).
inline double mc_pair_moment(double m, double rho, std::int64_t N) {
  return (m * m * static_cast<double>(N) - rho) / static_cast<double>(N - 1);
}

// f(phi_site) for a scalar function f.
struct SiteFunction {
  std::string name;
  std::size_t site = 0;
  std::function<double(double)> g;
};

using SphericalObservable = std::variant<SiteFunction, MomentIndex, LocalObservable>;

inline double evaluate(const SphericalObservable& obs, std::span<const double> phi) {
  return std::visit(
      [&](const auto& o) -> double {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, SiteFunction>)
          return o.g(phi[o.site]);
        else
          return o(phi);
      },
      obs);
}

// <f>_MC^{m,rho;N} without sampling: single-site functions and single-label
// moments by marginal quadrature, products of two distinct sites in closed form.
inline double mc_expectation_exact(const SphericalObservable& obs, const MagnetizationEnsemble& ens) {
  ens.validate();
  if (const auto* sf = std::get_if<SiteFunction>(&obs)) {
    if (sf->site >= static_cast<std::size_t>(ens.model.N)) throw DomainError("site outside [0, N)");
    return SiteMarginal(ens).expect(sf->g);
  }
  if (const auto* J = std::get_if<MomentIndex>(&obs)) {
    J->validate(static_cast<std::size_t>(ens.model.N));
    const auto mult = J->multiplicities();
    if (mult.size() == 1) {
      const int k = mult[0].second;
      if (k == 1) return ens.m;
      if (k == 2) return ens.model.rho;
      return SiteMarginal(ens).expect([k](double v) { return std::pow(v, k); });
    }
    if (mult.size() == 2 && mult[0].second == 1 && mult[1].second == 1)
      return mc_pair_moment(ens.m, ens.model.rho, ens.model.N);
    throw UnsupportedVariantError("no quadrature expression for this moment; use the sampled method");
  }
  const auto& f = std::get<LocalObservable>(obs);
  f.validate(static_cast<std::size_t>(ens.model.N));
  if (f.size() == 1) {
    return SiteMarginal(ens).expect([&](double v) { return f.evaluate_local(std::span<const double>(&v, 1)); });
  }
  throw UnsupportedVariantError("observable '" + f.name +
                                "' on several sites has no quadrature expression; use the sampled method");
}

// m_+- = -h/J +- sqrt(h^2/J^2 - 2 eps/J).
inline std::pair<double, double> m_branches(double epsilon, const SphericalModel& model) {
  const double disc = model.h * model.h / (model.J * model.J) - 2.0 * epsilon / model.J;
  if (disc < 0.0)
    throw DomainError("epsilon = " + std::to_string(epsilon) + " > h^2/(2J): no real magnetization");
  const double r = std::sqrt(disc);
  return {-model.h / model.J + r, -model.h / model.J - r};
}

enum class BranchCase { two_branch, single_branch, degenerate_top };

inline const char* to_string(BranchCase c) {
  switch (c) {
    case BranchCase::two_branch: return "two_branch";
    case BranchCase::single_branch: return "single_branch";
    case BranchCase::degenerate_top: return "degenerate_top";
  }
  return "?";
}

// Empty string when eps lies in E_{h,rho}; otherwise the reason.
inline std::string energy_membership_diagnostic(double epsilon, const SphericalModel& model) {
  const double top = model.h * model.h / (2.0 * model.J);
  if (!std::isfinite(epsilon)) return "epsilon must be finite";
  if (epsilon > top) return "epsilon = " + std::to_string(epsilon) + " exceeds h^2/(2J) = " + std::to_string(top);
  const double disc = model.h * model.h / (model.J * model.J) - 2.0 * epsilon / model.J;
  const double small = std::abs(std::abs(model.h) / model.J - std::sqrt(disc));
  const double gap = model.rho - small * small;
  if (std::abs(gap) <= 1e-12 * model.rho)
    return "epsilon = " + std::to_string(epsilon) +
           " is the open endpoint of E_{h,rho}: min(m_+-^2) = rho is a degenerate ensemble";
  if (gap < 0.0)
    return "epsilon = " + std::to_string(epsilon) + " lies outside E_{h,rho}: min(m_+-^2) > rho";
  return {};
}

struct Estimate {
  double value = 0.0;
  double std_error = 0.0;
};

// Fixed energy density: a convex combination of the two magnetization branches
// weighted by Z_MC(m_+-), with the single-branch and degenerate-top cases.
struct EnergyEnsemble {
  SphericalModel model;
  double epsilon = 0.0;
  double m_plus = 0.0;
  double m_minus = 0.0;
  BranchCase branch_case = BranchCase::two_branch;
  double log_weight_plus = 0.0;
  double log_weight_minus = 0.0;

  static EnergyEnsemble make(const SphericalModel& model, double epsilon) {
    model.validate();
    const auto diag = energy_membership_diagnostic(epsilon, model);
    if (!diag.empty()) {
      if (diag.find("degenerate") != std::string::npos) throw DegenerateEnsembleError(diag);
      throw DomainError(diag);
    }
    EnergyEnsemble e;
    e.model = model;
    e.epsilon = epsilon;
    std::tie(e.m_plus, e.m_minus) = m_branches(epsilon, model);
    const double ninf = -std::numeric_limits<double>::infinity();
    if (e.m_plus == e.m_minus) {
      e.branch_case = BranchCase::degenerate_top;
      e.log_weight_plus = e.log_weight_minus = -std::numbers::ln2;
    } else if (e.m_plus * e.m_plus < model.rho && e.m_minus * e.m_minus < model.rho) {
      e.branch_case = BranchCase::two_branch;
      const double lp = log_z_mc(e.m_plus, model.rho, model.N);
      const double lm = log_z_mc(e.m_minus, model.rho, model.N);
      const double total = numerics::log_add_exp(lp, lm);
      e.log_weight_plus = lp - total;
      e.log_weight_minus = lm - total;
    } else {
      e.branch_case = BranchCase::single_branch;
      const bool plus_inside = e.m_plus * e.m_plus < model.rho;
      e.log_weight_plus = plus_inside ? 0.0 : ninf;
      e.log_weight_minus = plus_inside ? ninf : 0.0;
    }
    return e;
  }

  double weight_plus() const { return std::exp(log_weight_plus); }
  double weight_minus() const { return std::exp(log_weight_minus); }

  // The branch with the smaller |m|.
  double dominant_m() const { return std::abs(m_plus) <= std::abs(m_minus) ? m_plus : m_minus; }
  double subdominant_m() const { return std::abs(m_plus) <= std::abs(m_minus) ? m_minus : m_plus; }
  double log_weight_subdominant() const {
    return std::abs(m_plus) <= std::abs(m_minus) ? log_weight_minus : log_weight_plus;
  }
  double log_weight_dominant() const {
    return std::abs(m_plus) <= std::abs(m_minus) ? log_weight_plus : log_weight_minus;
  }

  MagnetizationEnsemble branch(double m) const { return {model, m}; }
};

// ((N-3)/2) ln((rho - m_big^2)/(rho - m_small^2)) with |m_small|, |m_big| =
// | |h|/J -+ sqrt(h^2/J^2 - 2 eps/J) |; -inf when the big branch is off the sphere.
inline double dominance_log_ratio(double epsilon, const SphericalModel& model) {
  const double disc = model.h * model.h / (model.J * model.J) - 2.0 * epsilon / model.J;
  if (disc < 0.0) throw DomainError("epsilon > h^2/(2J)");
  const double a = std::abs(model.h) / model.J, r = std::sqrt(disc);
  const double big = a + r, small = std::abs(a - r);
  if (big * big >= model.rho) return -std::numeric_limits<double>::infinity();
  return 0.5 * static_cast<double>(model.N - 3) * std::log((model.rho - big * big) / (model.rho - small * small));
}

enum class EnergyMethod { sampled, marginal_quadrature };

namespace detail {

template <class F>
Estimate sampled_mean(const MagnetizationEnsemble& ens, F&& f, std::size_t samples, std::uint64_t seed) {
  if (samples < 2) throw DomainError("at least 2 samples required");
  const std::size_t chunk = coupling::kDefaultChunk;
  const std::size_t chunks = (samples + chunk - 1) / chunk;
  std::vector<numerics::RunningStats> stats(chunks);
  parallel_for(chunks, [&](std::size_t c) {
    Rng rng = make_rng(seed, c);
    const std::size_t end = std::min(samples, (c + 1) * chunk);
    for (std::size_t k = c * chunk; k < end; ++k) stats[c].push(f(sample_aux_mc(ens, rng)));
  });
  numerics::RunningStats total;
  for (auto& s : stats) total.merge(s);
  return {total.mean, total.std_error()};
}

}  // namespace detail

// Monte Carlo <f>_MC^{m,rho;N} from `samples` auxiliary microcanonical draws.
inline Estimate mc_expectation_sampled(const SphericalObservable& obs, const MagnetizationEnsemble& ens,
                                       std::size_t samples, std::uint64_t seed) {
  ens.validate();
  return detail::sampled_mean(
      ens, [&](const FieldConfiguration& phi) { return evaluate(obs, phi); }, samples, seed);
}

// <f>_MC^{eps,rho;N}. The sampled method spends `budget` draws on each branch
// with positive weight; the quadrature method has zero reported error.
inline Estimate energy_ensemble_expectation(const SphericalObservable& obs, const EnergyEnsemble& ee,
                                            EnergyMethod method, std::size_t budget = 10000,
                                            std::uint64_t seed = 1) {
  Estimate out;
  double var = 0.0;
  int stream = 0;
  for (auto [m, lw] : {std::pair{ee.m_plus, ee.log_weight_plus}, std::pair{ee.m_minus, ee.log_weight_minus}}) {
    ++stream;
    const double w = std::exp(lw);
    if (w == 0.0) continue;
    if (method == EnergyMethod::marginal_quadrature) {
      out.value += w * mc_expectation_exact(obs, ee.branch(m));
    } else {
      const auto est = mc_expectation_sampled(obs, ee.branch(m), budget, derive_seed(seed, stream));
      out.value += w * est.value;
      var += w * w * est.std_error * est.std_error;
    }
  }
  out.std_error = std::sqrt(var);
  return out;
}

// |<f>_MC^{eps} - <f>_MC^{m_dominant}| = w_sub |<f>_sub - <f>_dom|, exact
// quadrature route; avoids the cancellation in the direct difference.
inline double dominance_gap(const SphericalObservable& obs, const EnergyEnsemble& ee) {
  const double w_sub = std::exp(ee.log_weight_subdominant());
  if (w_sub == 0.0 || ee.branch_case != BranchCase::two_branch) return 0.0;
  const double f_sub = mc_expectation_exact(obs, ee.branch(ee.subdominant_m()));
  const double f_dom = mc_expectation_exact(obs, ee.branch(ee.dominant_m()));
  return w_sub * std::abs(f_sub - f_dom);
}

// psi_{mu,rho}(m) = mu m - (1/2) ln(rho - m^2) and its minimizer.
inline double psi_mu_rho(double m, double mu, double rho) { return mu * m - 0.5 * std::log(rho - m * m); }

inline double m_star(double mu, double rho) {
  if (mu == 0.0) return 0.0;
  // 1/(2mu) - sgn(mu) sqrt(1/(4mu^2) + rho), written without cancellation.
  return -rho / (0.5 / std::abs(mu) + std::sqrt(0.25 / (mu * mu) + rho)) * (mu > 0.0 ? 1.0 : -1.0);
}

inline double psi_second_derivative(double m, double rho) {
  return (rho + m * m) / ((rho - m * m) * (rho - m * m));
}

// eps*(beta) = -(J rho/2)(1 - 1/(beta J rho)) for beta >= 1/(J rho), else 0.
inline double eps_star(double beta, double rho, double J) {
  if (beta * J * rho <= 1.0) return 0.0;
  return -0.5 * J * rho * (1.0 - 1.0 / (beta * J * rho));
}

namespace detail {

// Peaked one-dimensional weight exp(L(x)) on [lo, hi]: integrates in a window
// where L is within `drop` of its maximum, split around the peak.
class PeakedMeasure {
 public:
  template <class LogW>
  void setup(LogW&& logw, double peak, double width, double lo, double hi, double drop = 80.0) {
    logw_ = std::forward<LogW>(logw);
    peak_ = peak;
    lmax_ = logw_(peak);
    auto edge = [&](double dir, double limit) {
      double step = width;
      double x = peak;
      for (int it = 0; it < 200; ++it) {
        const double next = peak + dir * step;
        if ((dir > 0 && next >= limit) || (dir < 0 && next <= limit)) return limit;
        x = next;
        if (logw_(x) - lmax_ < -drop) return x;
        step *= 1.5;
      }
      return x;
    };
    lo_ = edge(-1.0, lo);
    hi_ = edge(1.0, hi);
    breaks_.clear();
    breaks_.push_back(peak);
    for (double d = 0.25 * width; d < hi_ - lo_; d *= 2.0) {
      breaks_.push_back(peak - d);
      breaks_.push_back(peak + d);
    }
    opts_.rel_tol = 1e-11;
    Z_ = numerics::integrate([this](double x) { return weight(x); }, lo_, hi_, breaks_, opts_).value;
  }

  double weight(double x) const {
    const double l = logw_(x);
    return std::isfinite(l) ? std::exp(l - lmax_) : 0.0;
  }

  template <class G>
  double expect(G&& g, double rel_tol = 1e-10) const {
    auto o = opts_;
    o.rel_tol = rel_tol;
    o.abs_tol = 1e-15;
    auto res = numerics::integrate([&](double x) { return weight(x) * g(x); }, lo_, hi_, breaks_, o);
    return res.value / Z_;
  }

  double log_normalizer() const { return lmax_ + std::log(Z_); }
  double lo() const { return lo_; }
  double hi() const { return hi_; }

  // Inverse-cdf sampler on a fixed grid of the window.
  std::vector<double> cdf_grid(std::size_t points, std::vector<double>& xs) const {
    xs.resize(points);
    std::vector<double> c(points, 0.0);
    for (std::size_t i = 0; i < points; ++i) xs[i] = lo_ + (hi_ - lo_) * static_cast<double>(i) / (points - 1);
    for (std::size_t i = 1; i < points; ++i)
      c[i] = c[i - 1] + 0.5 * (weight(xs[i - 1]) + weight(xs[i])) * (xs[i] - xs[i - 1]);
    for (double& v : c) v /= c.back();
    return c;
  }

 private:
  std::function<double(double)> logw_;
  double peak_ = 0.0, lmax_ = 0.0, lo_ = 0.0, hi_ = 0.0, Z_ = 1.0;
  std::vector<double> breaks_;
  numerics::QuadratureOptions opts_;
};

inline double log_cosh(double u) {
  const double a = std::abs(u);
  return a + std::log1p(std::exp(-2.0 * a)) - std::numbers::ln2;
}

}  // namespace detail

// Mixing law of m under the auxiliary canonical ensemble:
// ∝ exp(-N psi_{mu,rho}(m)) (rho - m^2)^{-3/2} dm. With m = sqrt(rho) tanh u the
// weight becomes exp(-N mu sqrt(rho) tanh u) sech^{N-1} u du, smooth and
// vanishing at both ends.
class AuxCanonicalMeasure {
 public:
  AuxCanonicalMeasure(double mu, double rho, std::int64_t N) : mu_(mu), rho_(rho), N_(N) {
    if (N < 5) throw DomainError("N >= 5 required, got N = " + std::to_string(N));
    if (!(rho > 0.0)) throw DomainError("rho must be > 0");
    if (!std::isfinite(mu)) throw DomainError("mu must be finite");
    const double n = static_cast<double>(N);
    const double a = n * mu * std::sqrt(rho);
    const double b = n - 1.0;
    auto logw = [a, b](double u) { return -a * std::tanh(u) - b * detail::log_cosh(u); };
    // Stationary point: a s^2 - b s - a = 0 with |s| < 1, s = tanh u.
    const double s = -2.0 * a / (b + std::sqrt(b * b + 4.0 * a * a));
    const double u0 = std::atanh(s);
    const double sech2 = 1.0 - s * s;
    const double curv = sech2 * (b - 2.0 * a * s);
    const double width = 1.0 / std::sqrt(std::max(curv, 1e-300));
    measure_.setup(logw, u0, width, -40.0, 40.0);
  }

  double m_of(double u) const { return std::sqrt(rho_) * std::tanh(u); }

  template <class G>
  double expect_m(G&& g, double rel_tol = 1e-10) const {
    return measure_.expect([&](double u) { return g(m_of(u)); }, rel_tol);
  }

  double mean_m() const { return expect_m([](double m) { return m; }); }

  double sigma_m() const {
    const double mean = mean_m();
    return std::sqrt(expect_m([mean](double m) { return (m - mean) * (m - mean); }));
  }

  // ln Z_C including constants: ((N-2)/2) ln rho + ln of the u-integral.
  double log_partition() const { return 0.5 * static_cast<double>(N_ - 2) * std::log(rho_) + measure_.log_normalizer(); }

  double mu() const { return mu_; }
  double rho() const { return rho_; }
  std::int64_t N() const { return N_; }
  const detail::PeakedMeasure& measure() const { return measure_; }

 private:
  double mu_, rho_;
  std::int64_t N_;
  detail::PeakedMeasure measure_;
};

// <f>_C^{mu,rho;N} by quadrature over m of the exact inner expectation.
inline double aux_canonical_expectation(const SphericalObservable& obs, double mu, double rho, std::int64_t N,
                                        double rel_tol = 1e-9) {
  AuxCanonicalMeasure c(mu, rho, N);
  SphericalModel model{N, 1.0, 0.0, rho};
  return c.expect_m(
      [&](double m) {
        // The window can reach tanh u == 1 where the weight is already negligible.
        if (rho - m * m <= 1e-12 * rho) return 0.0;
        return mc_expectation_exact(obs, MagnetizationEnsemble{model, m});
      },
      rel_tol);
}

// Nested Monte Carlo for observables without a quadrature expression: draw
// m_k from the mixing law (inverse cdf on a fine grid), then `inner` auxiliary
// microcanonical samples at m_k. The reported error is the standard error of
// the outer average of inner means, which carries both levels of noise.
inline Estimate aux_canonical_expectation_nested(const SphericalObservable& obs, double mu, double rho,
                                                 std::int64_t N, std::size_t outer, std::size_t inner,
                                                 std::uint64_t seed) {
  if (outer < 2 || inner < 1) throw DomainError("nested estimate needs outer >= 2 and inner >= 1");
  AuxCanonicalMeasure c(mu, rho, N);
  std::vector<double> us;
  const auto cdf = c.measure().cdf_grid(4097, us);
  SphericalModel model{N, 1.0, 0.0, rho};
  std::vector<double> means(outer);
  parallel_for(outer, [&](std::size_t k) {
    Rng rng = make_rng(seed, k);
    const double q = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), q);
    const std::size_t j = std::clamp<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), 1, cdf.size() - 1);
    const double t = (q - cdf[j - 1]) / std::max(cdf[j] - cdf[j - 1], 1e-300);
    const double m = c.m_of(us[j - 1] + t * (us[j] - us[j - 1]));
    MagnetizationEnsemble ens{model, m};
    double s = 0.0;
    for (std::size_t i = 0; i < inner; ++i) s += evaluate(obs, sample_aux_mc(ens, rng));
    means[k] = s / static_cast<double>(inner);
  });
  numerics::RunningStats st;
  for (double v : means) st.push(v);
  return {st.mean, st.std_error()};
}

// Mixing law of eps under the canonical ensemble at h = 0:
// ∝ exp(-N beta eps)(-2eps/J)^{-1/2}(rho + 2eps/J)^{(N-3)/2} on (-rho J/2, 0).
// With eps = -(rho J/2) sin^2 theta it becomes exp(N beta (rho J/2) sin^2 theta) cos^{N-2} theta.
class CanonicalEnergyMeasure {
 public:
  CanonicalEnergyMeasure(double beta, double rho, std::int64_t N, double J = 1.0, double h = 0.0)
      : beta_(beta), rho_(rho), J_(J), N_(N) {
    if (h != 0.0) throw UnsupportedVariantError("canonical energy ensemble is implemented for h = 0 only");
    if (N < 5) throw DomainError("N >= 5 required, got N = " + std::to_string(N));
    if (!(rho > 0.0) || !(J > 0.0)) throw DomainError("rho and J must be > 0");
    if (!std::isfinite(beta)) throw DomainError("beta must be finite");
    const double n = static_cast<double>(N);
    const double A = n * beta * rho * J / 2.0;
    const double B = n - 2.0;
    auto logw = [A, B](double th) {
      const double c = std::cos(th);
      if (c <= 0.0) return -std::numeric_limits<double>::infinity();
      const double s = std::sin(th);
      return A * s * s + B * std::log(c);
    };
    const double s_star = A > 0.0 ? 1.0 - B / (2.0 * A) : 0.0;
    const double th0 = s_star > 0.0 ? std::asin(std::sqrt(s_star)) : 0.0;
    const double curv = -(2.0 * A * std::cos(2.0 * th0) - B / (std::cos(th0) * std::cos(th0)));
    const double width = curv > 1e-8 * B ? 1.0 / std::sqrt(curv) : std::pow(B, -0.25);
    measure_.setup(logw, th0, width, 0.0, 0.5 * std::numbers::pi);
  }

  double eps_of(double theta) const {
    const double s = std::sin(theta);
    return -0.5 * rho_ * J_ * s * s;
  }

  template <class G>
  double expect_eps(G&& g, double rel_tol = 1e-10) const {
    return measure_.expect([&](double th) { return g(eps_of(th)); }, rel_tol);
  }

  // <H/N>_C.
  double mean_energy() const { return expect_eps([](double e) { return e; }); }

  double sigma_energy() const {
    const double mean = mean_energy();
    return std::sqrt(expect_eps([mean](double e) { return (e - mean) * (e - mean); }));
  }

  double beta() const { return beta_; }

 private:
  double beta_, rho_, J_;
  std::int64_t N_;
  detail::PeakedMeasure measure_;
};

// <f>_C^{beta,rho;N} at h = 0 with exact inner expectations.
inline double canonical_energy_expectation(const SphericalObservable& obs, double beta, double rho,
                                           std::int64_t N, double J = 1.0, double h = 0.0,
                                           double rel_tol = 1e-9) {
  CanonicalEnergyMeasure c(beta, rho, N, J, h);
  SphericalModel model{N, J, 0.0, rho};
  return c.expect_eps(
      [&](double eps) {
        const double m = std::sqrt(std::max(0.0, -2.0 * eps / J));
        if (rho - m * m <= 1e-12 * rho) return 0.0;
        if (m == 0.0) return mc_expectation_exact(obs, MagnetizationEnsemble{model, 0.0});
        return 0.5 * (mc_expectation_exact(obs, MagnetizationEnsemble{model, m}) +
                      mc_expectation_exact(obs, MagnetizationEnsemble{model, -m}));
      },
      rel_tol);
}

// Grand canonical variants.
struct AuxMagGC {  // exp(-mu M - eta N[phi])
  double mu = 0.0;
  double eta = 0.5;
};
struct EnergyGC {  // exp(-beta H - mu N[phi]) at h = 0
  double beta = 0.0;
  double mu = 0.5;
};
struct AlternateGC {  // equal mixture of AuxMagGC at +mu_bar and -mu_bar
  double mu_bar = 0.0;
  double eta = 0.5;
};
using GrandCanonicalParams = std::variant<AuxMagGC, EnergyGC, AlternateGC>;

inline void validate(const GrandCanonicalParams& params, double J = 1.0) {
  if (const auto* p = std::get_if<AuxMagGC>(&params)) {
    if (!(p->eta > 0.0)) throw DomainError("aux_mag: eta must be > 0");
    if (!std::isfinite(p->mu)) throw DomainError("aux_mag: mu must be finite");
  } else if (const auto* p = std::get_if<EnergyGC>(&params)) {
    if (!(p->mu > 0.0)) throw DomainError("energy: mu must be > 0");
    if (!(p->beta < 2.0 * p->mu / J))
      throw DomainError("energy: beta must be < 2 mu / J (z-coordinate Gaussian undefined)");
  } else {
    const auto& a = std::get<AlternateGC>(params);
    if (!(a.mu_bar >= 0.0)) throw DomainError("alternate: mu_bar must be >= 0");
    if (!(a.eta > 0.0)) throw DomainError("alternate: eta must be > 0");
  }
}

struct SiteMoments {
  double mean;
  double variance;
};

inline SiteMoments gc_site_moments(const GrandCanonicalParams& params, std::int64_t N, double J = 1.0) {
  validate(params, J);
  if (const auto* p = std::get_if<AuxMagGC>(&params)) return {-p->mu / (2.0 * p->eta), 0.5 / p->eta};
  if (const auto* p = std::get_if<EnergyGC>(&params)) {
    const double vz = 1.0 / (2.0 * p->mu - p->beta * J);
    const double vpsi = 1.0 / (2.0 * p->mu);
    return {0.0, vpsi + (vz - vpsi) / static_cast<double>(N)};
  }
  const auto& a = std::get<AlternateGC>(params);
  return {0.0, 0.5 / a.eta + a.mu_bar * a.mu_bar / (4.0 * a.eta * a.eta)};
}

inline FieldConfiguration gc_sample(const GrandCanonicalParams& params, std::int64_t N, Rng& rng, double J = 1.0) {
  validate(params, J);
  if (N < 1) throw DomainError("N must be >= 1");
  std::normal_distribution<double> gauss;
  FieldConfiguration phi(static_cast<std::size_t>(N));
  if (const auto* p = std::get_if<EnergyGC>(&params)) {
    std::vector<double> y(phi.size());
    y[0] = gauss(rng) / std::sqrt(2.0 * p->mu - p->beta * J);
    const double s = 1.0 / std::sqrt(2.0 * p->mu);
    for (std::size_t k = 1; k < y.size(); ++k) y[k] = gauss(rng) * s;
    apply_U_inverse(y, phi);
    return phi;
  }
  double mu, eta;
  if (const auto* p = std::get_if<AuxMagGC>(&params)) {
    mu = p->mu;
    eta = p->eta;
  } else {
    const auto& a = std::get<AlternateGC>(params);
    const bool plus = std::bernoulli_distribution(0.5)(rng);
    mu = plus ? a.mu_bar : -a.mu_bar;
    eta = a.eta;
  }
  const double mean = -mu / (2.0 * eta), sd = std::sqrt(0.5 / eta);
  for (double& v : phi) v = mean + sd * gauss(rng);
  return phi;
}

struct GcSampler {
  std::function<FieldConfiguration(Rng&)> sample;
  SiteMoments moments;
  std::uint64_t seed;
};

inline GcSampler gc_sample_and_moments(const GrandCanonicalParams& params, std::int64_t N, std::uint64_t seed,
                                       double J = 1.0) {
  const auto moments = gc_site_moments(params, N, J);
  return {[params, N, J](Rng& rng) { return gc_sample(params, N, rng, J); }, moments, seed};
}

// (mu, eta) with -mu/(2 eta) = m and 1/(2 eta) + mu^2/(4 eta^2) = rho.
inline AuxMagGC matched_aux_gc(double m, double rho) {
  const double v = rho - m * m;
  if (!(v > 0.0)) throw DomainError("matched parameters need m^2 < rho");
  return {-m / v, 0.5 / v};
}

// Alternate ensemble matched to energy density eps at h = 0.
inline AlternateGC matched_alternate_gc(double epsilon, double rho, double J = 1.0) {
  const double m = std::sqrt(std::max(0.0, -2.0 * epsilon / J));
  const auto a = matched_aux_gc(m, rho);
  return {std::abs(a.mu), a.eta};
}

namespace detail {

inline void check_inside(double m, double rho, const char* what) {
  if (!(rho > 0.0)) throw DomainError("rho must be > 0");
  if (!(m * m < rho)) throw DomainError(std::string(what) + " must satisfy m^2 < rho");
}

inline void check_energy(double eps, double rho, double J) {
  if (!(J > 0.0) || !(rho > 0.0)) throw DomainError("rho and J must be > 0");
  if (!(eps <= 0.0 && eps > -0.5 * rho * J))
    throw DomainError("energy density " + std::to_string(eps) + " outside (-rho J/2, 0]");
}

}  // namespace detail

// Cost of the fixed-magnetization map m -> m' (deterministic).
inline double transport_cost_mag(double m, double m_prime, double rho) {
  detail::check_inside(m, rho, "m");
  detail::check_inside(m_prime, rho, "m'");
  const double d = std::sqrt(rho - m * m) - std::sqrt(rho - m_prime * m_prime);
  return std::sqrt((m - m_prime) * (m - m_prime) + d * d);
}

inline double transport_cost_mag_bound(double m, double m_prime, double rho) {
  detail::check_inside(m, rho, "m");
  return (1.0 + 2.0 / std::sqrt(1.0 - m * m / rho)) * std::abs(m - m_prime);
}

// T' = U^{-1} T U with T(z, psi) = (m' sqrt(N), sqrt(N(rho - m'^2)) psi/|psi|).
inline FieldConfiguration mag_transport_map(std::span<const double> phi, double m_prime, double rho) {
  auto y = apply_U(phi);
  const double n = static_cast<double>(phi.size());
  double r2 = 0.0;
  for (std::size_t k = 1; k < y.size(); ++k) r2 += y[k] * y[k];
  const double s = r2 > 0.0 ? std::sqrt(n * (rho - m_prime * m_prime) / r2) : 0.0;
  y[0] = m_prime * std::sqrt(n);
  for (std::size_t k = 1; k < y.size(); ++k) y[k] *= s;
  return apply_U_inverse(y);
}

// Two-branch map for fixed energy at h = 0: the sign of z picks the branch.
inline FieldConfiguration energy_transport_map(std::span<const double> phi, double eps_prime, double rho,
                                               double J = 1.0) {
  auto y = apply_U(phi);
  const double mp = std::sqrt(std::max(0.0, -2.0 * eps_prime / J));
  const double m_target = y[0] >= 0.0 ? mp : -mp;
  return mag_transport_map(phi, m_target, rho);
}

inline double transport_cost_energy(double eps, double eps_prime, double rho, double J = 1.0) {
  detail::check_energy(eps, rho, J);
  detail::check_energy(eps_prime, rho, J);
  const double a = std::sqrt(-eps) - std::sqrt(-eps_prime);
  const double b = std::sqrt(rho + 2.0 * eps / J) - std::sqrt(rho + 2.0 * eps_prime / J);
  return std::sqrt(2.0 / J * a * a + b * b);
}

// (2/J)|eps - eps'| / (sqrt(-2eps/J) sqrt(1 + 2eps/(J rho))) for eps < 0,
// (2/sqrt(J)) |eps'|^{1/2} for eps = 0.
inline double transport_cost_energy_bound(double eps, double eps_prime, double rho, double J = 1.0) {
  detail::check_energy(eps, rho, J);
  detail::check_energy(eps_prime, rho, J);
  if (eps == 0.0) return 2.0 / std::sqrt(J) * std::sqrt(-eps_prime);
  const double a = -2.0 * eps / J;
  return 2.0 / J * std::abs(eps - eps_prime) / (std::sqrt(a) * std::sqrt(1.0 - a / rho));
}

// Exact E[(1/N)||phi - T'phi||^2] for phi from the matched auxiliary grand
// canonical ensemble: (rho - m^2)/N * (2N - 2 sqrt(2N) Gamma(N/2)/Gamma((N-1)/2)).
inline double gc_mc_exact_cost(double m, double rho, std::int64_t N) {
  detail::check_inside(m, rho, "m");
  const double n = static_cast<double>(N);
  const double chi_mean_over_sqrt2 = std::exp(std::lgamma(n / 2.0) - std::lgamma((n - 1.0) / 2.0));
  return (rho - m * m) / n * (2.0 * n - 2.0 * std::sqrt(2.0 * n) * chi_mean_over_sqrt2);
}

// Monte Carlo cost^2 of the matched GC -> MC map; bound 1/((rho - m^2) N).
inline coupling::CouplingReport direct_coupling_cost_gc_mc(double m, double rho, std::int64_t N, std::uint64_t seed,
                                                           std::size_t samples) {
  if (N < 2) throw DomainError("N must be >= 2");
  detail::check_inside(m, rho, "m");
  const GrandCanonicalParams gc = matched_aux_gc(m, rho);
  auto rep = coupling::transport_cost_estimate([&](Rng& rng) { return gc_sample(gc, N, rng); },
                                               [&](const FieldConfiguration& x) { return mag_transport_map(x, m, rho); },
                                               2.0, static_cast<std::size_t>(N), samples, seed);
  rep.bound = 1.0 / ((rho - m * m) * static_cast<double>(N));
  return rep;
}

// Energy GC (h = 0, rho = 1/(2 mu)) to the fixed-energy ensemble at eps;
// bound (1/N)(rho/(1 - rho beta J) + 2 rho) at eps = 0.
inline coupling::CouplingReport direct_coupling_cost_gc_mc_energy(double beta, double mu, std::int64_t N,
                                                                  std::uint64_t seed, std::size_t samples,
                                                                  double J = 1.0, double epsilon = 0.0) {
  const GrandCanonicalParams gc = EnergyGC{beta, mu};
  validate(gc, J);
  if (N < 2) throw DomainError("N must be >= 2");
  const double rho = 0.5 / mu;
  detail::check_energy(epsilon, rho, J);
  auto rep = coupling::transport_cost_estimate(
      [&](Rng& rng) { return gc_sample(gc, N, rng, J); },
      [&](const FieldConfiguration& x) { return energy_transport_map(x, epsilon, rho, J); }, 2.0,
      static_cast<std::size_t>(N), samples, seed);
  if (epsilon == 0.0) rep.bound = (rho / (1.0 - rho * beta * J) + 2.0 * rho) / static_cast<double>(N);
  return rep;
}

}  // namespace ensemble_lab::spherical
