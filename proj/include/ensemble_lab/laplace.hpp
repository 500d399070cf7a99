#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "ensemble_lab/errors.hpp"
#include "ensemble_lab/numerics.hpp"

namespace ensemble_lab::laplace {

// Leading behaviour at a minimum x0, in the distance t >= 0 from x0 into the
// interval: h ~ h(x0) + a0 t^mu, phi ~ b0 t^{alpha-1}.
struct EndpointExpansion {
  double mu_exp = 1.0;
  double a0 = 1.0;
  double alpha = 1.0;
  double b0 = 1.0;

  void validate() const {
    if (!(mu_exp > 0.0)) throw DomainError("mu_exp must be > 0");
    if (a0 == 0.0 || !std::isfinite(a0)) throw DomainError("a0 must be nonzero");
    if (!(alpha > 0.0)) throw DomainError("alpha must be > 0");
    if (b0 == 0.0 || !std::isfinite(b0)) throw DomainError("b0 must be nonzero");
  }
};

enum class MinimumLocation { left_endpoint, interior };

// I(lambda) = ∫_a^b phi(x) exp(-lambda h(x)) dx with the global minimum of h at
// x_min (= a for left_endpoint). `right` describes x > x_min, `left` the side
// x < x_min of an interior minimum.
struct LaplaceProblem {
  std::string name;
  double a = 0.0;
  double b = 1.0;
  MinimumLocation location = MinimumLocation::left_endpoint;
  double x_min = 0.0;
  double h_at_min = 0.0;
  EndpointExpansion right;
  std::optional<EndpointExpansion> left;
  std::function<double(double)> h;
  std::function<double(double)> phi;

  void validate() const {
    if (!(a < b)) throw DomainError("problem '" + name + "': need a < b");
    if (!h || !phi) throw DomainError("problem '" + name + "': h and phi are required");
    right.validate();
    if (location == MinimumLocation::left_endpoint) {
      if (x_min != a) throw DomainError("problem '" + name + "': endpoint minimum must sit at a");
    } else {
      if (!(x_min > a && x_min < b)) throw DomainError("problem '" + name + "': interior minimum outside (a, b)");
      if (!left) throw DomainError("problem '" + name + "': interior minimum needs a left expansion");
      left->validate();
    }
    // h exceeds its minimum away from x_min (grid spot-check).
    const int n = 200;
    const double guard = 1e-3 * (b - a);
    for (int k = 0; k <= n; ++k) {
      const double x = a + (b - a) * k / n;
      if (std::abs(x - x_min) <= guard) continue;
      if (!(h(x) > h_at_min))
        throw DomainError("problem '" + name + "': h(" + std::to_string(x) + ") does not exceed h_at_min");
    }
  }
};

// Gamma(alpha/mu) c0 lambda^{-alpha/mu}, c0 = b0 / (mu a0^{alpha/mu}).
inline double endpoint_leading(const EndpointExpansion& e, double lambda) {
  e.validate();
  if (!(lambda > 0.0)) throw DomainError("lambda must be > 0");
  const double r = e.alpha / e.mu_exp;
  if (e.a0 < 0.0 && r != std::floor(r))
    throw DomainError("a0 <= 0 with non-integer alpha/mu: a0^{alpha/mu} is not real");
  const double c0 = e.b0 / (e.mu_exp * std::pow(e.a0, r));
  return std::tgamma(r) * c0 * std::pow(lambda, -r);
}

// Leading term of I(lambda); an interior minimum contributes one endpoint
// problem per side.
inline double leading_term(const LaplaceProblem& p, double lambda) {
  double s = endpoint_leading(p.right, lambda);
  if (p.location == MinimumLocation::interior) {
    if (!p.left) throw DomainError("interior minimum needs a left expansion");
    s += endpoint_leading(*p.left, lambda);
  }
  return std::exp(-lambda * p.h_at_min) * s;
}

// Ratio ∫ phi e^{-lambda h} / ∫ e^{-lambda h} at a strictly convex interior
// minimum when phi^{(i)}(b) is the first nonzero derivative:
// Gamma((i+1)/2)/Gamma(1/2) (1/i!) phi^{(i)} (h''/2)^{-i/2} lambda^{-i/2}.
inline double interior_min_ratio(int i, double h2, double phi_i, double lambda) {
  if (i < 0) throw DomainError("derivative order must be >= 0");
  if (!(h2 > 0.0)) throw DomainError("h'' must be > 0");
  if (!(lambda > 0.0)) throw DomainError("lambda must be > 0");
  const double di = static_cast<double>(i);
  return std::tgamma((di + 1.0) / 2.0) / std::sqrt(std::numbers::pi) / std::tgamma(di + 1.0) * phi_i *
         std::pow(0.5 * h2, -di / 2.0) * std::pow(lambda, -di / 2.0);
}

struct QuadratureValue {
  double value;
  double rel_error;
};

// Adaptive quadrature of I(lambda), pre-split geometrically around x_min on
// the natural scale lambda^{-1/mu}.
inline QuadratureValue quadrature_reference(const LaplaceProblem& p, double lambda, double rel_tol = 1e-10) {
  p.validate();
  if (!(lambda > 0.0)) throw DomainError("lambda must be > 0");
  auto f = [&](double x) { return p.phi(x) * std::exp(-lambda * (p.h(x) - p.h_at_min)); };
  std::vector<double> breaks;
  auto add = [&](const EndpointExpansion& e, double end) {
    const double scale = 0.05 * std::pow(lambda * std::abs(e.a0), -1.0 / e.mu_exp);
    auto g = numerics::geometric_breakpoints(p.x_min, scale, end);
    breaks.insert(breaks.end(), g.begin(), g.end());
  };
  add(p.right, p.b);
  if (p.location == MinimumLocation::interior) {
    add(*p.left, p.a);
    breaks.push_back(p.x_min);
  }
  numerics::QuadratureOptions opts;
  opts.rel_tol = rel_tol;
  auto res = numerics::integrate(f, p.a, p.b, breaks, opts);
  const double scale = std::exp(-lambda * p.h_at_min);
  return {res.value * scale, res.value != 0.0 ? res.abs_error / std::abs(res.value) : 0.0};
}

// Problems with closed-form integrals used by the validation sweeps.
inline std::vector<LaplaceProblem> registered_problems() {
  std::vector<LaplaceProblem> out;
  {
    LaplaceProblem p;
    p.name = "linear_endpoint";  // h = x on [0,1], phi = 1
    p.right = {1.0, 1.0, 1.0, 1.0};
    p.h = [](double x) { return x; };
    p.phi = [](double) { return 1.0; };
    out.push_back(p);
  }
  {
    LaplaceProblem p;
    p.name = "quadratic_endpoint";  // h = x^2 on [0,1], phi = 1
    p.right = {2.0, 1.0, 1.0, 1.0};
    p.h = [](double x) { return x * x; };
    p.phi = [](double) { return 1.0; };
    out.push_back(p);
  }
  {
    LaplaceProblem p;
    p.name = "interior_second_moment";  // h = x^2/2 on [-1,1], phi = x^2
    p.a = -1.0;
    p.b = 1.0;
    p.location = MinimumLocation::interior;
    p.x_min = 0.0;
    p.right = {2.0, 0.5, 3.0, 1.0};
    p.left = EndpointExpansion{2.0, 0.5, 3.0, 1.0};
    p.h = [](double x) { return 0.5 * x * x; };
    p.phi = [](double x) { return x * x; };
    out.push_back(p);
  }
  return out;
}

// Closed-form I(lambda) of the registered problems, by name.
inline double closed_form(const std::string& name, double lambda) {
  if (name == "linear_endpoint") return -std::expm1(-lambda) / lambda;
  if (name == "quadratic_endpoint") return 0.5 * std::sqrt(std::numbers::pi / lambda) * std::erf(std::sqrt(lambda));
  if (name == "interior_second_moment") {
    // ∫_{-1}^{1} x^2 e^{-lambda x^2/2} dx
    const double s = std::sqrt(lambda / 2.0);
    return std::sqrt(2.0 * std::numbers::pi) * std::pow(lambda, -1.5) * std::erf(s) -
           2.0 * std::exp(-lambda / 2.0) / lambda;
  }
  throw DomainError("no closed form registered for '" + name + "'");
}

}  // namespace ensemble_lab::laplace
