#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ensemble_lab/laplace.hpp"
#include "ensemble_lab/spherical.hpp"

namespace el = ensemble_lab;
namespace lp = ensemble_lab::laplace;
namespace sp = ensemble_lab::spherical;

TEST(EndpointLeading, ClosedFormExamples) {
  for (double lambda : {1.0, 10.0, 1e4}) {
    EXPECT_NEAR(lp::endpoint_leading({1.0, 1.0, 1.0, 1.0}, lambda) * lambda, 1.0, 1e-14);
    EXPECT_NEAR(lp::endpoint_leading({2.0, 1.0, 1.0, 1.0}, lambda), 0.5 * std::sqrt(std::numbers::pi / lambda),
                1e-14);
  }
}

TEST(EndpointLeading, NegativeCoefficientNeedsIntegerPower) {
  EXPECT_THROW(lp::endpoint_leading({1.0, -1.0, 0.5, 1.0}, 10.0), el::DomainError);
  EXPECT_NO_THROW(lp::endpoint_leading({1.0, -1.0, 2.0, 1.0}, 10.0));
  EXPECT_THROW(lp::endpoint_leading({1.0, 1.0, 1.0, 1.0}, 0.0), el::DomainError);
  EXPECT_THROW(lp::EndpointExpansion({0.0, 1.0, 1.0, 1.0}).validate(), el::DomainError);
}

TEST(QuadratureReference, MatchesClosedForms) {
  for (const auto& p : lp::registered_problems())
    for (double lambda : {10.0, 1e2, 1e3, 1e4}) {
      const auto q = lp::quadrature_reference(p, lambda);
      EXPECT_NEAR(q.value / lp::closed_form(p.name, lambda), 1.0, 1e-9) << p.name << " " << lambda;
      EXPECT_LE(q.rel_error, 1e-9);
    }
}

TEST(LeadingTerm, RatioApproachesOneAtTheExpectedRate) {
  for (const auto& p : lp::registered_problems()) {
    double prev = 1.0;
    for (double lambda : {10.0, 1e2, 1e3, 1e4}) {
      const double err = std::abs(lp::quadrature_reference(p, lambda).value / lp::leading_term(p, lambda) - 1.0);
      EXPECT_LE(err, 5.0 * std::pow(lambda, -1.0 / p.right.mu_exp)) << p.name;
      EXPECT_LE(err, prev + 1e-15) << p.name;
      prev = err;
    }
  }
}

TEST(LeadingTerm, ProblemWithoutClosedForm) {
  // h = x + x^2, phi = cos x on [0,1]: mu = 1, a0 = 1, alpha = 1, b0 = 1.
  lp::LaplaceProblem p;
  p.name = "linear_plus_quadratic";
  p.right = {1.0, 1.0, 1.0, 1.0};
  p.h = [](double x) { return x + x * x; };
  p.phi = [](double x) { return std::cos(x); };
  for (double lambda : {10.0, 1e2, 1e3, 1e4}) {
    const double ratio = lp::quadrature_reference(p, lambda).value / lp::leading_term(p, lambda);
    EXPECT_LE(std::abs(ratio - 1.0), 5.0 / lambda);
  }
}

TEST(LeadingTerm, IntegrableEndpointSingularity) {
  // phi = x^{-1/2}, h = x: alpha = 1/2; exact sqrt(pi/lambda) erf(sqrt(lambda)).
  lp::LaplaceProblem p;
  p.name = "inverse_sqrt";
  p.right = {1.0, 1.0, 0.5, 1.0};
  p.h = [](double x) { return x; };
  p.phi = [](double x) { return 1.0 / std::sqrt(x); };
  for (double lambda : {10.0, 1e3}) {
    const double exact = std::sqrt(std::numbers::pi / lambda) * std::erf(std::sqrt(lambda));
    EXPECT_NEAR(lp::quadrature_reference(p, lambda).value / exact, 1.0, 1e-8);
    EXPECT_NEAR(lp::leading_term(p, lambda) / exact, 1.0, 1e-4);
  }
}

TEST(LaplaceProblem, ValidationRejectsMisplacedMinimum) {
  auto p = lp::registered_problems()[0];
  p.h = [](double x) { return (x - 0.5) * (x - 0.5); };
  EXPECT_THROW(p.validate(), el::DomainError);
  auto q = lp::registered_problems()[2];
  q.left.reset();
  EXPECT_THROW(q.validate(), el::DomainError);
}

TEST(InteriorMinRatio, Examples) {
  for (double lambda : {1.0, 37.0, 1e5}) {
    EXPECT_NEAR(lp::interior_min_ratio(0, 3.0, 1.0, lambda), 1.0, 1e-15);
    EXPECT_NEAR(lp::interior_min_ratio(2, 2.0, 2.0, lambda) * lambda, 0.5, 1e-14);
  }
  // Gaussian second moment over a symmetric interval.
  const auto p = lp::registered_problems()[2];
  for (double lambda : {1e2, 1e3, 1e4}) {
    const double num = lp::closed_form(p.name, lambda);
    const double den = std::sqrt(2 * std::numbers::pi / lambda) * std::erf(std::sqrt(lambda / 2));
    EXPECT_NEAR(num / den * lambda, lambda * lp::interior_min_ratio(2, 1.0, 2.0, lambda), 1e-12 * lambda);
  }
  EXPECT_THROW(lp::interior_min_ratio(2, 0.0, 1.0, 1.0), el::DomainError);
}

TEST(SphericalInstantiation, SecondDerivativeOfPsi) {
  for (double mu : {-2.0, 0.3, 1.0})
    for (double rho : {0.5, 1.0}) {
      const double m = sp::m_star(mu, rho), d = 1e-4;
      const double fd = (sp::psi_mu_rho(m + d, mu, rho) - 2 * sp::psi_mu_rho(m, mu, rho) +
                         sp::psi_mu_rho(m - d, mu, rho)) /
                        (d * d);
      EXPECT_NEAR(sp::psi_second_derivative(m, rho) / fd, 1.0, 1e-6);
    }
}

TEST(SphericalInstantiation, VarianceMatchesInteriorRatio) {
  // Var(m) ~ ratio with i = 2, phi = (m - m*)^2, h'' = psi'', lambda = N.
  const double mu = 1.0, rho = 1.0;
  const double h2 = sp::psi_second_derivative(sp::m_star(mu, rho), rho);
  for (std::int64_t N : {1000, 100000}) {
    const sp::AuxCanonicalMeasure c(mu, rho, N);
    const double pred = lp::interior_min_ratio(2, h2, 2.0, static_cast<double>(N));
    EXPECT_NEAR(c.sigma_m() * c.sigma_m() / pred, 1.0, 50.0 / N);
  }
}

TEST(SphericalInstantiation, HighTemperatureEndpointScaling) {
  // At beta < 1/(J rho) the energy law is an endpoint problem in t = -eps with
  // mu = 1, a0 = 1/(J rho) - beta, alpha = 1/2, so <t> ~ (alpha/mu)/(a0 N).
  const double beta = 0.5;
  const lp::EndpointExpansion base{1.0, 1.0 - beta, 0.5, 1.0};
  lp::EndpointExpansion shifted = base;
  shifted.alpha = 1.5;
  for (std::int64_t N : {1000, 100000}) {
    const double n = static_cast<double>(N);
    const double pred = lp::endpoint_leading(shifted, n) / lp::endpoint_leading(base, n);
    EXPECT_NEAR(-sp::CanonicalEnergyMeasure(beta, 1.0, N).mean_energy() / pred, 1.0, 10.0 / n);
  }
}
