#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include "ensemble_lab/errors.hpp"

namespace ensemble_lab::numerics {

struct QuadratureOptions {
  double rel_tol = 1e-9;
  double abs_tol = 0.0;
  int max_intervals = 20000;
};

struct QuadratureResult {
  double value = 0.0;
  double abs_error = 0.0;
  int intervals = 0;
};

namespace detail {

// Gauss-Kronrod 7/15 abscissae and weights (QUADPACK qk15).
inline constexpr std::array<double, 8> kXgk = {
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.000000000000000000000000000000000};
inline constexpr std::array<double, 8> kWgk = {
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714};
inline constexpr std::array<double, 4> kWg = {
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327};

struct Segment {
  double a, b, value, error, floor;
  bool operator<(const Segment& o) const { return error < o.error; }
};

template <class F>
Segment gauss_kronrod15(F& f, double a, double b) {
  const double centre = 0.5 * (a + b);
  const double half = 0.5 * (b - a);
  const double fc = f(centre);
  double resg = fc * kWg[3];
  double resk = fc * kWgk[7];
  double resabs = std::abs(resk);
  for (int j = 0; j < 7; ++j) {
    const double dx = half * kXgk[j];
    const double f1 = f(centre - dx);
    const double f2 = f(centre + dx);
    resk += kWgk[j] * (f1 + f2);
    resabs += kWgk[j] * (std::abs(f1) + std::abs(f2));
    if (j % 2 == 1) resg += kWg[j / 2] * (f1 + f2);
  }
  const double value = resk * half;
  double error = std::abs((resk - resg) * half);
  // Estimates below the rounding floor of this segment cannot be refined.
  const double floor = 50.0 * std::numeric_limits<double>::epsilon() * resabs * std::abs(half);
  if (error < floor) error = floor;
  if (!std::isfinite(value)) error = std::numeric_limits<double>::infinity();
  return {a, b, value, error, floor};
}

}  // namespace detail

// Globally adaptive Gauss-Kronrod quadrature over [a, b], optionally pre-split
// at interior breakpoints. Throws QuadratureError if the tolerance is not met.
template <class F>
QuadratureResult integrate(F&& f, double a, double b, std::span<const double> breakpoints = {},
                           const QuadratureOptions& opts = {}) {
  if (!(a <= b)) throw DomainError("integrate: require a <= b");
  if (a == b) return {};
  std::vector<double> cuts{a};
  for (double x : breakpoints)
    if (x > a && x < b) cuts.push_back(x);
  cuts.push_back(b);
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

  std::priority_queue<detail::Segment> heap;
  double total = 0.0, total_err = 0.0, total_floor = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    auto s = detail::gauss_kronrod15(f, cuts[i], cuts[i + 1]);
    total += s.value;
    total_err += s.error;
    total_floor += s.floor;
    heap.push(s);
  }
  int count = static_cast<int>(heap.size());
  // Also stop once every segment is at its rounding floor (e.g. a zero integral).
  auto done = [&] {
    return total_err <= std::max({opts.abs_tol, opts.rel_tol * std::abs(total), 1.01 * total_floor});
  };
  while (!done()) {
    if (count >= opts.max_intervals || !std::isfinite(total_err)) {
      throw QuadratureError("adaptive quadrature did not converge", total, total_err);
    }
    auto s = heap.top();
    heap.pop();
    const double mid = 0.5 * (s.a + s.b);
    if (!(mid > s.a && mid < s.b)) {
      throw QuadratureError("adaptive quadrature hit machine resolution", total, total_err);
    }
    auto left = detail::gauss_kronrod15(f, s.a, mid);
    auto right = detail::gauss_kronrod15(f, mid, s.b);
    total += left.value + right.value - s.value;
    total_err += left.error + right.error - s.error;
    total_floor += left.floor + right.floor - s.floor;
    heap.push(left);
    heap.push(right);
    ++count;
  }
  // Re-sum to drop the drift accumulated by incremental updates.
  double sum = 0.0, err = 0.0;
  while (!heap.empty()) {
    sum += heap.top().value;
    err += heap.top().error;
    heap.pop();
  }
  return {sum, err, count};
}

// Breakpoints x0 + scale*2^k (k = 0, 1, ...) on the side of x0 towards `end`.
inline std::vector<double> geometric_breakpoints(double x0, double scale, double end) {
  std::vector<double> out;
  const double dir = end > x0 ? 1.0 : -1.0;
  for (double d = scale; d < std::abs(end - x0); d *= 2.0) out.push_back(x0 + dir * d);
  return out;
}

inline double log_binomial(std::int64_t n, std::int64_t k) {
  if (k < 0 || k > n) return -std::numeric_limits<double>::infinity();
  const std::int64_t r = std::min(k, n - k);
  if (r <= 30) {
    double s = 0.0;
    for (std::int64_t j = 1; j <= r; ++j)
      s += std::log(static_cast<double>(n - r + j)) - std::log(static_cast<double>(j));
    return s;
  }
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// ln(2 cosh x), stable for large |x|.
inline double log_two_cosh(double x) {
  const double ax = std::abs(x);
  return ax + std::log1p(std::exp(-2.0 * ax));
}

inline double log_add_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

// x ln x with the 0 ln 0 = 0 convention.
inline double xlogx(double x) { return x == 0.0 ? 0.0 : x * std::log(x); }

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_stderr = 0.0;
  double residual_stderr = 0.0;
  std::size_t points = 0;
};

// Ordinary least squares y = intercept + slope*x.
inline LinearFit least_squares(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DomainError("least_squares: size mismatch");
  const std::size_t n = x.size();
  if (n < 3) throw DomainError("least_squares: at least 3 points required, got " + std::to_string(n));
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0) throw DomainError("least_squares: abscissae are all equal");
  LinearFit fit;
  fit.points = n;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double rss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = y[i] - fit.intercept - fit.slope * x[i];
    rss += r * r;
  }
  const double s2 = rss / static_cast<double>(n - 2);
  fit.residual_stderr = std::sqrt(s2);
  fit.slope_stderr = std::sqrt(s2 / sxx);
  return fit;
}

// Welford accumulator; merge() uses the pairwise update so chunked sums are
// reproducible when merged in a fixed order.
struct RunningStats {
  std::size_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void push(double x) {
    ++n;
    const double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  void merge(const RunningStats& o) {
    if (o.n == 0) return;
    if (n == 0) {
      *this = o;
      return;
    }
    const double total = static_cast<double>(n + o.n);
    const double d = o.mean - mean;
    mean += d * static_cast<double>(o.n) / total;
    m2 += o.m2 + d * d * static_cast<double>(n) * static_cast<double>(o.n) / total;
    n += o.n;
  }
  double variance() const { return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0; }
  double std_error() const { return n > 1 ? std::sqrt(variance() / static_cast<double>(n)) : 0.0; }
};

inline double normal_cdf(double x, double mean = 0.0, double sd = 1.0) {
  return 0.5 * std::erfc(-(x - mean) / (sd * std::numbers::sqrt2));
}

// Kolmogorov-Smirnov sup distance between the empirical law of `samples`
// (sorted in place) and a continuous cdf.
template <class Cdf>
double ks_statistic(std::vector<double>& samples, Cdf&& cdf) {
  if (samples.empty()) throw DomainError("ks_statistic: no samples");
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double F = cdf(samples[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - F, F - static_cast<double>(i) / n});
  }
  return d;
}

}  // namespace ensemble_lab::numerics
