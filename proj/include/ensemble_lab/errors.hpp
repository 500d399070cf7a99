#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ensemble_lab {

enum class ErrorCode {
  domain,
  degenerate_ensemble,
  capacity,
  unsupported_variant,
  quadrature,
  non_finite_sample,
  budget_exhausted,
  internal,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::domain: return "domain";
    case ErrorCode::degenerate_ensemble: return "degenerate_ensemble";
    case ErrorCode::capacity: return "capacity";
    case ErrorCode::unsupported_variant: return "unsupported_variant";
    case ErrorCode::quadrature: return "quadrature";
    case ErrorCode::non_finite_sample: return "non_finite_sample";
    case ErrorCode::budget_exhausted: return "budget_exhausted";
    case ErrorCode::internal: return "internal";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// A precondition on the inputs does not hold.
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what, ErrorCode code = ErrorCode::domain)
      : Error(code, what) {}
};

// m^2 = rho, or an energy whose branches sit on the sphere's boundary.
class DegenerateEnsembleError : public DomainError {
 public:
  explicit DegenerateEnsembleError(const std::string& what)
      : DomainError(what, ErrorCode::degenerate_ensemble) {}
};

class CapacityError : public Error {
 public:
  explicit CapacityError(const std::string& what) : Error(ErrorCode::capacity, what) {}
};

class UnsupportedVariantError : public Error {
 public:
  explicit UnsupportedVariantError(const std::string& what)
      : Error(ErrorCode::unsupported_variant, what) {}
};

class QuadratureError : public Error {
 public:
  QuadratureError(const std::string& what, double best_estimate, double achieved_error)
      : Error(ErrorCode::quadrature, what + " (best estimate " + std::to_string(best_estimate) +
                                         ", achieved error " + std::to_string(achieved_error) + ")"),
        best_estimate_(best_estimate),
        achieved_error_(achieved_error) {}
  double best_estimate() const noexcept { return best_estimate_; }
  double achieved_error() const noexcept { return achieved_error_; }

 private:
  double best_estimate_;
  double achieved_error_;
};

class NonFiniteSampleError : public Error {
 public:
  explicit NonFiniteSampleError(std::size_t draw_index)
      : Error(ErrorCode::non_finite_sample,
              "non-finite cost at draw " + std::to_string(draw_index)),
        draw_index_(draw_index) {}
  std::size_t draw_index() const noexcept { return draw_index_; }

 private:
  std::size_t draw_index_;
};

class BudgetExhaustedError : public Error {
 public:
  explicit BudgetExhaustedError(const std::string& what)
      : Error(ErrorCode::budget_exhausted, what) {}
};

class InternalError : public Error {
 public:
  explicit InternalError(const std::string& what) : Error(ErrorCode::internal, what) {}
};

}  // namespace ensemble_lab
