#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mmg {

/// Inconsistent dimensions or invalid configuration values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside the mathematical domain of an operation (gamma <= 0, non-PD covariance, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Non-finite value produced during computation. Carries the optimizer step when known.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what, std::int64_t step = -1)
      : std::runtime_error(step >= 0 ? what + " (step " + std::to_string(step) + ")" : what),
        step_(step) {}

  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace mmg
