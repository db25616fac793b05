#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace didr {

/// Bad configuration: dimension mismatch, unknown key, constraint violation.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// API misuse, e.g. backward on an empty tape.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Numerical failure inside a training loop. Carries the step index.
class TrainingFault : public std::runtime_error {
 public:
  TrainingFault(const std::string& what, std::int64_t step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

/// Non-finite output from one of the proxy chains.
class EstimatorFault : public std::runtime_error {
 public:
  EstimatorFault(const std::string& what, std::size_t chain)
      : std::runtime_error(what + " (chain " + std::to_string(chain) + ")"), chain_(chain) {}

  std::size_t chain() const noexcept { return chain_; }

 private:
  std::size_t chain_;
};

/// Quadrature that failed to produce a finite value on [lo, hi].
class QuadratureError : public std::runtime_error {
 public:
  QuadratureError(const std::string& what, double lo, double hi)
      : std::runtime_error(what + " on [" + std::to_string(lo) + ", " + std::to_string(hi) + "]"),
        lo_(lo),
        hi_(hi) {}

  double lo() const noexcept { return lo_; }
  double hi() const noexcept { return hi_; }

 private:
  double lo_;
  double hi_;
};

/// Objective failed the numerical convexity check at `alpha`.
class ConvexityError : public std::runtime_error {
 public:
  ConvexityError(const std::string& what, double alpha, double second_difference)
      : std::runtime_error(what + " at alpha " + std::to_string(alpha) + " (second difference " +
                           std::to_string(second_difference) + ")"),
        alpha_(alpha),
        second_difference_(second_difference) {}

  double alpha() const noexcept { return alpha_; }
  double second_difference() const noexcept { return second_difference_; }

 private:
  double alpha_;
  double second_difference_;
};

/// Training fault tagged with the pipeline stage it came from.
class StageFault : public TrainingFault {
 public:
  StageFault(const std::string& stage, const std::string& what, std::int64_t step)
      : TrainingFault(stage + ": " + what, step), stage_(stage) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// Domain violation for a pure numerical function (t out of range, t = 0 posterior, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace didr
