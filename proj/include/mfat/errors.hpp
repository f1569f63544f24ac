#pragma once

#include <stdexcept>
#include <string>

namespace mfat {

/// A precondition of a public operation was not met by the caller.
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A point was evaluated outside [0,1]^d.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Requested feature lies outside what the implementation supports.
class CapabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Weights collapsed (zero, negative or non-finite total); usually means the
/// biasing density and the target no longer overlap.
class DegenerateRuleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Internal invariant broke (e.g. a root that must exist was not bracketed).
class InvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Forward model or linear solver failed.
class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Optimizer produced a non-finite loss.
class FitError : public std::runtime_error {
 public:
  FitError(const std::string& what, std::size_t iteration)
      : std::runtime_error(what), iteration_(iteration) {}
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

/// Experiment configuration is invalid; the message lists every problem.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mfat
