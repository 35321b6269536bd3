#pragma once

#include <stdexcept>
#include <string>

namespace safer {

/// Incompatible tensor shapes passed to an operation.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Value outside the mathematical domain of an operation (e.g. log of a
/// non-positive number).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// A caller violated a documented precondition.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Invalid dataset, model or experiment parameters.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Invalid forget schedule (repeated or unknown unit).
struct ScheduleError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
  DivergenceError(const std::string& what, long step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step(step) {}
  long step;
};

}  // namespace safer
