#pragma once

#include <stdexcept>
#include <string>

namespace fedsim {

// Shape or dimension disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside a function's mathematical domain.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// NaN or Inf produced or consumed by an op.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse: non-scalar loss, reused tape, bad arguments to a contract.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Federation round protocol violated (publish outside the barrier, stale buffer).
class ProtocolError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid experiment configuration; `field()` names the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace fedsim
