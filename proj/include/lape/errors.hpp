#pragma once

#include <stdexcept>
#include <string>

namespace lape {

/// Violated precondition of an operation (bad configuration, wrong usage).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Shape mismatch between operands.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// A precomputed PE cache was read after one of its sources changed.
class StaleCacheError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Token whose standard deviation vanishes, making a ratio undefined.
class SingularTokenError : public ContractError {
 public:
  SingularTokenError(const std::string& what, long token)
      : ContractError(what), token_(token) {}
  long token() const { return token_; }

 private:
  long token_;
};

/// Filesystem or format failure; carries the offending path in the message.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lape
