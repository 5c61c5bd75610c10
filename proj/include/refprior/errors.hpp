#pragma once

#include <stdexcept>
#include <string>

namespace refprior {

/// Raised when a caller breaks an operation's precondition (shape mismatch,
/// out-of-range parameter, impure training data, non-finite values, ...).
/// The CLI maps this to exit code 1.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised for anything that touches the filesystem or a byte stream.
/// The CLI maps this to exit code 2.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

}  // namespace refprior
