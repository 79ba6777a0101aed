#pragma once

#include <stdexcept>
#include <string>

namespace iam {

// Violated precondition or shape contract on a public operation.
struct ContractViolation : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed file, bad magic, truncation, unknown config key, ...
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite value where a finite one is required (divergence, overflow).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractViolation(msg);
}

}  // namespace iam
