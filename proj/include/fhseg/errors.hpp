#pragma once

#include <stdexcept>
#include <string>

namespace fhseg {

// Process exit codes used by the CLI. Library exceptions map onto these in main().
enum class ExitCode : int {
  ok = 0,
  io = 1,         // unreadable/unwritable paths, malformed binary files
  config = 2,     // bad config values, shape/contract violations, checkpoint mismatch
  data = 3,       // malformed datasets, invalid class ids
  numeric = 4,    // non-finite values where finite ones are required
  threshold = 5,  // a checked threshold (gradcheck tolerance, param audit) failed
};

// Invalid configuration value or an operation asked to do something its
// parameters make impossible (non-exact output division, even kernel, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes incompatible with the requested operation. Messages carry the
// offending shapes.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An API precondition was violated (wrong skip mode for a counter, backward on
// a non-scalar, ...).
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed sample files, manifests, or label values.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite numbers where finite ones are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Filesystem-level failures.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fhseg
