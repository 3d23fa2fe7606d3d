#pragma once

#include <stdexcept>

namespace pfsam {

// Shape non-conformance while building a computation graph.
struct StructuralError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A primitive op produced a non-finite value.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse: bad arguments, out-of-range labels, dimension mismatches.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed on-disk artifact (checkpoint, snapshot, delimited file).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent run configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint does not match the model configuration it is loaded for.
struct IncompatibleCheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace pfsam
