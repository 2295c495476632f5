#pragma once

#include <stdexcept>
#include <string>

namespace fedcp {

// Shape disagreements between tensors (matmul inner dims, broadcast, ...).
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf showed up where finite values were promised.
struct NumericFault : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse: non-scalar loss, gradient asked for a frozen tensor, ...
struct UsageError : std::logic_error {
  using std::logic_error::logic_error;
};

// Bad values fed into an operation (label out of range, empty batch, ...).
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid or inconsistent experiment configuration.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed data files; messages name the byte offset where parsing broke.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Federation-level faults: mismatched uploads, empty rounds, ...
struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fedcp
