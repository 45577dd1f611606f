#pragma once

#include <stdexcept>
#include <string>

namespace privdiff {

// Error taxonomy. Each class maps to one failure family so callers (and the
// CLI exit-code table) can dispatch on type.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor extents do not line up (matmul inner dims, conv kernel vs input, ...).
struct ShapeError : Error {
    using Error::Error;
};

// An API precondition was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

// Invalid or inconsistent configuration values.
struct ConfigError : Error {
    using Error::Error;
};

// Dataset-level problems: empty data, mixed sizes, single-class labels.
struct DataError : Error {
    using Error::Error;
};

// Malformed on-disk artifacts (archives, checkpoints).
struct FormatError : Error {
    using Error::Error;
};

// Missing prerequisite state (e.g. fine-tuning without a pre-trained model).
struct StateError : Error {
    using Error::Error;
};

// Noise calibration cannot reach the requested privacy target.
struct CalibrationError : Error {
    using Error::Error;
};

// Non-finite values or numerically impossible inputs (non-PSD after repair).
struct NumericError : Error {
    using Error::Error;
};

// Configured privacy target and accountant result disagree; the artifact is
// not stamped as DP.
struct BudgetError : Error {
    using Error::Error;
};

}  // namespace privdiff
