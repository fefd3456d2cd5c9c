#pragma once

#include <stdexcept>
#include <string>

namespace tsfusion {

// Base of every error the library throws. The CLI maps the subclasses to
// process exit codes, so keep the hierarchy flat.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or rank mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Sequence shorter than a temporal kernel or window needs.
class InsufficientHistoryError : public DimensionError {
public:
    using DimensionError::DimensionError;
};

/// Malformed, inconsistent or unrecoverable input data.
class DataError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration (hyperparameters, ablation flags, CLI options).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Non-finite values during training or differentiation.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace tsfusion
