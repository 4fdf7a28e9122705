#pragma once

#include <stdexcept>
#include <string>

namespace adamix {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration value or missing required field.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input data (TSV rows, labels, token ids, checkpoint payloads).
class DataError : public Error {
public:
    using Error::Error;
};

/// Checkpoint payload does not match the checksum recorded in its manifest.
class ChecksumError : public DataError {
public:
    using DataError::DataError;
};

/// Tensor shapes do not agree.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Index out of range (class labels, axes).
class IndexError : public Error {
public:
    using Error::Error;
};

/// Routing selection does not fit the mixture site it is applied to.
class RoutingError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss or other numeric failure during optimization.
class TrainingError : public Error {
public:
    using Error::Error;
};

/// Caller broke an API precondition (e.g. backward on a non-scalar).
class ContractError : public Error {
public:
    using Error::Error;
};

}  // namespace adamix
