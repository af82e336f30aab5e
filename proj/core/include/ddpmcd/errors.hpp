#pragma once

#include <stdexcept>
#include <string>

namespace ddpmcd {

// Base class for all library errors. Subclasses map onto the CLI exit
// codes: ConfigError -> 1, DataError -> 2, NumericError and internal
// contract/dimension violations -> 3.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration or usage (bad schedule range, odd embedding dim, ...).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Malformed input data (missing files, non-binary labels, shape-mismatched pairs).
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// Tensor shape mismatch between operands; message names the offending axes.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// API contract violation (backward on non-scalar, step without grads, ...).
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Non-finite values or other numeric failure; message names the layer/op.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

}  // namespace ddpmcd
