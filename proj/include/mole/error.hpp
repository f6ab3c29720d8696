#pragma once

#include <stdexcept>
#include <string>

namespace mole {

// Error taxonomy used across the library. Everything derives from
// std::runtime_error so callers can catch broadly or by kind.

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/extent mismatch between tensors.
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf or otherwise invalid numeric input.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// API contract violation (wrong call sequence, empty input, ...).
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration value or combination.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Input that makes the requested quantity undefined (e.g. cosine of a
// zero vector).
struct DegenerateInputError : Error {
    explicit DegenerateInputError(const std::string& msg) : Error(msg) {}
};

// File format / IO failures.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace mole
