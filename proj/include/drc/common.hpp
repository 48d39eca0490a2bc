#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace drc {

using i64 = std::int64_t;
using u64 = std::uint64_t;

// Error taxonomy mirrored by the CLI exit codes: config/usage -> 1,
// IO -> 2, numerical failure -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct NumericalError : Error {
    using Error::Error;
};

// Langevin chain left the configured norm bound.
struct DivergenceError : NumericalError {
    using NumericalError::NumericalError;
};

// Rejection-sampling budget exhausted; the dataset config is infeasible.
struct GenerationError : ConfigError {
    using ConfigError::ConfigError;
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

}  // namespace drc
