#ifndef MEDLSDM_ERRORS_HPP
#define MEDLSDM_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace medlsdm {

// Error taxonomy; the CLI maps these to process exit codes
// (config 2, data 3, divergence 4, corruption 5).
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
    using Error::Error;
};

// Bad input data: file format problems, unsupported dtypes, shape
// mismatches, invalid labels, empty datasets.
struct DataError : Error {
    using Error::Error;
};

struct ShapeError : DataError {
    using DataError::DataError;
};

struct DivergenceError : Error {
    using Error::Error;
};

// Numeric argument outside the mathematical domain of an operation.
struct DomainError : Error {
    using Error::Error;
};

// Checkpoint-level damage: digest mismatch or truncation.
struct CorruptionError : Error {
    using Error::Error;
};

struct VersionError : Error {
    using Error::Error;
};

}  // namespace medlsdm

#endif
