#pragma once

#include <stdexcept>
#include <string>

namespace fec {

// Base class for every error thrown by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes (messages name both shapes).
struct ShapeError : Error {
    using Error::Error;
};

// Invalid model/run configuration (bad center counts, indivisible grids, ...).
struct ConfigError : Error {
    using Error::Error;
};

// An operation was asked to act outside its domain (empty axis, ...).
struct DomainError : Error {
    using Error::Error;
};

// Invalid argument to a post-processing routine (k > O, empty dataset, ...).
struct ArgumentError : Error {
    using Error::Error;
};

// Malformed input file (idx header, image decode, config file).
struct FormatError : Error {
    using Error::Error;
};

// Checkpoint failed to load: bad magic, version, checksum or truncation.
struct CheckpointError : Error {
    using Error::Error;
};

// API contract violation (non-scalar backward root, record mismatch).
struct ContractError : Error {
    using Error::Error;
};

// Numerical failure; carries the name of the first offending tensor.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace fec
