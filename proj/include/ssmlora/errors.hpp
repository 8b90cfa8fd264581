#pragma once

#include <stdexcept>
#include <string>

namespace ssmlora {

// Base class for everything this library throws.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor extents do not line up (matmul inner dims, broadcast, etc.).
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration value or unknown config key.
struct ConfigError : Error {
    using Error::Error;
};

// Insertion plan violates host constraints (duplicate slot, bad layer, ...).
struct PlanError : Error {
    using Error::Error;
};

// Chain stepped out of order within a pass.
struct SequenceError : Error {
    using Error::Error;
};

// Non-finite value where a finite one is required.
struct NumericError : Error {
    using Error::Error;
};

// Training diverged; message carries the epoch index.
struct TrainError : Error {
    using Error::Error;
};

// Bad runtime input (token id out of range, oversize sequence, empty dataset).
struct InputError : Error {
    using Error::Error;
};

// File could not be read/written or has a malformed layout.
struct IoError : Error {
    using Error::Error;
};

}  // namespace ssmlora
