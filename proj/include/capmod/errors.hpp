#pragma once

#include <stdexcept>
#include <string>

namespace capmod {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/dimension mismatch between tensors or between a tensor and an op.
struct ShapeError : Error {
    using Error::Error;
};

// Input outside the mathematical domain of an op (log of non-positive,
// exp overflow, NaN/Inf escaping a forward op).
struct DomainError : Error {
    using Error::Error;
};

// API contract violated (non-scalar loss, missing gradient, wrong count).
struct ContractError : Error {
    using Error::Error;
};

// File format or filesystem problem.
struct IoError : Error {
    using Error::Error;
};

// Bad configuration value.
struct ConfigError : Error {
    using Error::Error;
};

// Training diverged (NaN loss and similar).
struct NumericalError : Error {
    using Error::Error;
};

}  // namespace capmod
