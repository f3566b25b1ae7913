#pragma once

#include <stdexcept>
#include <string>

namespace para {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dimension mismatch between operands, or invalid dimensions.
struct ShapeError : Error {
    using Error::Error;
};

// Input matrix has (numerically) dependent or zero columns where a full
// column rank factor is required.
struct DegenerateColumns : Error {
    using Error::Error;
};

// A matrix that must have orthonormal columns does not.
struct NotOrthonormal : Error {
    using Error::Error;
};

// Model layers or training data do not conform.
struct NonConforming : Error {
    using Error::Error;
};

// Training loss became non-finite (learning rate too high).
struct DivergedLoss : Error {
    using Error::Error;
};

// Malformed text input (CSV, config); message carries the location.
struct ParseError : Error {
    using Error::Error;
};

// Bundle file does not start with the expected magic bytes.
struct BadMagic : Error {
    using Error::Error;
};

// Bundle manifest disagrees with the actual payload.
struct ManifestMismatch : Error {
    using Error::Error;
};

// Bundle format version is not supported.
struct UnsupportedVersion : Error {
    using Error::Error;
};

// A verified mathematical invariant failed at runtime.
struct InvariantViolation : Error {
    using Error::Error;
};

} // namespace para
