#pragma once

#include <stdexcept>
#include <string>

namespace ilm {

// Base for all library errors. Subclasses distinguish contract violations
// (caller bugs) from numeric and I/O failures so the CLI can map them to
// exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor shape or index mismatch; message carries the offending shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Non-finite value produced or detected mid-computation.
class NumericsError : public Error {
public:
    using Error::Error;
};

// Precondition violated by the caller (empty batch, bad range, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

// Invalid configuration file or field.
class ConfigError : public Error {
public:
    using Error::Error;
};

// File read/write failure.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace ilm
