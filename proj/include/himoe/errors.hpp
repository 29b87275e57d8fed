#pragma once

#include <stdexcept>
#include <string>

namespace himoe {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes disagree.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A scalar argument is outside its admissible range (tau <= 0, k out of range, ...).
class ParameterError : public Error {
public:
    using Error::Error;
};

/// Input data is malformed (non-finite values, empty matrices, bad trace lines).
class InputError : public Error {
public:
    using Error::Error;
};

/// A configuration violates one of its invariants. The message names the key.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Fewer than K strictly positive probabilities survived the pool mask.
class RoutingError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite value.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// The finite-difference oracle evaluated to a non-finite value.
class OracleError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace himoe
