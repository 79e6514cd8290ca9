#pragma once

#include <stdexcept>
#include <string>

namespace ernie {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// An argument violates a documented precondition (negative budget, gamma outside (0,1), ...).
class ParameterError : public Error {
public:
    using Error::Error;
};

/// Dimensions of two operands do not chain.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Input lies outside the mathematical domain of an operation (KL on non-simplex input, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// A NaN or infinity showed up in an intermediate quantity.
class NumericError : public Error {
public:
    using Error::Error;
};

/// An exhaustive routine was asked to enumerate an intractable instance.
class SizeError : public Error {
public:
    using Error::Error;
};

/// Object is not in a state that permits the operation (e.g. sampling an underfilled buffer).
class StateError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace ernie
