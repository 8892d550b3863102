#pragma once

#include <stdexcept>
#include <string>

namespace volsynth {

// Base for every error raised by the library. Callers that only care about
// "something went wrong" catch this; tests catch the specific subclasses.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Precondition violated by the caller (empty input, bad argument range, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

// Incompatible tensor or volume shapes. The message names both shapes.
class DimensionError : public Error {
public:
    using Error::Error;
};

// NaN or Inf produced or consumed at an op boundary.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

// NaN/Inf in a gradient handed to the optimizer.
class PoisonedGradientError : public Error {
public:
    PoisonedGradientError(const std::string& param)
        : Error("poisoned gradient for parameter '" + param + "'"), param_(param) {}
    const std::string& parameter() const noexcept { return param_; }

private:
    std::string param_;
};

// Training-mode batch normalization with a single element per channel.
class DegenerateBatchError : public Error {
public:
    using Error::Error;
};

// Anything wrong with an on-disk format.
class FormatError : public Error {
public:
    using Error::Error;
};

class BadMagicError : public FormatError {
public:
    using FormatError::FormatError;
};

class TruncatedError : public FormatError {
public:
    using FormatError::FormatError;
};

class LengthMismatchError : public FormatError {
public:
    using FormatError::FormatError;
};

class UnsupportedUpsampleError : public Error {
public:
    using Error::Error;
};

class StratificationError : public Error {
public:
    using Error::Error;
};

// Class index outside what a model was trained on.
class UnknownClassError : public Error {
public:
    using Error::Error;
};

}  // namespace volsynth
