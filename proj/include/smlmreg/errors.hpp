#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace smlmreg {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input rejected before any computation (bad config, bad flags, bad shapes).
class ValidationError : public Error {
public:
    using Error::Error;
};

class NotARotation : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class NotPSD : public ValidationError {
public:
    NotPSD(const std::string& what, std::size_t row = 0)
        : ValidationError(what), row_(row) {}
    std::size_t row() const noexcept { return row_; }

private:
    std::size_t row_;
};

class LengthMismatch : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class InsufficientPoints : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class TooFewPoints : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ParseError : public ValidationError {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : ValidationError(line ? what + " (line " + std::to_string(line) + ")" : what),
          line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Runtime numerical failures.
class SingularCovariance : public Error {
public:
    using Error::Error;
};

class DegenerateConfiguration : public Error {
public:
    DegenerateConfiguration(const std::string& what, int rank)
        : Error(what), rank_(rank) {}
    /// Numerical rank of the weighted cross-covariance (0 when all weights vanish).
    int rank() const noexcept { return rank_; }

private:
    int rank_;
};

}  // namespace smlmreg
