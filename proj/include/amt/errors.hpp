#pragma once

#include <stdexcept>
#include <string>

namespace amt {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed text input. Carries the 1-based line number when known.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Binary container is not what it claims to be (bad magic, truncation, version).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Value violates a domain invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Configuration rejected before any work is done.
class ConfigError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Function precondition violated by the caller.
class ArgumentError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

/// Filesystem or stream failure.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace amt
