#pragma once

#include <stdexcept>
#include <string>

namespace dynaclr {

/// Base of every error the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller-supplied input is malformed or violates a documented invariant.
/// The CLI maps this family to exit code 1.
class ValidationError : public Error {
public:
    using Error::Error;
};

class ParseError : public ValidationError {
public:
    ParseError(const std::string& field, const std::string& what)
        : ValidationError("parse error in '" + field + "': " + what), field_(field) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

class IntegrityError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class RangeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class LeakageError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class DegenerateStatsError : public Error {
public:
    DegenerateStatsError(const std::string& channel, const std::string& what)
        : Error("degenerate statistics for channel '" + channel + "': " + what), channel_(channel) {}
    const std::string& channel() const noexcept { return channel_; }

private:
    std::string channel_;
};

class SamplingError : public Error {
public:
    using Error::Error;
};

class EmptyAnchorSetError : public SamplingError {
public:
    using SamplingError::SamplingError;
};

class CapabilityError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class NonFiniteLossError : public Error {
public:
    using Error::Error;
};

}  // namespace dynaclr
