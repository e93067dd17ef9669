#pragma once

#include <stdexcept>
#include <string>

namespace calcseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* kind() const noexcept { return "error"; }
};

class ConfigError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "config_error"; }
};

class ShapeError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "shape_error"; }
};

/// A volume axis is not compatible with the requested patch size.
class DimensionError : public ShapeError {
public:
    DimensionError(const std::string& msg, char axis) : ShapeError(msg), axis_(axis) {}
    char axis() const noexcept { return axis_; }
    const char* kind() const noexcept override { return "dimension_error"; }

private:
    char axis_;
};

class ParseError : public Error {
public:
    ParseError(const std::string& msg, std::size_t byte_offset)
        : Error(msg + " (at byte " + std::to_string(byte_offset) + ")"), offset_(byte_offset) {}
    std::size_t byte_offset() const noexcept { return offset_; }
    const char* kind() const noexcept override { return "parse_error"; }

private:
    std::size_t offset_;
};

/// Overlap metric requested on a case where it has no definition (empty set).
class UndefinedMetricError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "undefined_metric"; }
};

class TrainingError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "training_error"; }
};

class FingerprintMismatch : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "fingerprint_mismatch"; }
};

class GenerationError : public Error {
public:
    using Error::Error;
    const char* kind() const noexcept override { return "generation_error"; }
};

}  // namespace calcseg
