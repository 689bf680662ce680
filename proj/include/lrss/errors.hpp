#pragma once

#include <stdexcept>
#include <string>

namespace lrss {

// Error taxonomy. Every throwing path in the library uses one of these so
// callers (CLI, tests) can map failures to exit codes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

// Dense attention refuses grids beyond a flattened-token cap instead of
// exhausting memory.
struct CapacityError : std::runtime_error {
    explicit CapacityError(const std::string& msg) : std::runtime_error("capacity error: " + msg) {}
};

struct DegenerateInputError : std::runtime_error {
    explicit DegenerateInputError(const std::string& msg)
        : std::runtime_error("degenerate input: " + msg) {}
};

struct InsufficientDataError : std::runtime_error {
    explicit InsufficientDataError(const std::string& msg)
        : std::runtime_error("insufficient data: " + msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("I/O error: " + msg) {}
};

}  // namespace lrss
