#pragma once

#include <stdexcept>
#include <string>

namespace casnet {

// Bad shapes, mismatched grids, malformed files, unusable settings.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values where finite ones are required (corrupted fields,
// diverged losses).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace casnet
