#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lesa {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dimension / layout violations (bad shapes, group divisibility, ...).
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration, unknown keys, architecture mismatches.
struct ConfigError : Error {
    using Error::Error;
};

// NaN/Inf and other numeric failure states.
struct NumericError : Error {
    using Error::Error;
};

// Filesystem and serialization failures.
struct IoError : Error {
    using Error::Error;
};

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

}  // namespace lesa
