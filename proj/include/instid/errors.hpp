#pragma once

#include <stdexcept>
#include <string>

namespace instid {

// Error taxonomy mirrors the CLI exit codes: config/input problems (2),
// missing or mismatched upstream artifacts (3), numeric failures (4).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct DependencyError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct ShapeError : Error {
    using Error::Error;
};

}  // namespace instid
