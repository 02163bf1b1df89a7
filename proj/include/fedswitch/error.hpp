#pragma once

#include <stdexcept>
#include <string>

namespace fedswitch {

/// Base class for every error raised by the simulator.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or length disagreement between arguments.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A NaN or infinity showed up where only finite values are allowed.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Bad configuration, bad input file, or a violated precondition.
class ConfigError : public Error {
public:
    using Error::Error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
}

inline void require_shape(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

}  // namespace detail
}  // namespace fedswitch
