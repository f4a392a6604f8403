#pragma once

#include <stdexcept>
#include <string>

namespace binspot {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller passed arguments that violate a documented precondition.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Shapes of two operands disagree.
class ShapeMismatch : public InvalidArgument {
public:
    using InvalidArgument::InvalidArgument;
};

/// A serialized file (checkpoint, feature file, bundle) is malformed.
class FormatError : public Error {
public:
    using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw InvalidArgument(msg);
}

inline void require_shape(bool cond, const std::string& msg) {
    if (!cond) throw ShapeMismatch(msg);
}

}  // namespace detail
}  // namespace binspot
