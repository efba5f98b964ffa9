// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace kvedit {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad shapes, bad indices, violated preconditions on arguments.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed configuration or option values.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// File missing, truncated, or malformed.
class IoError : public Error {
public:
    using Error::Error;
};

/// Non-finite values or a numerically undefined request.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Cache lifecycle violations (missing keys, duplicates, residency).
class CacheError : public Error {
public:
    using Error::Error;
};

} // namespace kvedit
