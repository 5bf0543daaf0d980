#pragma once

#include <stdexcept>
#include <string>

namespace aoar {

// Invalid configuration or arguments supplied by the user (exit code 2).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite loss or similar numerical failure (exit code 3).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// File could not be read, written, or parsed (exit code 4).
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace aoar
