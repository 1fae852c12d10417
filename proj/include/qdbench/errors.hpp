#pragma once

#include <stdexcept>
#include <string>

namespace qdbench {

// Invalid configuration or arguments. Maps to CLI exit status 1.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Non-convergence, NaN/overflow, failed factorization. Exit status 2.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A required input artifact (file, directory, manifest) is absent. Exit status 3.
class MissingInputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace qdbench
