#pragma once

#include <stdexcept>

namespace affmae {

// Bad parameters, shape conformance, unusable files. CLI exit code 2.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Non-finite values, convergence failures. CLI exit code 3.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace affmae
