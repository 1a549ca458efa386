#pragma once

#include <stdexcept>
#include <string>

namespace treedose {

// Bad inputs: malformed files, inconsistent configs, out-of-range arguments.
// The CLI maps these to exit code 2.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Numerical breakdowns: failed factorizations, underflowing weights.
// The CLI maps these to exit code 3.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace treedose
