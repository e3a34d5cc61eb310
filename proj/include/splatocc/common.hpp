#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace splatocc {

#ifdef SPLATOCC_REAL32
using real = float;
#else
using real = double;
#endif

// Bad user input: malformed files, invalid configs, precondition violations.
// Maps to CLI exit code 1.
struct validation_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Numerical failure: NaN/Inf where a finite value is required, failed
// gradient check. Maps to CLI exit code 2.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw validation_error(msg);
}

inline void require_finite(real v, const std::string& what) {
    if (!std::isfinite(v)) throw numeric_error("non-finite value in " + what);
}

}  // namespace splatocc
