#pragma once

#include <stdexcept>
#include <string>

namespace dta {

/// Raised when a computation produces non-finite values (NaN/Inf gradients,
/// diverged losses).
class numerical_error : public std::runtime_error {
public:
    explicit numerical_error(const std::string& what) : std::runtime_error(what) {}
};

/// Raised on missing/corrupt files; carries the offending path in the message.
class io_error : public std::runtime_error {
public:
    explicit io_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dta
