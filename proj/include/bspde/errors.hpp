// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace bspde {

/// Precondition or shape violation detected before any computation.
class InvalidArgument : public std::invalid_argument {
public:
    explicit InvalidArgument(const std::string& what) : std::invalid_argument(what) {}
};

/// A computation produced non-finite values, failed to converge, or hit a
/// singular system.
class NumericFailure : public std::runtime_error {
public:
    explicit NumericFailure(const std::string& what) : std::runtime_error(what) {}
};

/// An object was used before the state it depends on was produced.
class InvalidState : public std::logic_error {
public:
    explicit InvalidState(const std::string& what) : std::logic_error(what) {}
};

inline void require(bool condition, const std::string& message) {
    if (!condition) throw InvalidArgument(message);
}

}  // namespace bspde
