// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace scenetone {

/// Raised when a caller violates an operation's precondition.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces a non-finite value.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when an internal invariant does not hold (e.g. a complex residual
/// that should have cancelled did not).
class ConsistencyError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Wraps a failure inside one stage of the editing pipeline.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what)
        : std::runtime_error("stage '" + stage + "' failed: " + what), m_stage(std::move(stage)) {}

    const std::string& stage() const noexcept { return m_stage; }

private:
    std::string m_stage;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
    std::ostringstream ss;
    (ss << ... << std::forward<Args>(args));
    return ss.str();
}

}  // namespace detail

}  // namespace scenetone

#define SCENETONE_REQUIRE(cond, ...)                                                        \
    do {                                                                                    \
        if (!(cond)) {                                                                      \
            throw ::scenetone::InvalidArgument(::scenetone::detail::concat(__VA_ARGS__));  \
        }                                                                                   \
    } while (0)
