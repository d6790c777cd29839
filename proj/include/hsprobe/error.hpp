#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hsprobe {

// Every failure the toolkit reports carries one of these kinds. The CLI maps
// them onto distinct exit codes, so keep the list stable.
enum class ErrorKind {
    invalid_argument,
    io,
    bad_magic,
    version_mismatch,
    truncated,
    non_finite,
    corrupt,
    dimension_mismatch,
    shape_mismatch,
    one_class,
    rank_deficient,
    mode_mismatch,
};

std::string_view to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) {
        throw Error(kind, message);
    }
}

}  // namespace hsprobe
