#pragma once

#include <stdexcept>
#include <string>

namespace amalgam {

enum class ErrorKind {
    shape,
    geometry,
    arity,
    axis,
    tape,
    optimizer_state,
    normalization,
    selection,
    alignment,
    coverage,
    spec,
    size,
    config,
    usage,
    io,
    format,
    version,
    corruption,
    conflict,
    not_found,
};

const char* to_string(ErrorKind kind) noexcept;

// Single exception type for the library; the kind drives CLI exit codes.
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

}  // namespace amalgam
