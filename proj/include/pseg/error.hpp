#pragma once

#include <stdexcept>
#include <string>

namespace pseg {

enum class ErrorKind {
    format,       // malformed bytes / bad magic
    unsupported,  // valid but outside the supported subset
    compressed,   // gzip stream where raw bytes were expected
    truncated,    // payload shorter than the header promises
    shape,        // tensor / grid shape mismatch
    range,        // index or coordinate out of bounds
    state,        // operation not legal in the current state
    usage,        // caller contract violated
    numeric,      // NaN/Inf where a finite value is required
    io,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

}  // namespace pseg
