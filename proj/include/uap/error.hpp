#pragma once

#include <stdexcept>
#include <string>

namespace uap {

// Error categories surfaced through the C API as status codes.
enum class ErrorKind {
    io,          // unreadable/truncated file
    format,      // bad magic number or malformed container
    argument,    // shape mismatch, bad parameter
    numeric,     // non-finite values, eigensolver non-convergence
    training,    // divergence during optimization
    data,        // dataset quality (too many degenerate samples)
    degenerate,  // zero gradient on a single sample
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) fail(kind, msg);
}

}  // namespace uap
