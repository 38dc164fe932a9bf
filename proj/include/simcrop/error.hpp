#pragma once

#include <stdexcept>
#include <string>

namespace simcrop {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform for an op.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A forward pass produced NaN/Inf, or a normalization hit a zero norm.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Bad argument or precondition violation outside of shape checks.
class ValueError : public Error {
public:
    using Error::Error;
};

/// Malformed config file or unknown key.
class ConfigError : public Error {
public:
    using Error::Error;
};

enum class FormatErrc {
    bad_magic = 1,
    bad_version = 2,
    fingerprint_mismatch = 3,
    truncated = 4,
    corrupt = 5,
    io = 6,
};

inline const char* to_string(FormatErrc c) {
    switch (c) {
    case FormatErrc::bad_magic: return "bad magic";
    case FormatErrc::bad_version: return "unsupported version";
    case FormatErrc::fingerprint_mismatch: return "config fingerprint mismatch";
    case FormatErrc::truncated: return "truncated file";
    case FormatErrc::corrupt: return "corrupt file";
    case FormatErrc::io: return "i/o failure";
    }
    return "unknown";
}

/// Binary file read/write failure, with a code distinguishing the cause.
class FormatError : public Error {
public:
    FormatError(FormatErrc code, const std::string& what)
        : Error(std::string(to_string(code)) + ": " + what), code_(code) {}
    FormatErrc code() const noexcept { return code_; }

private:
    FormatErrc code_;
};

} // namespace simcrop
