// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace acm {

enum class ErrorKind {
    Format,            // malformed container / JSON
    Integrity,         // truncated or inconsistent payload
    Compatibility,     // name or shape mismatch between inputs
    Provenance,        // hash / calib_id mismatch
    Configuration,     // bad recipe, missing coefficient, bad parameter
    InsufficientData,  // too few samples for an estimator
    Io,                // unreadable / unwritable path
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Format: return "format error";
    case ErrorKind::Integrity: return "integrity error";
    case ErrorKind::Compatibility: return "compatibility error";
    case ErrorKind::Provenance: return "provenance error";
    case ErrorKind::Configuration: return "configuration error";
    case ErrorKind::InsufficientData: return "insufficient data";
    case ErrorKind::Io: return "I/O error";
    }
    return "error";
}

/// Base exception for every failure raised by the toolkit. The kind drives
/// the CLI exit code.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace acm
