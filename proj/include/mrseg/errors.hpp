#pragma once

#include <stdexcept>
#include <string>

namespace mrseg {

// Validation failures of user-supplied configuration. The CLI maps these to
// exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class IoErrc {
    MalformedHeader,
    DataLengthMismatch,
    UnknownDtype,
    FileNotFound,
    WriteFailed,
};

class IoError : public std::runtime_error {
public:
    IoError(IoErrc code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    IoErrc code() const { return code_; }

private:
    IoErrc code_;
};

// Runtime failures after validation (NaN loss, bad sampling window, ...).
// The CLI maps these to exit code 3.
class RuntimeFailure : public std::runtime_error {
public:
    explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mrseg
