#pragma once

#include <stdexcept>
#include <string>

namespace ehs {

// Error taxonomy shared across the library. The CLI maps these to exit
// codes: ConfigError -> 2, DataError -> 3, NumericError -> 4.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad settings, bad shapes wired by the caller, invalid arguments.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Tensor shape / dimension mismatches.
class ShapeError : public ConfigError {
public:
    explicit ShapeError(const std::string& msg) : ConfigError(msg) {}
};

// Problems with input data: malformed files, missing fields, empty splits.
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// Malformed on-disk formats (WAV, feature blocks, checkpoints).
class FormatError : public DataError {
public:
    explicit FormatError(const std::string& msg) : DataError(msg) {}
};

class ChecksumError : public FormatError {
public:
    explicit ChecksumError(const std::string& msg) : FormatError(msg) {}
};

class VersionError : public FormatError {
public:
    explicit VersionError(const std::string& msg) : FormatError(msg) {}
};

// A CTC instance whose label cannot be aligned to the frame count.
class InfeasibleCtcError : public DataError {
public:
    explicit InfeasibleCtcError(const std::string& msg) : DataError(msg) {}
};

// NaN/Inf produced by a forward or backward pass.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Misuse of the autograd tape (non-scalar loss, reusing a consumed graph).
class TapeError : public Error {
public:
    explicit TapeError(const std::string& msg) : Error(msg) {}
};

} // namespace ehs
