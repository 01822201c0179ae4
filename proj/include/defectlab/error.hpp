#pragma once

#include <stdexcept>
#include <string>

namespace defectlab {

// Base of every error the library throws. The CLI maps each family onto a
// stable exit code (see exit_code()).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid numeric/structural parameter (even kernel, bad fraction, ...).
class ParameterError : public Error {
public:
    using Error::Error;
};

// Configuration file missing, unparsable or inconsistent.
class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Binary/text file with the wrong structure (PGM header, weight file, ...).
class FormatError : public Error {
public:
    using Error::Error;
};

class ParseError : public FormatError {
public:
    ParseError(const std::string& what, int line)
        : FormatError(line > 0 ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
    int line() const noexcept { return line_; }

private:
    int line_;
};

// Data the computation cannot work with: empty sets, shape mismatches,
// out-of-range labels.
class InputError : public Error {
public:
    using Error::Error;
};

class LabelError : public InputError {
public:
    using InputError::InputError;
};

class SpecError : public InputError {
public:
    using InputError::InputError;
};

class DegenerateError : public InputError {
public:
    using InputError::InputError;
};

inline int exit_code(const Error& e) {
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParameterError*>(&e)) return 2;
    if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e)) return 3;
    return 4;
}

}  // namespace defectlab
