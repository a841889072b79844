#pragma once

#include <stdexcept>
#include <string>

namespace lpsr {

// Exception hierarchy shared by every module. Callers can catch Error for
// "anything the library rejected" or a specific subclass.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct DomainError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct InvalidSpecError : Error {
    using Error::Error;
};

struct AssignmentError : Error {
    using Error::Error;
};

struct ValidationError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct ParseError : Error {
    ParseError(const std::string& what, long line_number)
        : Error(what + " (line " + std::to_string(line_number) + ")"), line(line_number) {}
    long line;
};

}  // namespace lpsr
