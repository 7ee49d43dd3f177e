#pragma once

#include <stdexcept>
#include <string>

namespace cdt {

// Base for all library errors. The CLI maps subtypes to exit codes.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/matrix dimension violations.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid or inconsistent configuration (exit 2).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Precondition violations on operation arguments.
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Unknown gene / locus / tensor name.
struct LookupError : Error {
    explicit LookupError(const std::string& msg) : Error(msg) {}
};

// Train/validation gene overlap (exit 3).
struct LeakageError : Error {
    explicit LeakageError(const std::string& msg) : Error(msg) {}
};

// Checkpoint/world incompatibility (exit 4).
struct MismatchError : Error {
    explicit MismatchError(const std::string& msg) : Error(msg) {}
};

// Missing or unreadable artifact files (exit 5).
struct MissingInputError : Error {
    explicit MissingInputError(const std::string& msg) : Error(msg) {}
};

// File I/O failures other than missing inputs.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace cdt
