#pragma once

#include <stdexcept>
#include <string>

namespace csfa {

// Error taxonomy shared across the library. The CLI maps each category to a
// distinct exit code, so new error kinds should subclass one of these rather
// than throwing std::runtime_error directly.

/// Invalid or inconsistent configuration (specs, files, CLI values).
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape or length mismatch between numeric operands.
class DimensionError : public std::runtime_error {
public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Operation invoked on an object in the wrong state (reused tape, empty bank).
class StateError : public std::runtime_error {
public:
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid argument value (empty input, out-of-range label, zero-norm vector).
class ArgumentError : public std::runtime_error {
public:
  explicit ArgumentError(const std::string& msg) : std::runtime_error(msg) {}
};

/// File or stream read/write failure.
class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A run that completed mechanically but failed a required outcome
/// (e.g. base training below its accuracy floor).
class RunError : public std::runtime_error {
public:
  explicit RunError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace csfa
