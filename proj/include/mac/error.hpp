#pragma once

#include <stdexcept>
#include <string>

namespace mac {

// Base class for every error thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& message) : std::runtime_error(message) {}
};

// Dimension or cardinality mismatch between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A value outside an operation's mathematical domain (ln of a nonpositive
// number, probability outside [0,1], negative weight, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// A combination was requested over zero sub-models or zero groups.
class EmptyEnsembleError : public Error {
 public:
  using Error::Error;
};

// Malformed file content (CSV or binary model blobs).
class ParseError : public Error {
 public:
  using Error::Error;
};

// A serialized artifact carries an unsupported format version.
class VersionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or arguments (fractions that do not sum to one,
// out-of-range indices, contradictory options).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Training aborted; the message carries the diagnostic context.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace mac
