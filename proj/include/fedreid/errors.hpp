#pragma once

#include <stdexcept>
#include <string>

namespace fedreid {

// Base class for everything the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or architecture (dimension mismatch, bad ranges).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Invalid arguments to a pure function (labels out of range, shape mismatch).
class InputError : public Error {
 public:
  using Error::Error;
};

// API called in the wrong state (e.g. backward without a forward cache).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Non-finite values reached an optimizer step.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Client/server contract violated (shape mismatch on broadcast, empty updates).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Binary file decoding failures.
class FormatError : public Error {
 public:
  enum class Kind { MalformedHeader, TruncatedPayload, ChecksumMismatch };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace fedreid
