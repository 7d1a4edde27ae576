#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace iia {

// Error taxonomy. The CLI maps each family onto a process exit code.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or layer shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Missing or invalid configuration (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary or text input. Always carries the byte offset at which
/// the problem was detected (exit code 3).
class ParseError : public Error {
 public:
  ParseError(std::string what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        message_(std::move(what)),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }
  /// Description without the offset suffix.
  const std::string& message() const noexcept { return message_; }

 private:
  std::string message_;
  std::size_t offset_;
};

/// Filesystem failures. The message names the path.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Distribution with zero spread; no sigma band can be formed (exit code 4).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// A forged band overlaps observed validation values.
class ForgeError : public Error {
 public:
  ForgeError(std::string what, std::size_t collisions)
      : Error(std::move(what)), collisions_(collisions) {}

  std::size_t collisions() const noexcept { return collisions_; }

 private:
  std::size_t collisions_;
};

/// An internal postcondition failed (exit code 5).
class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace iia
