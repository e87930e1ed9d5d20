#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace teachcut {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed JSON text. `offset()` is the byte offset reported by the parser.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " at byte " + std::to_string(offset)), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// A record that parsed but breaks a data-model invariant.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, std::size_t position, const std::string& what)
      : Error(field + "[" + std::to_string(position) + "]: " + what),
        field_(std::move(field)),
        position_(position) {}

  const std::string& field() const noexcept { return field_; }
  std::size_t position() const noexcept { return position_; }

 private:
  std::string field_;
  std::size_t position_;
};

/// Invalid arguments or an inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace teachcut
