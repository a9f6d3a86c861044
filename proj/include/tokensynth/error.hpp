#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tokensynth {

// Broad failure classes. The CLI maps these onto process exit codes.
enum class ErrorCategory : int {
  invalid_argument = 2,
  parse = 3,
  io = 4,
  config = 5,
  incompatible = 6,
  numeric = 7,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what)
      : Error(ErrorCategory::invalid_argument, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCategory::io, what) {}
};

class IncompatibleError : public Error {
 public:
  explicit IncompatibleError(const std::string& what)
      : Error(ErrorCategory::incompatible, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCategory::config, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error(ErrorCategory::numeric, what) {}
};

// Parse failure at a specific position (token index, byte offset, ...).
class ParseError : public Error {
 public:
  ParseError(std::size_t index, const std::string& what)
      : Error(ErrorCategory::parse,
              what + " (at index " + std::to_string(index) + ")"),
        index_(index) {}

  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

}  // namespace tokensynth
