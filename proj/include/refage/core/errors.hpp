#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace refage {

class DatasetError : public std::runtime_error {
 public:
  enum class Kind {
    kMissingFile,
    kSizeMismatch,
    kNonFinite,
    kUnknownVersion,
    kInvariantViolation,
    kParse,
    kIo,
  };

  DatasetError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Raised for non-finite values or failed factorizations.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for malformed configuration; `pointer` is a JSON pointer to the key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string pointer, const std::string& what)
      : std::runtime_error(pointer + ": " + what), pointer_(std::move(pointer)) {}
  const std::string& pointer() const { return pointer_; }

 private:
  std::string pointer_;
};

}  // namespace refage
