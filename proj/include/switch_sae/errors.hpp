#pragma once

#include <stdexcept>
#include <string>

namespace ssae {

// Malformed file contents: bad magic, version, dtype, truncated payload.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Files that cannot be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite losses, degenerate decoder columns, failed gradient checks.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Schema violations in run configs: unknown keys, wrong types, bad ranges.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(key + ": " + what), key_(std::move(key)) {}

  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

}  // namespace ssae
