#pragma once

#include <stdexcept>
#include <string>

namespace spurcl {

// Error categories map onto the CLI exit codes (1 config, 2 IO/format, 3 runtime).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
  ConfigError(const std::string& field_path, const std::string& what)
      : std::runtime_error(field_path + ": " + what), field_path_(field_path) {}
  const std::string& field_path() const noexcept { return field_path_; }

 private:
  std::string field_path_;
};

class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace spurcl
