#pragma once

#include <stdexcept>
#include <string>

namespace impervia {

/// Base class for every error raised by the library. `kind()` is a short
/// machine-parsable tag that the CLI prints in its one-line diagnostics.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error("format", w) {}
};
struct SchemaError : Error {
  explicit SchemaError(const std::string& w) : Error("schema", w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error("io", w) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error("shape", w) {}
};
struct KindError : Error {
  explicit KindError(const std::string& w) : Error("kind", w) {}
};
struct RangeError : Error {
  explicit RangeError(const std::string& w) : Error("range", w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& w) : Error("numeric", w) {}
};

}  // namespace impervia
