#pragma once

#include <stdexcept>
#include <string>

namespace mpq {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible shapes or dimensions.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Precondition on values violated (non-normalized targets, empty dataset...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Malformed file content. Message names the offending field or offset.
class ParseError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

// A required input file does not exist or cannot be opened.
class MissingInputError : public Error {
 public:
  MissingInputError(const std::string& artifact, const std::string& path)
      : Error("missing input " + artifact + ": " + path), artifact_(artifact), path_(path) {}
  const std::string& artifact() const noexcept { return artifact_; }
  const std::string& path() const noexcept { return path_; }

 private:
  std::string artifact_;
  std::string path_;
};

// Invalid experiment configuration. Message starts with the field path.
class ConfigError : public ValidationError {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : ValidationError(field + ": " + what), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace mpq
