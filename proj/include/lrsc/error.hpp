#pragma once

#include <stdexcept>
#include <string>

namespace lrsc {

// Root of every error the library throws. `exit_code` follows the CLI
// contract: 2 for domain errors, 3 for input/parse errors.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what, int exit_code = 2)
      : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

private:
  int exit_code_;
};

class PreconditionError : public Error {
public:
  explicit PreconditionError(const std::string& what) : Error("precondition: " + what) {}
};

class UnsupportedShapeError : public Error {
public:
  explicit UnsupportedShapeError(const std::string& what) : Error("unsupported shape: " + what) {}
};

class GroupingError : public Error {
public:
  explicit GroupingError(const std::string& what) : Error("grouping: " + what) {}
};

class ReconstructionError : public Error {
public:
  explicit ReconstructionError(const std::string& what) : Error("reconstruction: " + what) {}
};

class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& what) : Error("configuration: " + what) {}
};

class AnalysisError : public Error {
public:
  explicit AnalysisError(const std::string& what) : Error("analysis: " + what) {}
};

// Container parse failures. `kind` distinguishes the failure classes so
// callers and tests can tell them apart without string matching.
class ParseError : public Error {
public:
  enum class Kind { bad_magic, unsupported_version, truncated, duplicate_name, malformed };

  ParseError(Kind kind, const std::string& what) : Error("parse: " + what, 3), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

private:
  Kind kind_;
};

class SchemaError : public Error {
public:
  explicit SchemaError(const std::string& what) : Error("schema: " + what, 3) {}
};

}  // namespace lrsc
