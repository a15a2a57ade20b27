#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace bucketserve {

// Invalid user-supplied configuration. `field` names the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// A formula or data-structure precondition was violated.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed trace input. `line` is 1-based.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Simulator bug: invariant breach or event ordering violation.
class InternalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace bucketserve
