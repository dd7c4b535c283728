#pragma once

#include <stdexcept>
#include <string>

namespace dipt {

// Exception hierarchy. The CLI maps these onto exit codes:
// usage/config -> 1, data -> 2, numeric -> 3.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : Error(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  explicit ParseError(const std::string& what) : Error(what) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_ = 0;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

/// Raised by forest extraction when an infected non-seed has no eligible parent.
class OrphanError : public Error {
 public:
  OrphanError(std::size_t node, const std::string& what) : Error(what), node_(node) {}
  std::size_t node() const { return node_; }

 private:
  std::size_t node_;
};

}  // namespace dipt
