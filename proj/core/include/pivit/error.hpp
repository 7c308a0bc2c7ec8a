#pragma once

#include <stdexcept>
#include <string>

namespace pivit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input text (pose files, config documents, binary headers).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, long line = -1)
      : Error(line >= 0 ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

/// Well-formed input that violates a data invariant (bounds, uniqueness).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Shape or width mismatch between cooperating components.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values reached a loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A sample lacks data required by the enabled training modules.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace pivit
