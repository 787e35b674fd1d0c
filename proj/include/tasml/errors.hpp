#pragma once

#include <stdexcept>
#include <string>

namespace tasml {

// Base for every failure raised by the library. The CLI maps ConfigInvalid
// to exit code 2 and everything else to 1.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class DimensionMismatch : public Error {
public:
  using Error::Error;
};

class NotPositiveDefinite : public Error {
public:
  using Error::Error;
};

class NonFiniteValue : public Error {
public:
  using Error::Error;
};

class EmptyDataset : public Error {
public:
  using Error::Error;
};

class ConfigInvalid : public Error {
public:
  ConfigInvalid(std::string field, const std::string& what)
      : Error("invalid config field '" + field + "': " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

private:
  std::string field_;
};

class FileMalformed : public Error {
public:
  using Error::Error;
};

class InsufficientClasses : public Error {
public:
  using Error::Error;
};

class InsufficientExamplesPerClass : public Error {
public:
  using Error::Error;
};

} // namespace tasml
