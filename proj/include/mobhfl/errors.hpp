#pragma once

#include <stdexcept>
#include <string>

namespace mobhfl {

// Base for every error raised by the library. Subclasses map onto the CLI
// exit-code contract (see harness/commands.hpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class InfeasiblePartition : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class UnsupportedModel : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

class InvariantError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  DivergenceError(int vehicle, long iteration)
      : Error("non-finite parameters at vehicle " + std::to_string(vehicle) +
              ", iteration " + std::to_string(iteration)),
        vehicle_(vehicle),
        iteration_(iteration) {}

  int vehicle() const noexcept { return vehicle_; }
  long iteration() const noexcept { return iteration_; }

 private:
  int vehicle_;
  long iteration_;
};

}  // namespace mobhfl
