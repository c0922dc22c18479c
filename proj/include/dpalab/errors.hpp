#ifndef DPALAB_ERRORS_HPP
#define DPALAB_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace dpalab {

// Base of every error thrown by the library. The CLI maps subclasses onto
// exit codes: ConfigError -> 2, everything else -> 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

class RoutingError : public Error {
 public:
  using Error::Error;
};

class AssignmentError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace dpalab

#endif  // DPALAB_ERRORS_HPP
