#pragma once

#include <stdexcept>
#include <string>

namespace reid {

// Base for every error raised by the library. The CLI maps subclasses onto
// exit codes (ConfigError -> 2, DataError/FormatError -> 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class LabelError : public Error {
 public:
  using Error::Error;
};

class BatchStructureError : public Error {
 public:
  using Error::Error;
};

class CongruenceError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

class ClusteringError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public ClusteringError {
 public:
  using ClusteringError::ClusteringError;
};

class AugmentationError : public Error {
 public:
  using Error::Error;
};

class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace reid
