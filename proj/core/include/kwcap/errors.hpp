#pragma once

#include <stdexcept>
#include <string>

namespace kwcap {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Token id outside the vocabulary.
class VocabularyError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration value or unknown key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or missing input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Violated precondition of an API call.
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace kwcap
