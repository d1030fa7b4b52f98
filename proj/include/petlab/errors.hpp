#pragma once

#include <stdexcept>
#include <string>

namespace petlab {

// Every failure raised by the library derives from Error so the CLI can map
// it to an exit code in one place.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration (model, method, hook sites, tasks).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A trainable-parameter budget that cannot be hosted.
class BudgetError : public Error {
 public:
  using Error::Error;
};

// API misuse: non-scalar loss, empty batch, registering frozen tensors.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Out-of-range index (attention head, block).
class IndexError : public Error {
 public:
  using Error::Error;
};

// Bad model input such as an out-of-vocabulary token.
class InputError : public Error {
 public:
  using Error::Error;
};

// Non-finite values during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Gradient checking found a function that is not deterministic.
class DiagnosticError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Synthetic task generation could not satisfy its constraints.
class GenerationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace petlab
