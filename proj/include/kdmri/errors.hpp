#pragma once

#include <stdexcept>
#include <string>

namespace kdmri {

// Error taxonomy used across the library. The CLI maps these onto process
// exit codes (see tools/kdmri.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed runtime inputs: empty grids, shape mismatches, non-finite data.
class InvalidInputError : public Error {
 public:
  using Error::Error;
};

// Inconsistent or out-of-range configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Inputs for which the requested quantity is mathematically undefined
// (zero-norm attention map, all-zero paired differences, ...).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Dataset / file-format problems.
class DataError : public Error {
 public:
  using Error::Error;
};

// Optimization diverged (non-finite loss). Carries the epoch index.
class TrainingFailureError : public Error {
 public:
  TrainingFailureError(const std::string& what, int epoch)
      : Error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

}  // namespace kdmri
