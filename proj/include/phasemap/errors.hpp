#pragma once

#include <stdexcept>
#include <string>

namespace phasemap {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Mismatched extents in a contraction or reshape.
struct DimensionError : Error {
  using Error::Error;
};

/// Invalid argument outside of shape issues (bad permutation, bad config, ...).
struct ArgumentError : Error {
  using Error::Error;
};

/// Numerical factorization (SVD/eigen) did not converge.
struct DecompositionError : Error {
  using Error::Error;
};

/// Environment contraction produced a degenerate (near-zero) norm.
struct ContractionError : Error {
  using Error::Error;
};

/// A simple-update bond step failed even after a retry.
struct StepError : Error {
  using Error::Error;
};

/// Training diverged (loss became non-finite).
struct TrainingError : Error {
  TrainingError(const std::string& what, int epoch_) : Error(what), epoch(epoch_) {}
  int epoch = -1;
};

struct IoError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace phasemap
