// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mmdlab {

/// Caller broke a precondition (shape mismatch, out-of-range timestep, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid user-facing configuration. The CLI maps this to exit status 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A checkpointed segment produced different values when recomputed.
class NondeterminismError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training loop aborted; carries the iteration and the offending loss.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, long iteration, double loss)
      : std::runtime_error(what), iteration_(iteration), loss_(loss) {}
  long iteration() const noexcept { return iteration_; }
  double loss() const noexcept { return loss_; }

 private:
  long iteration_;
  double loss_;
};

class EstimatorUndefined : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Checkpoint loading failures, one type per cause.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public LoadError {
 public:
  using LoadError::LoadError;
};
class VersionError : public LoadError {
 public:
  using LoadError::LoadError;
};
class LengthMismatchError : public LoadError {
 public:
  using LoadError::LoadError;
};

namespace detail {
inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractViolation(msg);
}
inline void require_config(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}
}  // namespace detail

}  // namespace mmdlab
