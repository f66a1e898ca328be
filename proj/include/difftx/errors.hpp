#pragma once

#include <stdexcept>
#include <string>

namespace difftx {

/// Bad argument or configuration value. Maps to CLI exit status 2.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A data structure failed its invariant check (e.g. unnormalized rows).
class InvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Sequence/feature shapes do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EncodingError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Loss or gradient went non-finite during training.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint/IO problems. `kind` distinguishes the failure for callers.
class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kIo, kVersion, kShape, kTruncated, kFormat };
  CheckpointError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace difftx
