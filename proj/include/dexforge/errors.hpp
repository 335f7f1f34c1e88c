#pragma once

#include <stdexcept>
#include <string>

namespace dexforge {

// Base class for every error raised by the toolkit. Subclasses name the
// failure category; callers that only care about "something went wrong"
// catch this one.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ArityError : public Error {
 public:
  using Error::Error;
};

class DegeneracyError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class UnderdeterminedError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class AlignmentError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class SimulationDiverged : public Error {
 public:
  SimulationDiverged(const std::string& what, long frame)
      : Error(what + " (frame " + std::to_string(frame) + ")"), frame_(frame) {}
  long frame() const { return frame_; }

 private:
  long frame_;
};

class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::string last_good_checkpoint)
      : Error(what), checkpoint_(std::move(last_good_checkpoint)) {}
  const std::string& last_good_checkpoint() const { return checkpoint_; }

 private:
  std::string checkpoint_;
};

// Error raised while processing one frame of a sequence; carries the index.
class FrameError : public Error {
 public:
  FrameError(const std::string& what, std::size_t frame)
      : Error("frame " + std::to_string(frame) + ": " + what), frame_(frame) {}
  std::size_t frame() const { return frame_; }

 private:
  std::size_t frame_;
};

}  // namespace dexforge
