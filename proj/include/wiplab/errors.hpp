#pragma once

#include <stdexcept>
#include <string>

namespace wiplab {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SingularMass : public Error {
 public:
  using Error::Error;
};

// Integration produced NaN/Inf; the episode must be terminated.
class NonFiniteState : public Error {
 public:
  using Error::Error;
};

class EpisodeFinished : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class LengthMismatch : public Error {
 public:
  using Error::Error;
};

class NonFiniteLoss : public Error {
 public:
  using Error::Error;
};

class MissingTeacher : public Error {
 public:
  using Error::Error;
};

class NoConvergence : public Error {
 public:
  using Error::Error;
};

class ZeroVector : public Error {
 public:
  using Error::Error;
};

class EmptyCache : public Error {
 public:
  using Error::Error;
};

class NoMatch : public Error {
 public:
  using Error::Error;
};

class ClientTimeout : public Error {
 public:
  using Error::Error;
};

class ClientError : public Error {
 public:
  ClientError(int status, const std::string& what)
      : Error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

class SchemaViolation : public Error {
 public:
  using Error::Error;
};

class TooFewSamples : public Error {
 public:
  using Error::Error;
};

class CheckpointLoad : public Error {
 public:
  using Error::Error;
};

class NoSuccessfulEpisodes : public Error {
 public:
  using Error::Error;
};

// Bad or unknown configuration; the CLI maps this to exit code 2.
class ConfigInvalid : public Error {
 public:
  using Error::Error;
};

}  // namespace wiplab
