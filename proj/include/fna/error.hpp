#pragma once

#include <stdexcept>
#include <string>

namespace fna {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class RemapError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Raised when a loss or statistic becomes NaN/Inf.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Argument outside an operation's domain (e.g. a non-positive cost).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Rejection sampling gave up before filling its quota.
class SamplingError : public Error {
 public:
  using Error::Error;
};

}  // namespace fna
