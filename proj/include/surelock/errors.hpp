#pragma once

#include <stdexcept>
#include <string>

namespace surelock {

// Base of every error raised by the library. The CLI maps subclasses to
// exit codes (config-type errors -> 2, state/consistency errors -> 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class EmptySet : public Error {
 public:
  using Error::Error;
};

class InvalidConfig : public Error {
 public:
  using Error::Error;
};

class InvalidState : public Error {
 public:
  using Error::Error;
};

class StateCorruption : public Error {
 public:
  using Error::Error;
};

class NoWork : public Error {
 public:
  using Error::Error;
};

class UndefinedEstimate : public Error {
 public:
  using Error::Error;
};

class InternalConsistency : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace surelock
