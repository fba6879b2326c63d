#pragma once

#include <stdexcept>
#include <string>

namespace prop {

// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A caller broke an API precondition (non-scalar loss, mismatched parameter sets, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// A value is NaN or infinite where finite input is required.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration: unknown keys, bad ranges, incompatible settings.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// The continual-learning protocol was violated (class overlap, reuse of old data, ...).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Empty class or other missing data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Cosine scoring on a zero-norm vector.
class ZeroNormError : public Error {
 public:
  using Error::Error;
};

// Checked integer arithmetic overflowed.
class OverflowError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace prop
