#pragma once

#include <stdexcept>
#include <string>

namespace ccm {

// Each error kind maps onto one C API status code.

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CorruptionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An operation was understood but its preconditions were not met
/// (duplicate run id, promotion below threshold, mutation of a finished run).
class RefusedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NoModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ccm
