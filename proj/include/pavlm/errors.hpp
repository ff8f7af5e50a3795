#pragma once

#include <stdexcept>
#include <string>

namespace pavlm {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Input geometry that cannot be processed (e.g. all points identical).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents: bad magic, truncated payload, missing fields.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ConfigMismatchError : public Error {
 public:
  using Error::Error;
};

// Network / remote text-generation failures after retries are exhausted.
class ServiceError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace pavlm
