#pragma once

#include <stdexcept>
#include <string>

namespace spot {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A forward op produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Scene / checkpoint decoding failures. `kind` distinguishes the cause so
// callers (and tests) can tell a bad header from a short file.
class FormatError : public Error {
 public:
  enum class Kind { kBadHeader, kTruncated, kCountMismatch, kInvalid, kIo };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace spot
