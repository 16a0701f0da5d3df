#pragma once

#include <stdexcept>
#include <string>

namespace latentcsi {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value, range, or configuration was rejected.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Tensor or vector dimensions did not match what an operation expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content. `line()` is 1-based, 0 when not line-oriented.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Missing file, short read, or failed write.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A numerical routine failed or met an input outside its domain.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A training loss became non-finite.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, int epoch, int batch)
      : Error(what), epoch_(epoch), batch_(batch) {}
  int epoch() const noexcept { return epoch_; }
  int batch() const noexcept { return batch_; }

 private:
  int epoch_;
  int batch_;
};

}  // namespace latentcsi
