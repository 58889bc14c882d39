#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace gcq {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TokenizeError : public Error {
 public:
  TokenizeError(std::size_t position, char ch)
      : Error("unknown character '" + std::string(1, ch) + "' at position " +
              std::to_string(position)),
        position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

class TokenRangeError : public Error {
 public:
  using Error::Error;
};

/// Raised for malformed requests or responses; `code` is the wire error code.
class ProtocolError : public Error {
 public:
  ProtocolError(std::string code, const std::string& message)
      : Error(code + ": " + message), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class TransportError : public Error {
 public:
  using Error::Error;
};

class BudgetExceeded : public Error {
 public:
  using Error::Error;
};

class UnreachableToken : public Error {
 public:
  using Error::Error;
};

class DegenerateProbability : public Error {
 public:
  using Error::Error;
};

class EmptyBuffer : public Error {
 public:
  EmptyBuffer() : Error("candidate buffer is empty") {}
};

class EmptyInput : public Error {
 public:
  using Error::Error;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace gcq
