#pragma once

#include <stdexcept>
#include <string>

namespace mfi {

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform for a kernel.
class ShapeError : public Error {
  public:
    using Error::Error;
};

/// Misuse of the reverse-mode tape (non-scalar loss, double backward).
class TapeError : public Error {
  public:
    using Error::Error;
};

/// A kernel was asked to run in a differentiation mode it does not implement.
class UnsupportedKernel : public Error {
  public:
    explicit UnsupportedKernel(const std::string& kernel)
        : Error("kernel '" + kernel + "' has no forward-mode (dual) rule"), kernel_(kernel) {}
    const std::string& kernel() const { return kernel_; }

  private:
    std::string kernel_;
};

/// Non-finite values in a loss, gradient or directional derivative.
class NumericalError : public Error {
  public:
    using Error::Error;
};

/// Invalid run configuration or command-line usage.
class ConfigError : public Error {
  public:
    using Error::Error;
};

class FormatError : public Error {
  public:
    using Error::Error;
};

class TruncationError : public FormatError {
  public:
    using FormatError::FormatError;
};

class DigestError : public FormatError {
  public:
    using FormatError::FormatError;
};

class VersionError : public FormatError {
  public:
    using FormatError::FormatError;
};

class KindError : public FormatError {
  public:
    using FormatError::FormatError;
};

class CorruptionError : public FormatError {
  public:
    using FormatError::FormatError;
};

}  // namespace mfi
