#pragma once

#include <stdexcept>
#include <string>

namespace lors {

// Error hierarchy. The CLI maps each family onto a distinct exit code.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or out-of-range indices.
struct ShapeError : Error {
  using Error::Error;
};

/// A value outside an operation's mathematical domain (log of <= 0, division by 0, ...).
struct DomainError : Error {
  using Error::Error;
};

/// Misuse of reverse mode: non-scalar seed, or a gradient requested through a constant/mask.
struct GradientError : Error {
  using Error::Error;
};

/// NaN/Inf during training or distillation, or a degenerate configuration at run time.
struct NumericalError : Error {
  using Error::Error;
};

/// Bad magic/version/digest or truncated binary file.
struct FormatError : Error {
  using Error::Error;
};

/// File system failures (missing file, unwritable directory).
struct IoError : Error {
  using Error::Error;
};

/// Invalid or unknown configuration keys and values.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace lors
