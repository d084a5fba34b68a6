// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace stproph {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyper-parameters or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data is unusable (parse failures, too few observations, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or a numerically invalid argument (e.g. nonpositive variance).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace stproph
