// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace fedpisa {

/// Base for every error this library throws.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value (dimensions, rates, malformed config files).
struct ConfigError : Error {
  using Error::Error;
};

/// Dimension disagreement between matrices or vectors.
struct ShapeError : Error {
  using Error::Error;
};

/// Malformed or inconsistent wire message, or a federation contract breach.
struct ProtocolError : Error {
  using Error::Error;
};

/// Missing or empty dataset where training data is required.
struct DataError : Error {
  using Error::Error;
};

/// Learning-rate schedule queried past its final step.
struct ScheduleError : Error {
  using Error::Error;
};

/// Filesystem or serialization failure.
struct IoError : Error {
  using Error::Error;
};

}  // namespace fedpisa
