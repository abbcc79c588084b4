#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pw {

// Error taxonomy used across the pipeline. Configuration errors are caller
// mistakes (bad specs, bad keys), shape errors are structural bugs between
// producer and consumer, numeric errors are NaN/Inf escapes, io errors wrap
// file and format failures.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

inline constexpr double kDtComms = 0.1;   // CAM cadence, 10 Hz
inline constexpr double kDtPhysics = 0.01;

}  // namespace pw
