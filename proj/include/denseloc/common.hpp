#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace denseloc {

// Error taxonomy used across the library. The CLI maps these onto exit
// codes: ConfigError/IoError -> 2, NumericalError -> 3.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

inline constexpr int kImageAlign = 32;  // input dims must be multiples of this

}  // namespace denseloc
