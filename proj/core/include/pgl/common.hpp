#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace pgl {

using Ivec3 = std::array<std::int64_t, 3>;
using Dvec3 = std::array<double, 3>;
using Bvec3 = std::array<bool, 3>;

inline constexpr const char* kAxisNames[3] = {"depth", "height", "width"};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shape or dimension mismatch; the message names the offending axis.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable file (volume, manifest, checkpoint).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value, unknown key, or bad command usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value where the computation requires finite inputs.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace pgl
