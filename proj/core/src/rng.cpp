#include "pgl/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "pgl/common.hpp"

namespace pgl {

namespace {

std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

std::int64_t Rng::uniform_int(std::int64_t n) {
  if (n <= 0) {
    throw Error("Rng::uniform_int: n must be positive");
  }
  const auto un = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::uint64_t(-1) - (std::uint64_t(-1) % un + 1) % un;
  std::uint64_t draw = engine_();
  while (draw > limit) {
    draw = engine_();
  }
  return static_cast<std::int64_t>(draw % un);
}

double Rng::normal() {
  // u1 in (0, 1] so the log stays finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  return radius * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::split(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream));
}

std::string Rng::serialize() const {
  std::ostringstream out;
  out << engine_;
  return out.str();
}

void Rng::deserialize(const std::string& state) {
  std::istringstream in(state);
  in >> engine_;
  if (!in) {
    throw IoError("Rng::deserialize: malformed engine state");
  }
}

}  // namespace pgl
