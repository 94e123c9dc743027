#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace fracseg {

// Error taxonomy mirrored by the CLI exit codes.
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ShapeError : DataError {
  explicit ShapeError(const std::string& msg) : DataError(msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline int64_t product(const std::vector<int>& extents) {
  int64_t n = 1;
  for (int e : extents) n *= e;
  return n;
}

using Rng = std::mt19937_64;

inline float uniform(Rng& rng, float lo, float hi) {
  return lo + (hi - lo) * static_cast<float>(std::generate_canonical<double, 53>(rng));
}

inline float gaussian(Rng& rng, float mean, float sigma) {
  // Box-Muller, single draw; avoids std::normal_distribution's internal cache
  // so consumption from the engine is one-call-two-words deterministic.
  double u1 = std::max(1e-12, std::generate_canonical<double, 53>(rng));
  double u2 = std::generate_canonical<double, 53>(rng);
  return mean + sigma * static_cast<float>(std::sqrt(-2.0 * std::log(u1)) *
                                           std::cos(2.0 * 3.14159265358979323846 * u2));
}

inline int64_t uniform_index(Rng& rng, int64_t n) {
  return static_cast<int64_t>(std::generate_canonical<double, 53>(rng) * static_cast<double>(n)) % n;
}

}  // namespace fracseg
