// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace ks {

// Error categories map onto CLI exit codes: usage/shape/contract/io -> 1,
// numeric -> 2, gradcheck -> 3.
enum class ErrorKind {
  kUsage,
  kShape,
  kContract,
  kNumeric,
  kIo,
  kGradcheck,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string msg)
      : std::runtime_error(std::move(msg)), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

// SplitMix64. Used to derive independent RNG streams from (tag, seed) pairs
// so scene generation, parameter init and eval sets never share a stream.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t tag, uint64_t seed, uint64_t index = 0) {
  uint64_t h = splitmix64(tag ^ 0x243f6a8885a308d3ULL);
  h ^= splitmix64(seed) + 0x9e3779b97f4a7c15ULL * (index + 1);
  return splitmix64(h);
}

// Uniform in [0,1) with the full 53-bit mantissa.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller; hand-rolled because the distribution in
// <random> is implementation-defined and would break golden values.
inline double rand_normal(std::mt19937_64& rng) {
  const double u1 = (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
}

}  // namespace ks
