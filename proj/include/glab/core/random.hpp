// Copyright 2026 The GLAB Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace glab {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Stateless uniform in [0, 1) keyed by (seed, counter, index).
inline double counter_uniform(uint64_t seed, uint64_t counter, uint64_t index) {
  const uint64_t h = splitmix64(splitmix64(seed ^ splitmix64(counter)) + index);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// Seeded generator with serialisable state.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : eng_(seed) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(eng_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(eng_);
  }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(eng_);
  }
  uint64_t next() { return eng_(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    // Fisher-Yates with our own index draw so results do not depend on the
    // standard library's shuffle implementation.
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

  std::string state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }
  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace glab
