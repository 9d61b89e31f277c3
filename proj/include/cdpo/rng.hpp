#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace cdpo {

// Deterministic RNG wrapper. All randomness in the project flows from one
// root seed through named substreams so individual components can be
// reproduced in isolation. Distributions are hand-rolled on top of
// mt19937_64 because the standard library does not guarantee identical
// <random> distribution output across implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Independent stream derived from (root, name); stable across platforms.
  static Rng substream(std::uint64_t root, std::string_view name);

  std::uint64_t next_u64() { return eng_(); }

  // [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller without spare caching (keeps the stream position a pure
  // function of the call count).
  double normal(double mean = 0.0, double sd = 1.0);

  // Uniform integer in [0, n), n > 0.
  std::int64_t index(std::int64_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(index(static_cast<std::int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 eng_;
};

}  // namespace cdpo
