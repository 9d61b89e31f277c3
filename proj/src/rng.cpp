#include "cdpo/rng.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace cdpo {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

Rng Rng::substream(std::uint64_t root, std::string_view name) {
  // FNV-1a over the stream name, folded with the root seed.
  std::uint64_t h = 14695981039346656037ULL ^ splitmix64(root);
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return Rng(splitmix64(h));
}

double Rng::normal(double mean, double sd) {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  return mean + sd * r * std::cos(6.283185307179586476925286766559 * u2);
}

std::int64_t Rng::index(std::int64_t n) {
  if (n <= 0) throw std::invalid_argument("Rng::index: n must be positive");
  // Multiply-shift map of a 64-bit draw onto [0, n); bias is < 2^-53 for
  // the dataset sizes used here and the mapping is platform-stable.
  const unsigned __int128 wide =
      static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n);
  return static_cast<std::int64_t>(wide >> 64);
}

std::string Rng::state() const {
  std::ostringstream os;
  os << eng_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> eng_;
  if (!is) throw std::invalid_argument("Rng::set_state: malformed state string");
}

}  // namespace cdpo
