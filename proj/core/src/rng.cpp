#include "camid/rng.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace camid {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  // FNV-1a over the tag, then mixed with the master seed through splitmix64.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t state = seed ^ h;
  return splitmix64(state);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t state = seed;
  std::uint64_t s1 = splitmix64(state);
  state = s1 ^ (a * 0x9e3779b97f4a7c15ULL + 0x1234567);
  std::uint64_t s2 = splitmix64(state);
  state = s2 ^ (b * 0xbf58476d1ce4e5b9ULL + 0x89abcde);
  return splitmix64(state);
}

std::uint64_t Rng::uniform_below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::uniform_below: n must be > 0");
  // Classic rejection: draw until below the largest multiple of n.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1, u2;
  do {
    u1 = uniform01();
  } while (u1 <= 0.0);
  u2 = uniform01();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

double Rng::truncated_normal(double stddev) {
  for (;;) {
    const double x = normal();
    if (std::fabs(x) <= 2.0) return x * stddev;
  }
}

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  std::string s = os.str();
  if (have_spare_) {
    std::ostringstream extra;
    extra << " S " << std::hexfloat << spare_;
    s += extra.str();
  }
  return s;
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> engine_;
  if (is.fail()) throw std::runtime_error("Rng::set_state: malformed state string");
  std::string marker;
  if (is >> marker && marker == "S") {
    is >> std::hexfloat >> spare_;
    have_spare_ = true;
  } else {
    have_spare_ = false;
  }
}

}  // namespace camid
