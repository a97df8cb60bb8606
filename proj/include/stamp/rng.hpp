#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace stamp {

// Deterministic xoshiro256++ generator with explicit uniform/normal
// transforms. std::<distribution> output is implementation-defined, which
// would break the "identical seeds -> identical checksums" contract across
// toolchains, so the transforms are spelled out here.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    // splitmix64 seeding
    uint64_t x = seed;
    for (auto& s : state_) {
      x += 0x9e3779b97f4a7c15ull;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
      s = z ^ (z >> 31);
    }
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // uniform in the open interval (0,1)
  double u01() {
    double v = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    if (v <= 0.0) v = 0x1.0p-53;
    return v;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u = u01();
    const double v = u01();
    const double r = std::sqrt(-2.0 * std::log(u));
    const double a = 6.283185307179586476925286766559 * v;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // integer in [0, n)
  int64_t index(int64_t n) {
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = index(i + 1);
      std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(j)]);
    }
  }

  // Independent stream derived from this seed and a label; used to give each
  // task/noise source its own deterministic stream.
  static uint64_t derive(uint64_t seed, uint64_t label) {
    uint64_t z = seed ^ (0x9e3779b97f4a7c15ull + (label << 1));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t state_[4];
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace stamp
