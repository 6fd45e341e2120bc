#pragma once
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace convmem {

// splitmix64 finalizer; used to derive independent seed streams so that
// e.g. (seed, conv_id, epoch) always maps to the same shuffle regardless
// of what ran before.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ull + b * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

// mt19937_64 with hand-rolled distributions. The std:: distributions are
// implementation-defined, so drawing raw bits and shaping them ourselves is
// what keeps "same seed -> same corpus/model" true across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t bits() { return eng_(); }

  // [0, 1)
  double uniform() { return double(bits() >> 11) * 0x1.0p-53; }

  // [0, n)
  size_t below(size_t n) { return size_t(bits() % n); }

  int range(int lo, int hi) { return lo + int(below(size_t(hi - lo + 1))); }

  bool chance(double p) { return uniform() < p; }

  // Marsaglia polar method.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    have_spare_ = true;
    return mean + stddev * u * m;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  template <class T>
  const T& pick(const std::vector<T>& v) {
    return v[below(v.size())];
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace convmem
