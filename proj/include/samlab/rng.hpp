#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

namespace samlab {

/// Counter-based splittable generator (splitmix64 finalizer over key + counter).
/// State is two u64 words, so it serializes into checkpoints and replays exactly.
class Rng {
 public:
  explicit Rng(uint64_t seed) : key_(mix(seed ^ 0x9E3779B97F4A7C15ull)) {}

  static Rng from_state(uint64_t key, uint64_t counter) {
    Rng r(0);
    r.key_ = key;
    r.ctr_ = counter;
    return r;
  }

  uint64_t next_u64() {
    ctr_ += 0x9E3779B97F4A7C15ull;
    return mix(key_ ^ ctr_);
  }

  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller, cos branch only. No cached spare, so the state stays two words.
  double normal() {
    double u1 = 1.0 - uniform01();
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Derive an independent stream; the parent state is not advanced.
  Rng split(uint64_t stream) const {
    Rng child(0);
    child.key_ = mix(key_ + 0xD1B54A32D192ED03ull * (stream + 1));
    child.ctr_ = 0;
    return child;
  }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return ctr_; }

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  uint64_t key_ = 0;
  uint64_t ctr_ = 0;
};

}  // namespace samlab
