#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace ketlab::numerics {

uint64_t fnv1a64(std::string_view s);

/// Counter-based splitmix64 stream. Identical seed gives an identical draw
/// sequence on every platform. Substreams are derived from the origin seed
/// and a label, so sibling streams never depend on how many draws the
/// parent has made.
class Rng {
 public:
  explicit Rng(uint64_t seed) : origin_(seed), state_(seed) {}

  uint64_t next_u64();
  double uniform();            // [0, 1)
  double normal();             // standard normal (Box-Muller)
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  uint64_t below(uint64_t n);  // uniform in [0, n), n > 0
  int index(size_t n) { return static_cast<int>(below(n)); }

  Rng substream(std::string_view label) const;

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  template <typename T>
  const T& pick(const std::vector<T>& v) {
    return v[below(v.size())];
  }

  uint64_t origin() const { return origin_; }

 private:
  uint64_t origin_;
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ketlab::numerics
