#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace serann {

/// Seeded pseudo-random source with a platform-independent draw sequence.
///
/// Backed by std::mt19937_64, whose output sequence is fixed by the C++
/// standard. Distributions are implemented here rather than taken from
/// <random> because the standard library distributions are not required to
/// produce identical values across implementations.
class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "mt19937_64/v1";

  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller.
  double normal();

  /// Uniform integer in [0, n). Requires n > 0.
  std::size_t below(std::size_t n);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

  /// Independent stream derived from this generator's seed and a label.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// splitmix64 finaliser; used to derive seeds from (seed, key) pairs.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key);

/// 64-bit FNV-1a of a string, for keying deterministic draws by identifier.
std::uint64_t fnv1a(std::string_view text);

}  // namespace serann
