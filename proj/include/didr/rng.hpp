#pragma once

// Counter-based random streams. A stream is identified by a key built from
// (seed, stage, step, sample, chain); draws are pure functions of (key, counter),
// so evaluation order never changes the numbers a given sample sees.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace didr {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t mix_key(std::uint64_t key, std::uint64_t field) noexcept {
  return splitmix64(key ^ splitmix64(field + 0x632BE59BD9B4E019ULL));
}

/// Stage tags used as the second key component.
enum class Stage : std::uint64_t {
  kInit = 1,
  kReference = 2,
  kDistill = 3,
  kTeacher = 4,
  kGenerator = 5,
  kProxy = 6,
  kEval = 7,
  kTest = 8,
};

struct StreamKey {
  std::uint64_t value = 0;

  static constexpr StreamKey make(std::uint64_t seed, Stage stage, std::uint64_t step = 0,
                                  std::uint64_t sample = 0, std::uint64_t chain = 0) noexcept {
    std::uint64_t k = splitmix64(seed);
    k = mix_key(k, static_cast<std::uint64_t>(stage));
    k = mix_key(k, step);
    k = mix_key(k, sample);
    k = mix_key(k, chain);
    return StreamKey{k};
  }

  constexpr StreamKey child(std::uint64_t field) const noexcept { return StreamKey{mix_key(value, field)}; }
};

/// Sequential view over a counter-based stream.
class CounterRng {
 public:
  explicit constexpr CounterRng(StreamKey key) noexcept : key_(key.value) {}

  std::uint64_t next_u64() noexcept { return splitmix64(key_ ^ splitmix64(counter_++)); }

  /// Uniform in the open interval (0, 1).
  double uniform() noexcept { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Box-Muller; both variates of a pair are used.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace didr
