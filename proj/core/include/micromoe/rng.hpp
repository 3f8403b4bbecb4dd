#pragma once

#include <cstdint>
#include <string_view>

namespace micromoe {

/// 64-bit FNV-1a over a byte string.
std::uint64_t fnv1a64(std::string_view bytes);

/// SplitMix64 output function applied to a raw 64-bit value.
std::uint64_t splitmix64_mix(std::uint64_t z);

/// Counter-based SplitMix64 stream.
///
/// Every source of randomness in the project is a stream derived from one
/// root seed, so a run is fully reproducible from that seed alone. The
/// algorithm is pinned: state advances by the golden-ratio increment
/// 0x9E3779B97F4A7C15 and each output is splitmix64_mix(state).
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();

  /// Uniform double in [0, 1), 53 mantissa bits.
  double next_uniform();

  /// Standard normal via Box-Muller; consumes exactly two draws.
  double next_normal();

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t next_below(std::uint64_t n);

 private:
  std::uint64_t state_;
};

/// Child stream keyed by (root seed, tag, two optional indices). Identical
/// inputs give identical streams; distinct tags or indices give independent
/// streams.
RngStream derive_stream(std::uint64_t root_seed, std::string_view tag,
                        std::uint64_t i0 = 0, std::uint64_t i1 = 0);

}  // namespace micromoe
