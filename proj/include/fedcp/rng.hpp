#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace fedcp {

// Counter-based pseudo-random stream (splitmix64). State advances by a fixed
// odd constant and the output is a finalizer hash of the state, so a stream is
// fully determined by its 64-bit key. All distributions below are implemented
// here rather than with <random> adaptors because libstdc++ leaves
// uniform_real/normal unspecified; this keeps runs bit-reproducible.
class RngStream {
 public:
  explicit RngStream(std::uint64_t key) : state_(key) {}

  std::uint64_t next_u64();
  // Uniform on [0,1) with 53 random bits.
  double next_unit();
  double next_uniform(double lo, double hi);
  // Standard normal via Box-Muller; the spare draw is cached.
  double next_normal();
  // Gamma(shape, 1) via Marsaglia-Tsang squeeze (boosted for shape < 1).
  double next_gamma(double shape);
  // Unbiased integer in [0, n) by rejection.
  std::uint64_t next_below(std::uint64_t n);

  // In-place Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Splittable seed derivation. Every consumer of randomness gets its own
// stream keyed by (master, tag, a, b):
//
//   tag "synth"              dataset generation
//   tag "partition"          partition draws (a = redraw attempt)
//   tag "split"              train/test shuffles
//   tag "init"               parameter initialization
//   tag "round"     a=t      client sampling for round t
//   tag "train"     a=t b=i  client i's local epochs in round t
//   tag "cpn_input" b=i      client i's frozen policy-input vector
//
// Streams for distinct (tag, a, b) never overlap in practice: keys are
// produced by chaining the splitmix finalizer over the components.
class SeedTree {
 public:
  explicit SeedTree(std::uint64_t master) : master_(master) {}

  std::uint64_t master() const { return master_; }
  RngStream stream(std::string_view tag, std::uint64_t a = 0,
                   std::uint64_t b = 0) const;

 private:
  std::uint64_t master_;
};

}  // namespace fedcp
