#include "fedcp/rng.hpp"

#include <cmath>
#include <numbers>

#include "fedcp/errors.hpp"

namespace fedcp {

namespace {
constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

std::uint64_t mix(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

std::uint64_t hash_tag(std::string_view tag) {
  // FNV-1a, then mixed so short tags spread over the full word
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return mix(h);
}
}  // namespace

std::uint64_t RngStream::next_u64() {
  state_ += kGamma;
  return mix(state_);
}

double RngStream::next_unit() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::next_uniform(double lo, double hi) {
  return lo + (hi - lo) * next_unit();
}

double RngStream::next_normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  // u1 in (0,1] so the log is finite
  double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  double u2 = next_unit();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

double RngStream::next_gamma(double shape) {
  if (!(shape > 0.0)) throw InputError("gamma: shape must be positive");
  if (shape < 1.0) {
    double g = next_gamma(shape + 1.0);
    double u = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    return g * std::pow(u, 1.0 / shape);
  }
  double d = shape - 1.0 / 3.0;
  double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = next_normal();
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    double u = next_unit();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u <= 0.0 || std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

std::uint64_t RngStream::next_below(std::uint64_t n) {
  if (n == 0) throw InputError("next_below: n must be positive");
  std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  for (;;) {
    std::uint64_t r = next_u64();
    if (r < limit) return r % n;
  }
}

RngStream SeedTree::stream(std::string_view tag, std::uint64_t a,
                           std::uint64_t b) const {
  std::uint64_t h = mix(master_ ^ kGamma);
  h = mix(h ^ hash_tag(tag));
  h = mix(h ^ (a + kGamma));
  h = mix(h ^ (b + 2 * kGamma));
  return RngStream(h);
}

}  // namespace fedcp
