#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>

#include "nudiff/tensor.hpp"

namespace nudiff {

// Counter-based Philox4x32-10 generator. Streams are cheap to derive and
// mutually independent, so every sample index / pipeline role can own one.
class Rng {
 public:
  explicit Rng(uint64_t seed, uint64_t stream = 0) : seed_(seed), stream_(stream) {
    uint64_t k = mix64(seed);
    key_[0] = static_cast<uint32_t>(k);
    key_[1] = static_cast<uint32_t>(k >> 32);
  }

  // Independent generator derived from a role name (e.g. "synth/structure").
  Rng child(std::string_view role) const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : role) h = (h ^ static_cast<uint8_t>(c)) * 0x100000001b3ull;
    return Rng(mix64(seed_ ^ mix64(h)), stream_);
  }

  // Independent generator for a sample index within this stream.
  Rng stream(uint64_t index) const { return Rng(seed_, mix64(stream_ ^ mix64(index + 1))); }

  uint32_t next_u32() {
    if (buf_pos_ == 4) refill();
    return buf_[buf_pos_++];
  }

  uint64_t next_u64() {
    uint64_t lo = next_u32();
    uint64_t hi = next_u32();
    return (hi << 32) | lo;
  }

  // Uniform in [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  int uniform_int(int n) {
    int r = static_cast<int>(uniform() * n);
    return r < n ? r : n - 1;
  }

  // Standard normal via Box-Muller; pairs are cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = (static_cast<double>(next_u32()) + 1.0) * 0x1.0p-32;  // (0,1]
    double u2 = static_cast<double>(next_u32()) * 0x1.0p-32;          // [0,1)
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  void fill_normal(Tensor& t) {
    for (auto& x : t.v) x = normal();
  }

  void fill_uniform(Tensor& t) {
    for (auto& x : t.v) x = uniform();
  }

 private:
  static uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static void mulhilo(uint32_t a, uint32_t b, uint32_t& hi, uint32_t& lo) {
    uint64_t p = static_cast<uint64_t>(a) * b;
    hi = static_cast<uint32_t>(p >> 32);
    lo = static_cast<uint32_t>(p);
  }

  void refill() {
    uint32_t c0 = static_cast<uint32_t>(counter_);
    uint32_t c1 = static_cast<uint32_t>(counter_ >> 32);
    uint32_t c2 = static_cast<uint32_t>(stream_);
    uint32_t c3 = static_cast<uint32_t>(stream_ >> 32);
    uint32_t k0 = key_[0], k1 = key_[1];
    for (int round = 0; round < 10; ++round) {
      uint32_t hi0, lo0, hi1, lo1;
      mulhilo(0xD2511F53u, c0, hi0, lo0);
      mulhilo(0xCD9E8D57u, c2, hi1, lo1);
      uint32_t n0 = hi1 ^ c1 ^ k0;
      uint32_t n1 = lo1;
      uint32_t n2 = hi0 ^ c3 ^ k1;
      uint32_t n3 = lo0;
      c0 = n0; c1 = n1; c2 = n2; c3 = n3;
      k0 += 0x9E3779B9u;
      k1 += 0xBB67AE85u;
    }
    buf_ = {c0, c1, c2, c3};
    buf_pos_ = 0;
    ++counter_;
  }

  uint64_t seed_ = 0;
  uint64_t stream_ = 0;
  std::array<uint32_t, 2> key_{};
  uint64_t counter_ = 0;
  std::array<uint32_t, 4> buf_{};
  int buf_pos_ = 4;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace nudiff
