#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>

namespace svg {

// xoshiro256++ seeded through splitmix64. 32 bytes of state, trivially
// serializable, identical output on every platform and compiler.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
  }

  static Rng from_state(const std::array<uint64_t, 4>& st) {
    Rng r(0);
    r.s_ = st;
    return r;
  }

  std::array<uint64_t, 4> state() const { return s_; }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // N(0, 1). Each call consumes exactly two raw draws (Box-Muller, cosine
  // branch), so the stream position is a pure function of the call count.
  double normal() {
    const double u1 =
        (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  void fill_normal(double* dst, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] = normal();
  }

  void fill_uniform(double* dst, size_t n, double lo, double hi) {
    for (size_t i = 0; i < n; ++i) dst[i] = uniform(lo, hi);
  }

  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  std::array<uint64_t, 4> s_;
};

// Every random decision flows from one master seed through an addressed
// stream: seed' = splitmix chain absorbing (kind, a, b). Two streams with
// different addresses are independent; the same address always yields the
// same stream, which is what makes checkpoint-resume and nested best-of-N
// evaluation reproducible.
enum class StreamKind : uint64_t {
  Init = 1,        // parameter initialization
  Batch = 2,       // training batch at step a
  Elbo = 3,        // posterior samples at step a
  Trajectory = 4,  // digit a of sequence b
  Rollout = 5,     // sample b of sequence a
  Synth = 6,       // synthetic digit a
  Probe = 7,
  Misc = 8,
};

inline uint64_t derive_seed(uint64_t master, StreamKind kind, uint64_t a = 0,
                            uint64_t b = 0) {
  uint64_t x = master;
  Rng::splitmix64(x);
  x ^= static_cast<uint64_t>(kind) * 0x9e3779b97f4a7c15ULL;
  Rng::splitmix64(x);
  x ^= a * 0xd1b54a32d192ed03ULL + 0x2545f4914f6cdd1dULL;
  Rng::splitmix64(x);
  x ^= b * 0x8cb92ba72f3d8dd7ULL + 1;
  return Rng::splitmix64(x);
}

inline Rng derive_rng(uint64_t master, StreamKind kind, uint64_t a = 0,
                      uint64_t b = 0) {
  return Rng(derive_seed(master, kind, a, b));
}

}  // namespace svg
