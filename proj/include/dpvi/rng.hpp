#pragma once

#include <cmath>
#include <cstdint>

namespace dpvi {

// Deterministic, platform-independent RNG with cheap stream splitting.
//
// The core sequence is splitmix64 (Steele et al.), which is fully specified by
// 64-bit integer arithmetic, so results are bit-identical across platforms and
// standard libraries. split(k) derives an independent child stream by avalanche
// mixing (current state, k) without advancing the parent; the harness derives
// all per-role streams (data simulation, observation selection, per-fold, SMC
// sweeps, AIS runs) from one master seed this way. Normal variates use a
// hand-rolled Box-Muller transform because std::normal_distribution is
// implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  Rng split(uint64_t stream) const {
    uint64_t z = state_ ^ (0xD1B54A32D192ED03ULL * (stream + 1));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return Rng(z ^ (z >> 31));
  }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on {0, ..., n-1}.
  int uniform_int(int n) {
    int k = int(uniform() * double(n));
    return k >= n ? n - 1 : k;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace dpvi
