#pragma once
// Dense 4-D tensor in NCHW row-major order plus the deterministic PRNG that
// every seed in the project flows through. All arithmetic is IEEE-754
// binary64; operations are pure and never reorder floating-point sums, so a
// given seed reproduces bit-identical values run after run.

#include <array>
#include <cassert>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace sepconv {

class Tensor4 {
 public:
  Tensor4() : dims_{0, 0, 0, 0} {}
  Tensor4(int n, int c, int h, int w);
  Tensor4(const Tensor4& o);
  Tensor4& operator=(const Tensor4& o);
  Tensor4(Tensor4&& o) noexcept;
  Tensor4& operator=(Tensor4&& o) noexcept;

  int n() const { return dims_[0]; }
  int c() const { return dims_[1]; }
  int h() const { return dims_[2]; }
  int w() const { return dims_[3]; }
  const std::array<int, 4>& dims() const { return dims_; }
  std::int64_t size() const { return size_; }

  double* data() { return data_.get(); }
  const double* data() const { return data_.get(); }

  std::int64_t index(int in, int ic, int iy, int ix) const {
    assert(in >= 0 && in < dims_[0] && ic >= 0 && ic < dims_[1]);
    assert(iy >= 0 && iy < dims_[2] && ix >= 0 && ix < dims_[3]);
    return ((static_cast<std::int64_t>(in) * dims_[1] + ic) * dims_[2] + iy) * dims_[3] + ix;
  }
  double& at(int in, int ic, int iy, int ix) { return data_[index(in, ic, iy, ix)]; }
  double at(int in, int ic, int iy, int ix) const { return data_[index(in, ic, iy, ix)]; }

  // Pointer to the start of one (n, c) plane; rows of length w() follow.
  double* plane(int in, int ic) { return data_.get() + index4(in, ic); }
  const double* plane(int in, int ic) const { return data_.get() + index4(in, ic); }

  bool same_dims(const Tensor4& o) const { return dims_ == o.dims_; }
  std::string dims_str() const;
  bool all_finite() const;

 private:
  struct Uninit {};
  Tensor4(Uninit, int n, int c, int h, int w);
  friend Tensor4 uninitialized_tensor(int n, int c, int h, int w);

  std::int64_t index4(int in, int ic) const {
    return (static_cast<std::int64_t>(in) * dims_[1] + ic) * static_cast<std::int64_t>(dims_[2]) * dims_[3];
  }
  // Raw storage so construction can skip the zero fill when the caller
  // overwrites every element anyway; see uninitialized_tensor.
  std::array<int, 4> dims_;
  std::int64_t size_ = 0;
  std::unique_ptr<double[]> data_;
};

// Contents are unspecified; callers must write every element before any
// read. Accumulation targets want zeros instead.
Tensor4 uninitialized_tensor(int n, int c, int h, int w);

// SplitMix64 stream; uniforms take the top 53 bits, normals are Box-Muller
// with two uniforms consumed per draw (cosine branch only, no caching), so
// the stream position after k normal draws is always 2k uniforms.
class Prng {
 public:
  explicit Prng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_normal();

  // Uniform integer in [0, bound); bound must be positive.
  int next_index(int bound) {
    assert(bound > 0);
    int v = static_cast<int>(next_uniform() * bound);
    return v < bound ? v : bound - 1;
  }

 private:
  std::uint64_t state_;
};

// One SplitMix64 mixing step; used to derive independent sub-seeds from a
// base seed without correlating the resulting streams.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt);

Tensor4 zeros(int n, int c, int h, int w);
Tensor4 random_normal(Prng& prng, int n, int c, int h, int w, double mean, double stddev);

Tensor4 add(const Tensor4& a, const Tensor4& b);
Tensor4 sub(const Tensor4& a, const Tensor4& b);
Tensor4 mul(const Tensor4& a, const Tensor4& b);
Tensor4 scale(const Tensor4& a, double s);
Tensor4 relu(const Tensor4& a);

double sum(const Tensor4& x);
double mean(const Tensor4& x);
// (n, c, h, w) -> (n, c, 1, 1), spatial mean per channel.
Tensor4 global_avg_pool(const Tensor4& x);
// (n, c, h, w) -> (n, 1, h, w); value = index of the per-site channel maximum
// (first maximum wins on ties).
Tensor4 argmax_over_channels(const Tensor4& x);

}  // namespace sepconv
