#include "sepconv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace sepconv {

namespace {

void check_extent(int e, const char* what) {
  if (e < 0) throw std::invalid_argument(std::string("negative tensor extent for ") + what);
}

void check_same_dims(const Tensor4& a, const Tensor4& b, const char* op) {
  if (!a.same_dims(b)) {
    throw std::invalid_argument(std::string("elementwise ") + op + ": dims " + a.dims_str() +
                                " vs " + b.dims_str());
  }
}

}  // namespace

Tensor4::Tensor4(Uninit, int n, int c, int h, int w) : dims_{n, c, h, w} {
  check_extent(n, "n");
  check_extent(c, "c");
  check_extent(h, "h");
  check_extent(w, "w");
  size_ = static_cast<std::int64_t>(n) * c * h * w;
  data_ = std::make_unique_for_overwrite<double[]>(static_cast<std::size_t>(size_));
}

Tensor4::Tensor4(int n, int c, int h, int w) : Tensor4(Uninit{}, n, c, h, w) {
  std::fill_n(data_.get(), size_, 0.0);
}

Tensor4::Tensor4(const Tensor4& o) : dims_(o.dims_), size_(o.size_) {
  if (size_ > 0) {
    data_ = std::make_unique_for_overwrite<double[]>(static_cast<std::size_t>(size_));
    std::copy_n(o.data_.get(), size_, data_.get());
  }
}

Tensor4& Tensor4::operator=(const Tensor4& o) {
  if (this == &o) return *this;
  if (size_ != o.size_) {
    data_ = o.size_ > 0
                ? std::make_unique_for_overwrite<double[]>(static_cast<std::size_t>(o.size_))
                : nullptr;
  }
  dims_ = o.dims_;
  size_ = o.size_;
  if (size_ > 0) std::copy_n(o.data_.get(), size_, data_.get());
  return *this;
}

Tensor4::Tensor4(Tensor4&& o) noexcept
    : dims_(o.dims_), size_(o.size_), data_(std::move(o.data_)) {
  o.dims_ = {0, 0, 0, 0};
  o.size_ = 0;
}

Tensor4& Tensor4::operator=(Tensor4&& o) noexcept {
  if (this == &o) return *this;
  dims_ = o.dims_;
  size_ = o.size_;
  data_ = std::move(o.data_);
  o.dims_ = {0, 0, 0, 0};
  o.size_ = 0;
  return *this;
}

Tensor4 uninitialized_tensor(int n, int c, int h, int w) {
  return Tensor4(Tensor4::Uninit{}, n, c, h, w);
}

std::string Tensor4::dims_str() const {
  return "(" + std::to_string(dims_[0]) + "," + std::to_string(dims_[1]) + "," +
         std::to_string(dims_[2]) + "," + std::to_string(dims_[3]) + ")";
}

bool Tensor4::all_finite() const {
  for (std::int64_t i = 0; i < size_; ++i) {
    if (!std::isfinite(data_[i])) return false;
  }
  return true;
}

double Prng::next_normal() {
  // 1 - u keeps the log argument in (0, 1]; r is at most ~8.57.
  double u1 = next_uniform();
  double u2 = next_uniform();
  double r = std::sqrt(-2.0 * std::log(1.0 - u1));
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
  Prng p(base ^ (salt * 0x9E3779B97F4A7C15ull));
  return p.next_u64();
}

Tensor4 zeros(int n, int c, int h, int w) { return Tensor4(n, c, h, w); }

Tensor4 random_normal(Prng& prng, int n, int c, int h, int w, double mean, double stddev) {
  if (stddev < 0.0) throw std::invalid_argument("random_normal: stddev must be >= 0");
  Tensor4 out = uninitialized_tensor(n, c, h, w);
  double* p = out.data();
  const std::int64_t sz = out.size();
  for (std::int64_t i = 0; i < sz; ++i) p[i] = mean + stddev * prng.next_normal();
  return out;
}

Tensor4 add(const Tensor4& a, const Tensor4& b) {
  check_same_dims(a, b, "add");
  Tensor4 out = uninitialized_tensor(a.n(), a.c(), a.h(), a.w());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::int64_t sz = a.size();
  for (std::int64_t i = 0; i < sz; ++i) po[i] = pa[i] + pb[i];
  return out;
}

Tensor4 sub(const Tensor4& a, const Tensor4& b) {
  check_same_dims(a, b, "sub");
  Tensor4 out = uninitialized_tensor(a.n(), a.c(), a.h(), a.w());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::int64_t sz = a.size();
  for (std::int64_t i = 0; i < sz; ++i) po[i] = pa[i] - pb[i];
  return out;
}

Tensor4 mul(const Tensor4& a, const Tensor4& b) {
  check_same_dims(a, b, "mul");
  Tensor4 out = uninitialized_tensor(a.n(), a.c(), a.h(), a.w());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::int64_t sz = a.size();
  for (std::int64_t i = 0; i < sz; ++i) po[i] = pa[i] * pb[i];
  return out;
}

Tensor4 scale(const Tensor4& a, double s) {
  Tensor4 out = uninitialized_tensor(a.n(), a.c(), a.h(), a.w());
  const double* pa = a.data();
  double* po = out.data();
  const std::int64_t sz = a.size();
  for (std::int64_t i = 0; i < sz; ++i) po[i] = pa[i] * s;
  return out;
}

Tensor4 relu(const Tensor4& a) {
  Tensor4 out = uninitialized_tensor(a.n(), a.c(), a.h(), a.w());
  const double* pa = a.data();
  double* po = out.data();
  const std::int64_t sz = a.size();
  for (std::int64_t i = 0; i < sz; ++i) po[i] = pa[i] > 0.0 ? pa[i] : 0.0;
  return out;
}

double sum(const Tensor4& x) {
  // Flat-index order; re-running on the same tensor is bit-stable.
  double acc = 0.0;
  const double* p = x.data();
  const std::int64_t sz = x.size();
  for (std::int64_t i = 0; i < sz; ++i) acc += p[i];
  return acc;
}

double mean(const Tensor4& x) {
  if (x.size() == 0) throw std::invalid_argument("mean: empty tensor");
  return sum(x) / static_cast<double>(x.size());
}

Tensor4 global_avg_pool(const Tensor4& x) {
  if (x.h() * x.w() == 0) throw std::invalid_argument("global_avg_pool: empty spatial extent");
  Tensor4 out = uninitialized_tensor(x.n(), x.c(), 1, 1);
  const double inv = 1.0 / (static_cast<double>(x.h()) * x.w());
  for (int in = 0; in < x.n(); ++in) {
    for (int ic = 0; ic < x.c(); ++ic) {
      const double* p = x.plane(in, ic);
      double acc = 0.0;
      const int hw = x.h() * x.w();
      for (int i = 0; i < hw; ++i) acc += p[i];
      out.at(in, ic, 0, 0) = acc * inv;
    }
  }
  return out;
}

Tensor4 argmax_over_channels(const Tensor4& x) {
  if (x.size() == 0 || x.c() == 0) throw std::invalid_argument("argmax_over_channels: empty tensor");
  Tensor4 out = uninitialized_tensor(x.n(), 1, x.h(), x.w());
  for (int in = 0; in < x.n(); ++in) {
    for (int iy = 0; iy < x.h(); ++iy) {
      for (int ix = 0; ix < x.w(); ++ix) {
        int best = 0;
        double best_v = x.at(in, 0, iy, ix);
        for (int ic = 1; ic < x.c(); ++ic) {
          double v = x.at(in, ic, iy, ix);
          if (v > best_v) {
            best_v = v;
            best = ic;
          }
        }
        out.at(in, 0, iy, ix) = static_cast<double>(best);
      }
    }
  }
  return out;
}

}  // namespace sepconv
