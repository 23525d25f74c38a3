#include "sepconv/conv.hpp"

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sepconv {

namespace {

// First output index whose input index oy*stride + k_off - pad is >= 0.
inline int range_lo(int k_off, int pad, int stride) {
  int a = pad - k_off;
  return a <= 0 ? 0 : (a + stride - 1) / stride;
}

// Last output index whose input index stays below in_extent.
inline int range_hi(int k_off, int pad, int stride, int in_extent, int out_extent) {
  int a = in_extent - 1 + pad - k_off;
  if (a < 0) return -1;
  int v = a / stride;
  return v < out_extent - 1 ? v : out_extent - 1;
}

// Blocked dot product with four deterministic accumulators; the lane split
// is fixed, so results are bit-stable across runs.
double dot4_impl(const double* __restrict a, const double* __restrict b, int len) {
  double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
  int i = 0;
  for (; i + 4 <= len; i += 4) {
    a0 += a[i] * b[i];
    a1 += a[i + 1] * b[i + 1];
    a2 += a[i + 2] * b[i + 2];
    a3 += a[i + 3] * b[i + 3];
  }
  for (; i < len; ++i) a0 += a[i] * b[i];
  return (a0 + a1) + (a2 + a3);
}

// Eight-lane dot; like dot4 but wide enough for one AVX-512 accumulator.
double dot8_impl(const double* __restrict a, const double* __restrict b, int len) {
  double acc[8] = {};
  int i = 0;
  for (; i + 8 <= len; i += 8)
    for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  for (; i < len; ++i) acc[0] += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

inline void axpy(double* __restrict y, const double* __restrict x, const double a,
                 const int len) {
  for (int i = 0; i < len; ++i) y[i] += a * x[i];
}

// Four accumulations into one destination with a single load/store pass.
// Each element still receives its four contributions in operand order, so
// the result is bit-identical to four sequential axpy calls.
inline void axpy_x4(double* __restrict y, const double* __restrict x0, const double* __restrict x1,
                    const double* __restrict x2, const double* __restrict x3, const double a0,
                    const double a1, const double a2, const double a3, const int len) {
  for (int i = 0; i < len; ++i) {
    double v = y[i];
    v += a0 * x0[i];
    v += a1 * x1[i];
    v += a2 * x2[i];
    v += a3 * x3[i];
    y[i] = v;
  }
}

inline void axpy_in_strided(double* __restrict y, const double* __restrict x, const double a,
                            const int len, const int xstride) {
  for (int i = 0; i < len; ++i) y[i] += a * x[i * xstride];
}

inline void axpy_out_strided(double* __restrict y, const double* __restrict x, const double a,
                             const int len, const int ystride) {
  for (int i = 0; i < len; ++i) y[i * ystride] += a * x[i];
}

inline void add_scalar(double* __restrict y, const double a, const std::int64_t len) {
  for (std::int64_t i = 0; i < len; ++i) y[i] += a;
}

// Lowered patch matrix: row k = (ic_g*kh + ky)*kw + kx holds the input
// value under that tap for every output pixel, zero where the tap falls in
// the padding. Rows are padded to a multiple of 8 so the matmul loops stay
// alignment-friendly. The k order equals the kernels' (ic, ky, kx)
// accumulation order, and the injected zeros add +-0.0 terms, which never
// change an accumulator's bits, so matmul on this buffer reproduces the
// direct path exactly.
void build_col(const Tensor4& x, int in, int g, int cpg, int kh, int kw, int s, int pad, int oh,
               int ow, std::int64_t p8, double* col) {
  const std::int64_t k_total = static_cast<std::int64_t>(cpg) * kh * kw;
  std::fill(col, col + k_total * p8, 0.0);
  const int w_in = x.w();
  for (int ic_g = 0; ic_g < cpg; ++ic_g) {
    const double* xplane = x.plane(in, g * cpg + ic_g);
    for (int ky = 0; ky < kh; ++ky) {
      const int oy0 = range_lo(ky, pad, s);
      const int oy1 = range_hi(ky, pad, s, x.h(), oh);
      for (int kx = 0; kx < kw; ++kx) {
        const int ox0 = range_lo(kx, pad, s);
        const int ox1 = range_hi(kx, pad, s, w_in, ow);
        const int len = ox1 - ox0 + 1;
        if (len <= 0 || oy1 < oy0) continue;
        double* crow_base = col + static_cast<std::int64_t>((ic_g * kh + ky) * kw + kx) * p8;
        for (int oy = oy0; oy <= oy1; ++oy) {
          const int iy = oy * s + ky - pad;
          const double* xrow = xplane + static_cast<std::int64_t>(iy) * w_in;
          double* crow = crow_base + static_cast<std::int64_t>(oy) * ow;
          if (s == 1) {
            const int shift = kx - pad;
            for (int ox = ox0; ox <= ox1; ++ox) crow[ox] = xrow[ox + shift];
          } else {
            for (int ox = ox0; ox <= ox1; ++ox) crow[ox] = xrow[ox * s + kx - pad];
          }
        }
      }
    }
  }
}

inline bool use_gemm(const ConvParams& p, int ocpg) {
  return (p.kh() > 1 || p.kw() > 1 || p.stride > 1) && ocpg >= 2;
}

// 3x3 stride-1 same-padding convs (stems, towers, depthwise planes) skip
// im2col and run fused nine-tap row kernels over zero-padded plane copies.
// The padding taps contribute +-0.0 terms, which leave accumulator bits
// alone, and each output element still sums over (ic, ky, kx) in that
// order. Wide dense convs stay on the matmul path where the lowered
// buffer's reuse wins.
inline bool is_direct3(const ConvParams& p, int cpg) {
  return p.stride == 1 && p.kh() == 3 && p.kw() == 3 && p.padding == 1 && cpg <= 16;
}

void dw3_row_acc(double* __restrict yrow, const double* __restrict r0, const double* __restrict r1,
                 const double* __restrict r2, const double* __restrict wt, int w) {
  for (int ox = 0; ox < w; ++ox) {
    double v = yrow[ox];
    v += wt[0] * r0[ox];
    v += wt[1] * r0[ox + 1];
    v += wt[2] * r0[ox + 2];
    v += wt[3] * r1[ox];
    v += wt[4] * r1[ox + 1];
    v += wt[5] * r1[ox + 2];
    v += wt[6] * r2[ox];
    v += wt[7] * r2[ox + 1];
    v += wt[8] * r2[ox + 2];
    yrow[ox] = v;
  }
}

// Nine tap-dot reductions, one wide dot per tap. The spans are L1
// resident, so nine separate passes vectorize far better than one pass
// carrying nine scalar accumulators.
void dw3_gradw_row(const double* __restrict go, const double* __restrict r0,
                   const double* __restrict r1, const double* __restrict r2, int w,
                   double* __restrict wa) {
  wa[0] += dot8_impl(go, r0, w);
  wa[1] += dot8_impl(go, r0 + 1, w);
  wa[2] += dot8_impl(go, r0 + 2, w);
  wa[3] += dot8_impl(go, r1, w);
  wa[4] += dot8_impl(go, r1 + 1, w);
  wa[5] += dot8_impl(go, r1 + 2, w);
  wa[6] += dot8_impl(go, r2, w);
  wa[7] += dot8_impl(go, r2 + 1, w);
  wa[8] += dot8_impl(go, r2 + 2, w);
}

// Copies a plane into the interior of a zero-bordered (h+2) x (w+2)
// scratch; the border stays zero across reuses because only the interior
// is rewritten.
inline void fill_padded(const double* plane, int h, int w, double* pb) {
  const int pw = w + 2;
  for (int iy = 0; iy < h; ++iy)
    std::copy(plane + static_cast<std::int64_t>(iy) * w,
              plane + static_cast<std::int64_t>(iy + 1) * w,
              pb + static_cast<std::int64_t>(iy + 1) * pw + 1);
}

// y += sum_k w[k] * rows[k], rows strided by row_stride, k ascending.
inline void accumulate_rows(double* __restrict y, const double* rows, std::int64_t row_stride,
                            const double* __restrict w, int k_total, int len) {
  int k = 0;
  for (; k + 4 <= k_total; k += 4)
    axpy_x4(y, rows + k * row_stride, rows + (k + 1) * row_stride, rows + (k + 2) * row_stride,
            rows + (k + 3) * row_stride, w[k], w[k + 1], w[k + 2], w[k + 3], len);
  for (; k < k_total; ++k) axpy(y, rows + k * row_stride, w[k], len);
}


void validate(const Tensor4& x, const ConvParams& p) {
  if (p.groups < 1) throw std::invalid_argument("conv: groups must be >= 1");
  if (p.stride < 1) throw std::invalid_argument("conv: stride must be >= 1");
  if (p.padding < 0) throw std::invalid_argument("conv: padding must be >= 0");
  if (p.weights.n() < 1 || p.weights.c() < 1 || p.weights.h() < 1 || p.weights.w() < 1)
    throw std::invalid_argument("conv: weight dims must all be >= 1, got " + p.weights.dims_str());
  if (p.weights.n() % p.groups != 0)
    throw std::invalid_argument("conv: groups=" + std::to_string(p.groups) +
                                " does not divide c_out=" + std::to_string(p.weights.n()));
  if (x.c() != p.c_in())
    throw std::invalid_argument("conv: input has c=" + std::to_string(x.c()) + " but weights " +
                                p.weights.dims_str() + " with groups=" + std::to_string(p.groups) +
                                " expect c_in=" + std::to_string(p.c_in()));
  if (p.bias && static_cast<int>(p.bias->size()) != p.c_out())
    throw std::invalid_argument("conv: bias length " + std::to_string(p.bias->size()) +
                                " != c_out " + std::to_string(p.c_out()));
}

}  // namespace

ConvShape conv_output_shape(const Tensor4& x, const ConvParams& p) {
  validate(x, p);
  const int num_h = x.h() + 2 * p.padding - p.kh();
  const int num_w = x.w() + 2 * p.padding - p.kw();
  if (num_h < 0 || num_w < 0)
    throw std::invalid_argument("conv: kernel " + p.weights.dims_str() +
                                " larger than padded input " + x.dims_str());
  ConvShape s{num_h / p.stride + 1, num_w / p.stride + 1};
  if (s.h_out < 1 || s.w_out < 1)
    throw std::invalid_argument("conv: non-positive output extent for input " + x.dims_str());
  return s;
}

Tensor4 conv2d_reference(const Tensor4& x, const ConvParams& p) {
  const ConvShape os = conv_output_shape(x, p);
  const int cpg = p.weights.c();
  const int ocpg = p.c_out() / p.groups;
  Tensor4 out(x.n(), p.c_out(), os.h_out, os.w_out);
  for (int in = 0; in < x.n(); ++in) {
    for (int g = 0; g < p.groups; ++g) {
      for (int oc_g = 0; oc_g < ocpg; ++oc_g) {
        const int oc = g * ocpg + oc_g;
        for (int oy = 0; oy < os.h_out; ++oy) {
          for (int ox = 0; ox < os.w_out; ++ox) {
            double acc = 0.0;
            for (int ic_g = 0; ic_g < cpg; ++ic_g) {
              const int ic = g * cpg + ic_g;
              for (int ky = 0; ky < p.kh(); ++ky) {
                const int iy = oy * p.stride + ky - p.padding;
                if (iy < 0 || iy >= x.h()) continue;
                for (int kx = 0; kx < p.kw(); ++kx) {
                  const int ix = ox * p.stride + kx - p.padding;
                  if (ix < 0 || ix >= x.w()) continue;
                  acc += x.at(in, ic, iy, ix) * p.weights.at(oc, ic_g, ky, kx);
                }
              }
            }
            if (p.bias) acc += (*p.bias)[oc];
            out.at(in, oc, oy, ox) = acc;
          }
        }
      }
    }
  }
  return out;
}

// Every kernel below accumulates each output element over (ic, ky, kx) in
// that fixed order, matching conv2d_reference element for element, so the
// direct and reference paths agree bitwise and so do any two blocks whose
// stages reduce in the same shapes.
Tensor4 conv2d(const Tensor4& x, const ConvParams& p) {
  const ConvShape os = conv_output_shape(x, p);
  const int cpg = p.weights.c();
  const int ocpg = p.c_out() / p.groups;
  const int s = p.stride;
  const int pad = p.padding;
  const int w_in = x.w();
  const std::int64_t oplane_sz = static_cast<std::int64_t>(os.h_out) * os.w_out;
  Tensor4 out = uninitialized_tensor(x.n(), p.c_out(), os.h_out, os.w_out);

  if (p.kh() == 1 && p.kw() == 1 && s == 1 && pad == 0) {
    std::fill_n(out.data(), out.size(), 0.0);
    const int plane = static_cast<int>(oplane_sz);
    for (int in = 0; in < x.n(); ++in) {
      const double* in_base = x.plane(in, 0);
      for (int g = 0; g < p.groups; ++g) {
        for (int oc_g = 0; oc_g < ocpg; ++oc_g) {
          const int oc = g * ocpg + oc_g;
          double* oplane = out.plane(in, oc);
          const double* wrow = p.weights.data() + p.weights.index(oc, 0, 0, 0);
          accumulate_rows(oplane, in_base + static_cast<std::int64_t>(g) * cpg * oplane_sz,
                          oplane_sz, wrow, cpg, plane);
          if (p.bias) add_scalar(oplane, (*p.bias)[oc], oplane_sz);
        }
      }
    }
    return out;
  }

  if (is_direct3(p, cpg)) {
    const int h = x.h();
    const int w = w_in;
    const int pw = w + 2;
    const std::int64_t pp = static_cast<std::int64_t>(h + 2) * pw;
    const std::int64_t span = static_cast<std::int64_t>(h - 1) * pw + w;
    // One fused pass covers a whole chunk of samples at once: each
    // channel's padded planes sit back to back, interior cells sit at a
    // fixed offset per row, every tap stays inside its own sample's padded
    // plane, and the cells between rows and between samples accumulate
    // values nobody reads back. Small planes chunk the full batch to
    // amortize per-pass overhead; larger planes go one sample at a time to
    // stay cache resident. Per-element accumulation order is identical
    // either way.
    const int nc = oplane_sz < 64 ? x.n() : 1;
    std::vector<double> pball(static_cast<std::size_t>(cpg) * nc * pp, 0.0);
    std::vector<double> opad(static_cast<std::size_t>(nc) * pp);
    for (int n0 = 0; n0 < x.n(); n0 += nc) {
      const int nb = std::min(nc, x.n() - n0);
      const std::int64_t span_all = static_cast<std::int64_t>(nb - 1) * pp + span;
      for (int g = 0; g < p.groups; ++g) {
        for (int ic_g = 0; ic_g < cpg; ++ic_g)
          for (int i = 0; i < nb; ++i)
            fill_padded(x.plane(n0 + i, g * cpg + ic_g), h, w,
                        pball.data() + (static_cast<std::int64_t>(ic_g) * nc + i) * pp);
        for (int oc_g = 0; oc_g < ocpg; ++oc_g) {
          const int oc = g * ocpg + oc_g;
          std::fill(opad.begin(), opad.begin() + static_cast<std::int64_t>(nb) * pp, 0.0);
          for (int ic_g = 0; ic_g < cpg; ++ic_g) {
            const double* wt = p.weights.data() + p.weights.index(oc, ic_g, 0, 0);
            const double* base = pball.data() + static_cast<std::int64_t>(ic_g) * nc * pp;
            dw3_row_acc(opad.data() + pw + 1, base, base + pw, base + 2 * pw, wt,
                        static_cast<int>(span_all));
          }
          for (int i = 0; i < nb; ++i) {
            double* oplane = out.plane(n0 + i, oc);
            const double* src = opad.data() + static_cast<std::int64_t>(i) * pp;
            for (int oy = 0; oy < h; ++oy)
              std::copy(src + static_cast<std::int64_t>(oy + 1) * pw + 1,
                        src + static_cast<std::int64_t>(oy + 1) * pw + 1 + w,
                        oplane + static_cast<std::int64_t>(oy) * w);
            if (p.bias) add_scalar(oplane, (*p.bias)[oc], oplane_sz);
          }
        }
      }
    }
    return out;
  }

  if (use_gemm(p, ocpg)) {
    std::fill_n(out.data(), out.size(), 0.0);
    const std::int64_t p8 = (oplane_sz + 7) & ~static_cast<std::int64_t>(7);
    const int k_total = cpg * p.kh() * p.kw();
    const int plane = static_cast<int>(oplane_sz);
    std::vector<double> col(static_cast<std::size_t>(k_total) * p8);
    for (int in = 0; in < x.n(); ++in) {
      for (int g = 0; g < p.groups; ++g) {
        build_col(x, in, g, cpg, p.kh(), p.kw(), s, pad, os.h_out, os.w_out, p8, col.data());
        for (int oc_g = 0; oc_g < ocpg; ++oc_g) {
          const int oc = g * ocpg + oc_g;
          double* oplane = out.plane(in, oc);
          const double* wrow = p.weights.data() + p.weights.index(oc, 0, 0, 0);
          accumulate_rows(oplane, col.data(), p8, wrow, k_total, plane);
          if (p.bias) add_scalar(oplane, (*p.bias)[oc], oplane_sz);
        }
      }
    }
    return out;
  }

  std::fill_n(out.data(), out.size(), 0.0);
  for (int in = 0; in < x.n(); ++in) {
    for (int g = 0; g < p.groups; ++g) {
      for (int oc_g = 0; oc_g < ocpg; ++oc_g) {
        const int oc = g * ocpg + oc_g;
        double* oplane = out.plane(in, oc);
        for (int ic_g = 0; ic_g < cpg; ++ic_g) {
          const int ic = g * cpg + ic_g;
          const double* xplane = x.plane(in, ic);
          for (int ky = 0; ky < p.kh(); ++ky) {
            const int oy0 = range_lo(ky, pad, s);
            const int oy1 = range_hi(ky, pad, s, x.h(), os.h_out);
            for (int kx = 0; kx < p.kw(); ++kx) {
              const double wv = p.weights.at(oc, ic_g, ky, kx);
              const int ox0 = range_lo(kx, pad, s);
              const int ox1 = range_hi(kx, pad, s, w_in, os.w_out);
              const int len = ox1 - ox0 + 1;
              if (len <= 0) continue;
              for (int oy = oy0; oy <= oy1; ++oy) {
                const int iy = oy * s + ky - pad;
                const double* xrow = xplane + static_cast<std::int64_t>(iy) * w_in;
                double* orow = oplane + static_cast<std::int64_t>(oy) * os.w_out;
                if (s == 1) {
                  axpy(orow + ox0, xrow + ox0 + kx - pad, wv, len);
                } else {
                  axpy_in_strided(orow + ox0, xrow + static_cast<std::int64_t>(ox0) * s + kx - pad,
                                  wv, len, s);
                }
              }
            }
          }
        }
        if (p.bias) add_scalar(oplane, (*p.bias)[oc], oplane_sz);
      }
    }
  }
  return out;
}

Tensor4 depthwise_conv2d(const Tensor4& x, const Tensor4& weights, int stride, int padding) {
  if (weights.c() != 1)
    throw std::invalid_argument("depthwise: weights must be (c,1,kh,kw), got " + weights.dims_str());
  if (weights.n() != x.c())
    throw std::invalid_argument("depthwise: input has c=" + std::to_string(x.c()) +
                                " but weights are " + weights.dims_str());
  return conv2d(x, ConvParams{weights, std::nullopt, stride, padding, x.c()});
}

Tensor4 pointwise_conv2d(const Tensor4& x, const Tensor4& weights,
                         const std::optional<std::vector<double>>& bias) {
  if (weights.h() != 1 || weights.w() != 1)
    throw std::invalid_argument("pointwise: weights must be (c_out,c_in,1,1), got " +
                                weights.dims_str());
  if (weights.c() != x.c())
    throw std::invalid_argument("pointwise: input has c=" + std::to_string(x.c()) +
                                " but weights are " + weights.dims_str());
  if (bias && static_cast<int>(bias->size()) != weights.n())
    throw std::invalid_argument("pointwise: bias length mismatch");
  return conv2d(x, ConvParams{weights, bias, 1, 0, 1});
}

ConvGrads conv2d_backward(const Tensor4& x, const ConvParams& p, const Tensor4& grad_out,
                          bool need_grad_x) {
  const ConvShape os = conv_output_shape(x, p);
  if (grad_out.n() != x.n() || grad_out.c() != p.c_out() || grad_out.h() != os.h_out ||
      grad_out.w() != os.w_out)
    throw std::invalid_argument("conv2d_backward: grad_out dims " + grad_out.dims_str() +
                                " do not match output (" + std::to_string(x.n()) + "," +
                                std::to_string(p.c_out()) + "," + std::to_string(os.h_out) + "," +
                                std::to_string(os.w_out) + ")");
  const int cpg = p.weights.c();
  const int ocpg = p.c_out() / p.groups;
  const int s = p.stride;
  const int pad = p.padding;
  const int w_in = x.w();
  const std::int64_t oplane_sz = static_cast<std::int64_t>(os.h_out) * os.w_out;

  ConvGrads grads;
  grads.grad_w = Tensor4(p.weights.n(), p.weights.c(), p.weights.h(), p.weights.w());
  if (need_grad_x) grads.grad_x = uninitialized_tensor(x.n(), x.c(), x.h(), x.w());
  if (p.bias) grads.grad_bias = std::vector<double>(p.c_out(), 0.0);
  const bool gx_accumulates = !is_direct3(p, cpg);
  if (need_grad_x && gx_accumulates)
    std::fill_n(grads.grad_x.data(), grads.grad_x.size(), 0.0);

  if (p.kh() == 1 && p.kw() == 1 && s == 1 && pad == 0) {
    const int plane = static_cast<int>(oplane_sz);
    for (int in = 0; in < x.n(); ++in) {
      for (int g = 0; g < p.groups; ++g) {
        const double* x_base = x.plane(in, g * cpg);
        const double* go_base = grad_out.plane(in, g * ocpg);
        for (int oc_g = 0; oc_g < ocpg; ++oc_g) {
          const int oc = g * ocpg + oc_g;
          const double* goplane = go_base + static_cast<std::int64_t>(oc_g) * oplane_sz;
          if (grads.grad_bias) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < oplane_sz; ++i) acc += goplane[i];
            (*grads.grad_bias)[oc] += acc;
          }
          double* gwrow = grads.grad_w.data() + grads.grad_w.index(oc, 0, 0, 0);
          for (int ic_g = 0; ic_g < cpg; ++ic_g)
            gwrow[ic_g] +=
                dot8_impl(goplane, x_base + static_cast<std::int64_t>(ic_g) * oplane_sz, plane);
        }
        if (!need_grad_x) continue;
        for (int ic_g = 0; ic_g < cpg; ++ic_g) {
          double* gxplane = grads.grad_x.plane(in, g * cpg + ic_g);
          int oc_g = 0;
          for (; oc_g + 4 <= ocpg; oc_g += 4) {
            const double* g0 = go_base + static_cast<std::int64_t>(oc_g) * oplane_sz;
            axpy_x4(gxplane, g0, g0 + oplane_sz, g0 + 2 * oplane_sz, g0 + 3 * oplane_sz,
                    p.weights.at(g * ocpg + oc_g, ic_g, 0, 0),
                    p.weights.at(g * ocpg + oc_g + 1, ic_g, 0, 0),
                    p.weights.at(g * ocpg + oc_g + 2, ic_g, 0, 0),
                    p.weights.at(g * ocpg + oc_g + 3, ic_g, 0, 0), plane);
          }
          for (; oc_g < ocpg; ++oc_g)
            axpy(gxplane, go_base + static_cast<std::int64_t>(oc_g) * oplane_sz,
                 p.weights.at(g * ocpg + oc_g, ic_g, 0, 0), plane);
        }
      }
    }
    return grads;
  }

  if (is_direct3(p, cpg)) {
    const int h = x.h();
    const int w = w_in;
    const int pw = w + 2;
    const std::int64_t pp = static_cast<std::int64_t>(h + 2) * pw;
    const std::int64_t span = static_cast<std::int64_t>(h - 1) * pw + w;
    // Chunked padded layouts, as in the forward pass. The padded grad_out
    // planes serve both weight and input gradients: the zero borders only
    // add +-0.0 terms to the tap reductions.
    const int nc = oplane_sz < 64 ? x.n() : 1;
    std::vector<double> pball(static_cast<std::size_t>(cpg) * nc * pp, 0.0);
    std::vector<double> pgoall(static_cast<std::size_t>(ocpg) * nc * pp, 0.0);
    std::vector<double> gxpad(need_grad_x ? static_cast<std::size_t>(nc) * pp : 0);
    for (int n0 = 0; n0 < x.n(); n0 += nc) {
      const int nb = std::min(nc, x.n() - n0);
      const std::int64_t span_all = static_cast<std::int64_t>(nb - 1) * pp + span;
      for (int g = 0; g < p.groups; ++g) {
        for (int ic_g = 0; ic_g < cpg; ++ic_g)
          for (int i = 0; i < nb; ++i)
            fill_padded(x.plane(n0 + i, g * cpg + ic_g), h, w,
                        pball.data() + (static_cast<std::int64_t>(ic_g) * nc + i) * pp);
        for (int oc_g = 0; oc_g < ocpg; ++oc_g) {
          const int oc = g * ocpg + oc_g;
          for (int i = 0; i < nb; ++i) {
            const double* goplane = grad_out.plane(n0 + i, oc);
            if (grads.grad_bias) {
              double acc = 0.0;
              for (std::int64_t j = 0; j < oplane_sz; ++j) acc += goplane[j];
              (*grads.grad_bias)[oc] += acc;
            }
            fill_padded(goplane, h, w,
                        pgoall.data() + (static_cast<std::int64_t>(oc_g) * nc + i) * pp);
          }
          const double* gop = pgoall.data() + static_cast<std::int64_t>(oc_g) * nc * pp + pw + 1;
          for (int ic_g = 0; ic_g < cpg; ++ic_g) {
            const double* base = pball.data() + static_cast<std::int64_t>(ic_g) * nc * pp;
            double wa[9] = {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
            dw3_gradw_row(gop, base, base + pw, base + 2 * pw, static_cast<int>(span_all), wa);
            double* gwrow = grads.grad_w.data() + grads.grad_w.index(oc, ic_g, 0, 0);
            for (int j = 0; j < 9; ++j) gwrow[j] += wa[j];
          }
        }
        if (!need_grad_x) continue;
        for (int ic_g = 0; ic_g < cpg; ++ic_g) {
          std::fill(gxpad.begin(), gxpad.begin() + static_cast<std::int64_t>(nb) * pp, 0.0);
          for (int oc_g = 0; oc_g < ocpg; ++oc_g) {
            const int oc = g * ocpg + oc_g;
            const double* wt = p.weights.data() + p.weights.index(oc, ic_g, 0, 0);
            const double wf[9] = {wt[8], wt[7], wt[6], wt[5], wt[4], wt[3], wt[2], wt[1], wt[0]};
            const double* base = pgoall.data() + static_cast<std::int64_t>(oc_g) * nc * pp;
            dw3_row_acc(gxpad.data() + pw + 1, base, base + pw, base + 2 * pw, wf,
                        static_cast<int>(span_all));
          }
          for (int i = 0; i < nb; ++i) {
            double* gxplane = grads.grad_x.plane(n0 + i, g * cpg + ic_g);
            const double* src = gxpad.data() + static_cast<std::int64_t>(i) * pp;
            for (int iy = 0; iy < h; ++iy)
              std::copy(src + static_cast<std::int64_t>(iy + 1) * pw + 1,
                        src + static_cast<std::int64_t>(iy + 1) * pw + 1 + w,
                        gxplane + static_cast<std::int64_t>(iy) * w);
          }
        }
      }
    }
    return grads;
  }

  if (use_gemm(p, ocpg)) {
    const std::int64_t p8 = (oplane_sz + 7) & ~static_cast<std::int64_t>(7);
    const int k_total = cpg * p.kh() * p.kw();
    const int plane = static_cast<int>(oplane_sz);
    std::vector<double> col(static_cast<std::size_t>(k_total) * p8);
    std::vector<double> dcol(need_grad_x ? static_cast<std::size_t>(k_total) * p8 : 0);
    for (int in = 0; in < x.n(); ++in) {
      for (int g = 0; g < p.groups; ++g) {
        build_col(x, in, g, cpg, p.kh(), p.kw(), s, pad, os.h_out, os.w_out, p8, col.data());
        const double* go_base = grad_out.plane(in, g * ocpg);
        for (int oc_g = 0; oc_g < ocpg; ++oc_g) {
          const int oc = g * ocpg + oc_g;
          const double* goplane = go_base + static_cast<std::int64_t>(oc_g) * oplane_sz;
          if (grads.grad_bias) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < oplane_sz; ++i) acc += goplane[i];
            (*grads.grad_bias)[oc] += acc;
          }
          double* gwrow = grads.grad_w.data() + grads.grad_w.index(oc, 0, 0, 0);
          for (int k = 0; k < k_total; ++k)
            gwrow[k] += dot8_impl(goplane, col.data() + static_cast<std::int64_t>(k) * p8, plane);
        }
        if (need_grad_x) {
          std::fill(dcol.begin(), dcol.end(), 0.0);
          for (int k = 0; k < k_total; ++k) {
            double* drow = dcol.data() + static_cast<std::int64_t>(k) * p8;
            int oc_g = 0;
            for (; oc_g + 4 <= ocpg; oc_g += 4) {
              const double* g0 = go_base + static_cast<std::int64_t>(oc_g) * oplane_sz;
              const std::int64_t w0 = p.weights.index(g * ocpg + oc_g, 0, 0, 0) + k;
              axpy_x4(drow, g0, g0 + oplane_sz, g0 + 2 * oplane_sz, g0 + 3 * oplane_sz,
                      p.weights.data()[w0], p.weights.data()[w0 + k_total],
                      p.weights.data()[w0 + 2 * k_total], p.weights.data()[w0 + 3 * k_total],
                      plane);
            }
            for (; oc_g < ocpg; ++oc_g)
              axpy(drow, go_base + static_cast<std::int64_t>(oc_g) * oplane_sz,
                   p.weights.data()[p.weights.index(g * ocpg + oc_g, 0, 0, 0) + k], plane);
          }
        }
        if (!need_grad_x) continue;
        for (int ic_g = 0; ic_g < cpg; ++ic_g) {
          double* gxplane = grads.grad_x.plane(in, g * cpg + ic_g);
          for (int ky = 0; ky < p.kh(); ++ky) {
            const int oy0 = range_lo(ky, pad, s);
            const int oy1 = range_hi(ky, pad, s, x.h(), os.h_out);
            for (int kx = 0; kx < p.kw(); ++kx) {
              const int ox0 = range_lo(kx, pad, s);
              const int ox1 = range_hi(kx, pad, s, w_in, os.w_out);
              const int len = ox1 - ox0 + 1;
              if (len <= 0 || oy1 < oy0) continue;
              const double* drow_base =
                  dcol.data() + static_cast<std::int64_t>((ic_g * p.kh() + ky) * p.kw() + kx) * p8;
              for (int oy = oy0; oy <= oy1; ++oy) {
                const int iy = oy * s + ky - pad;
                double* gxrow = gxplane + static_cast<std::int64_t>(iy) * w_in;
                const double* drow = drow_base + static_cast<std::int64_t>(oy) * os.w_out;
                if (s == 1) {
                  axpy(gxrow + ox0 + kx - pad, drow + ox0, 1.0, len);
                } else {
                  axpy_out_strided(gxrow + kx - pad + static_cast<std::int64_t>(ox0) * s,
                                   drow + ox0, 1.0, len, s);
                }
              }
            }
          }
        }
      }
    }
    return grads;
  }

  for (int in = 0; in < x.n(); ++in) {
    for (int g = 0; g < p.groups; ++g) {
      for (int oc_g = 0; oc_g < ocpg; ++oc_g) {
        const int oc = g * ocpg + oc_g;
        const double* goplane = grad_out.plane(in, oc);
        if (grads.grad_bias) {
          double acc = 0.0;
          for (std::int64_t i = 0; i < oplane_sz; ++i) acc += goplane[i];
          (*grads.grad_bias)[oc] += acc;
        }
        for (int ic_g = 0; ic_g < cpg; ++ic_g) {
          const int ic = g * cpg + ic_g;
          const double* xplane = x.plane(in, ic);
          double* gxplane = need_grad_x ? grads.grad_x.plane(in, ic) : nullptr;
          for (int ky = 0; ky < p.kh(); ++ky) {
            const int oy0 = range_lo(ky, pad, s);
            const int oy1 = range_hi(ky, pad, s, x.h(), os.h_out);
            for (int kx = 0; kx < p.kw(); ++kx) {
              const int ox0 = range_lo(kx, pad, s);
              const int ox1 = range_hi(kx, pad, s, w_in, os.w_out);
              const int len = ox1 - ox0 + 1;
              if (len <= 0 || oy1 < oy0) continue;
              const double wv = p.weights.at(oc, ic_g, ky, kx);
              double wacc = 0.0;
              for (int oy = oy0; oy <= oy1; ++oy) {
                const int iy = oy * s + ky - pad;
                const double* xrow = xplane + static_cast<std::int64_t>(iy) * w_in;
                const double* gorow = goplane + static_cast<std::int64_t>(oy) * os.w_out;
                if (s == 1) {
                  const int shift = kx - pad;
                  wacc += dot4_impl(gorow + ox0, xrow + ox0 + shift, len);
                  if (need_grad_x)
                    axpy(gxplane + static_cast<std::int64_t>(iy) * w_in + shift + ox0, gorow + ox0,
                         wv, len);
                } else {
                  for (int ox = ox0; ox <= ox1; ++ox) {
                    const int ix = ox * s + kx - pad;
                    wacc += gorow[ox] * xrow[ix];
                  }
                  if (need_grad_x)
                    axpy_out_strided(gxplane + static_cast<std::int64_t>(iy) * w_in + kx - pad +
                                         static_cast<std::int64_t>(ox0) * s,
                                     gorow + ox0, wv, len, s);
                }
              }
              grads.grad_w.at(oc, ic_g, ky, kx) += wacc;
            }
          }
        }
      }
    }
  }
  return grads;
}

namespace detail {
double dot4(const double* a, const double* b, int len) { return dot4_impl(a, b, len); }
}  // namespace detail

}  // namespace sepconv
