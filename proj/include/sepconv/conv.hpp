#pragma once
// 2-D convolution kernels: a deliberately naive reference, a production
// kernel, and dedicated depthwise / pointwise forms, plus exact analytic
// gradients. Cross-correlation convention (no kernel flip), zero padding,
// equal stride on both axes.
//
// Every kernel accumulates each output element in (in-channel, ky, kx)
// order, so the production kernels agree with the reference bit for bit,
// not just within tolerance. The grouped form maps input channel slab
// [g*c_in/G, (g+1)*c_in/G) to output slab [g*c_out/G, (g+1)*c_out/G).

#include <optional>
#include <vector>

#include "sepconv/tensor.hpp"

namespace sepconv {

struct ConvParams {
  Tensor4 weights;  // (c_out, c_in / groups, kh, kw)
  std::optional<std::vector<double>> bias;  // per output channel
  int stride = 1;
  int padding = 0;
  int groups = 1;

  int c_out() const { return weights.n(); }
  int c_in() const { return weights.c() * groups; }
  int kh() const { return weights.h(); }
  int kw() const { return weights.w(); }
};

struct ConvShape {
  int h_out = 0;
  int w_out = 0;
};

// Validates x against p and returns the output spatial extents; throws
// std::invalid_argument on any shape/group mismatch or non-positive extent.
ConvShape conv_output_shape(const Tensor4& x, const ConvParams& p);

// Six nested loops over the definition; the oracle all other kernels are
// held to.
Tensor4 conv2d_reference(const Tensor4& x, const ConvParams& p);

// Production kernel (hoisted-weight direct convolution).
Tensor4 conv2d(const Tensor4& x, const ConvParams& p);

// weights (c, 1, kh, kw); output channel i depends only on input channel i.
Tensor4 depthwise_conv2d(const Tensor4& x, const Tensor4& weights, int stride, int padding);

// weights (c_out, c_in, 1, 1); a per-pixel linear map across channels.
Tensor4 pointwise_conv2d(const Tensor4& x, const Tensor4& weights,
                         const std::optional<std::vector<double>>& bias = std::nullopt);

struct ConvGrads {
  Tensor4 grad_x;  // default-constructed when need_grad_x is false
  Tensor4 grad_w;
  std::optional<std::vector<double>> grad_bias;
};

// Exact adjoint of the conv2d_reference semantics.
ConvGrads conv2d_backward(const Tensor4& x, const ConvParams& p, const Tensor4& grad_out,
                          bool need_grad_x = true);

namespace detail {
// Blocked dot product with four fixed accumulator lanes; bit-stable across
// runs but a different association than a plain sequential sum.
double dot4(const double* a, const double* b, int len);
}  // namespace detail

}  // namespace sepconv
