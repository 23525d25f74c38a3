#include "sepconv/blocks.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <utility>

#include "sepconv/conv.hpp"

namespace sepconv {

namespace {

struct KindName {
  BlockKind kind;
  const char* name;
};

constexpr KindName kKindNames[] = {
    {BlockKind::Separable, "separable"},
    {BlockKind::SeparableIntermediateRelu, "relu-variant"},
    {BlockKind::SepReformulation, "reformulation"},
    {BlockKind::Inception, "inception"},
    {BlockKind::ReformulatedInception, "reformulated-inception"},
    {BlockKind::ResNeXt, "resnext"},
    {BlockKind::ResNeXtGrouped, "resnext-grouped"},
    {BlockKind::HybridInterpretation, "hybrid"},
};

ConvParams conv_of(const Tensor4& w, int stride, int padding, int groups) {
  ConvParams p;
  p.weights = w;
  p.stride = stride;
  p.padding = padding;
  p.groups = groups;
  return p;
}

Tensor4 channel_slice(const Tensor4& x, int c0, int count) {
  Tensor4 out = uninitialized_tensor(x.n(), count, x.h(), x.w());
  const std::size_t plane = static_cast<std::size_t>(x.h()) * x.w();
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < count; ++c)
      std::memcpy(out.plane(n, c), x.plane(n, c0 + c), plane * sizeof(double));
  return out;
}

void copy_into_channels(Tensor4& dst, const Tensor4& src, int c0) {
  const std::size_t plane = static_cast<std::size_t>(dst.h()) * dst.w();
  for (int n = 0; n < src.n(); ++n)
    for (int c = 0; c < src.c(); ++c)
      std::memcpy(dst.plane(n, c0 + c), src.plane(n, c), plane * sizeof(double));
}

Tensor4 relu_backward(const Tensor4& pre, const Tensor4& g) {
  Tensor4 out = uninitialized_tensor(g.n(), g.c(), g.h(), g.w());
  const double* p = pre.data();
  const double* gp = g.data();
  double* o = out.data();
  const std::int64_t len = g.size();
  for (std::int64_t i = 0; i < len; ++i) o[i] = p[i] > 0.0 ? gp[i] : 0.0;
  return out;
}

// a is rows x cols row-major; out receives the cols x rows transpose.
void transpose_into(const double* __restrict a, int rows, int cols, double* __restrict out) {
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out[static_cast<std::int64_t>(c) * rows + r] = a[static_cast<std::int64_t>(r) * cols + c];
}

// The hybrid merge: y[n,j] = sum_i m[j,i] * t[n,i], path planes
// accumulated in descending i. Mathematically the pointwise conv applied
// to the stacked paths, but summed in the opposite order, so mapped
// hybrid blocks match separable ones to ~1e-15, not bitwise. When planes
// are shorter than the channel count the same sum runs in pixel-major
// layout; the per-element i order is unchanged, so both layouts produce
// identical bits.
Tensor4 merge_forward(const Tensor4& t, const Tensor4& m) {
  const int cin = t.c();
  const int cout = m.n();
  const int n = t.n(), ho = t.h(), wo = t.w();
  const int plane = ho * wo;
  Tensor4 y = uninitialized_tensor(n, cout, ho, wo);
  if (plane >= cout) {
    std::fill_n(y.data(), y.size(), 0.0);
    for (int in = 0; in < n; ++in)
      for (int j = 0; j < cout; ++j) {
        double* __restrict dst = y.plane(in, j);
        for (int i = cin - 1; i >= 0; --i) {
          const double wv = m.at(j, i, 0, 0);
          const double* __restrict src = t.plane(in, i);
          for (int pix = 0; pix < plane; ++pix) dst[pix] += wv * src[pix];
        }
      }
    return y;
  }
  std::vector<double> mt(static_cast<std::size_t>(cin) * cout);
  std::vector<double> tt(static_cast<std::size_t>(plane) * cin);
  std::vector<double> yt(static_cast<std::size_t>(plane) * cout);
  transpose_into(m.data(), cout, cin, mt.data());
  for (int in = 0; in < n; ++in) {
    transpose_into(t.plane(in, 0), cin, plane, tt.data());
    std::fill(yt.begin(), yt.end(), 0.0);
    for (int pix = 0; pix < plane; ++pix) {
      double* __restrict yrow = yt.data() + static_cast<std::int64_t>(pix) * cout;
      for (int i = cin - 1; i >= 0; --i) {
        const double wv = tt[static_cast<std::size_t>(pix) * cin + i];
        const double* __restrict mrow = mt.data() + static_cast<std::int64_t>(i) * cout;
        for (int j = 0; j < cout; ++j) yrow[j] += wv * mrow[j];
      }
    }
    transpose_into(yt.data(), plane, cout, y.plane(in, 0));
  }
  return y;
}

// Path kernels stacked into one depthwise weight tensor so the paths run
// as a single grouped conv; each group still sees exactly its own kernel.
Tensor4 packed_path_weights(const Block& block, int cin, int k) {
  Tensor4 dw = uninitialized_tensor(cin, 1, k, k);
  for (int i = 0; i < cin; ++i)
    std::memcpy(dw.plane(i, 0), block.params[static_cast<std::size_t>(i)].value.data(),
                static_cast<std::size_t>(k) * k * sizeof(double));
  return dw;
}

int param_fan_in(const Tensor4& w) { return w.c() * w.h() * w.w(); }

std::string bad_pair_msg(BlockKind src, BlockKind dst) {
  return std::string("map_weights: unsupported pair ") + to_string(src) + " -> " + to_string(dst);
}

void put_u16(std::ostream& out, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
  out.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int k = 0; k < 4; ++k) b[k] = static_cast<unsigned char>((v >> (8 * k)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

bool read_exact(std::istream& in, unsigned char* dst, std::size_t len) {
  in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(len));
  return static_cast<std::size_t>(in.gcount()) == len;
}

std::uint16_t get_u16(const unsigned char* b) {
  return static_cast<std::uint16_t>(b[0] | (static_cast<std::uint16_t>(b[1]) << 8));
}

std::uint32_t get_u32(const unsigned char* b) {
  std::uint32_t v = 0;
  for (int k = 3; k >= 0; --k) v = (v << 8) | b[k];
  return v;
}

constexpr std::uint16_t kSclbVersion = 1;

}  // namespace

const char* to_string(BlockKind kind) {
  for (const auto& kn : kKindNames)
    if (kn.kind == kind) return kn.name;
  return "unknown";
}

bool block_kind_from_string(std::string_view name, BlockKind& out) {
  for (const auto& kn : kKindNames) {
    if (name == kn.name) {
      out = kn.kind;
      return true;
    }
  }
  return false;
}

void BlockSpec::validate() const {
  if (c_in < 1 || c_out < 1) throw std::invalid_argument("block: channel counts must be positive");
  if (kernel < 1 || kernel % 2 == 0)
    throw std::invalid_argument("block: kernel must be a positive odd int (same-padding)");
  if (stride < 1) throw std::invalid_argument("block: stride must be >= 1");
  if (towers < 1) throw std::invalid_argument("block: towers must be >= 1");
  if (cardinality < 0) throw std::invalid_argument("block: cardinality must be >= 0");
  if (residual && (c_in != c_out || stride != 1))
    throw std::invalid_argument("block: residual requires c_in == c_out and stride == 1");
  switch (kind) {
    case BlockKind::Separable:
    case BlockKind::SeparableIntermediateRelu:
    case BlockKind::SepReformulation:
      break;
    case BlockKind::Inception:
    case BlockKind::ReformulatedInception:
      if (c_out % towers != 0) throw std::invalid_argument("block: towers must divide c_out");
      break;
    case BlockKind::ResNeXt:
    case BlockKind::ResNeXtGrouped: {
      const int card = effective_cardinality();
      if (c_in % card != 0) throw std::invalid_argument("block: cardinality must divide c_in");
      if (c_out % card != 0) throw std::invalid_argument("block: cardinality must divide c_out");
      break;
    }
    case BlockKind::HybridInterpretation:
      if (effective_cardinality() != c_in)
        throw std::invalid_argument("block: hybrid cardinality must equal c_in");
      break;
  }
}

const Tensor4& Block::param(std::string_view name) const {
  for (const auto& p : params)
    if (p.name == name) return p.value;
  throw std::invalid_argument("block: no parameter named " + std::string(name));
}

Tensor4& Block::param(std::string_view name) {
  for (auto& p : params)
    if (p.name == name) return p.value;
  throw std::invalid_argument("block: no parameter named " + std::string(name));
}

std::int64_t Block::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& p : params) total += p.value.size();
  return total;
}

Block make_block_shell(const BlockSpec& spec) {
  spec.validate();
  Block b;
  b.spec = spec;
  const int k = spec.kernel;
  switch (spec.kind) {
    case BlockKind::Separable:
    case BlockKind::SeparableIntermediateRelu:
      b.params.push_back({"dw", zeros(spec.c_in, 1, k, k)});
      b.params.push_back({"pw", zeros(spec.c_out, spec.c_in, 1, 1)});
      break;
    case BlockKind::SepReformulation:
      b.params.push_back({"grouped", zeros(spec.c_in, 1, k, k)});
      b.params.push_back({"pw", zeros(spec.c_out, spec.c_in, 1, 1)});
      break;
    case BlockKind::Inception: {
      const int ct = spec.c_out / spec.towers;
      for (int t = 0; t < spec.towers; ++t) {
        const std::string prefix = "tower" + std::to_string(t);
        b.params.push_back({prefix + ".reduce", zeros(ct, spec.c_in, 1, 1)});
        b.params.push_back({prefix + ".conv", zeros(ct, ct, k, k)});
      }
      break;
    }
    case BlockKind::ReformulatedInception: {
      const int ct = spec.c_out / spec.towers;
      b.params.push_back({"reduce", zeros(spec.c_out, spec.c_in, 1, 1)});
      b.params.push_back({"grouped", zeros(spec.c_out, ct, k, k)});
      break;
    }
    case BlockKind::ResNeXt: {
      const int card = spec.effective_cardinality();
      for (int p = 0; p < card; ++p)
        b.params.push_back({"path" + std::to_string(p), zeros(spec.c_out / card, spec.c_in / card, k, k)});
      b.params.push_back({"proj", zeros(spec.c_out, spec.c_out, 1, 1)});
      break;
    }
    case BlockKind::ResNeXtGrouped: {
      const int card = spec.effective_cardinality();
      b.params.push_back({"grouped", zeros(spec.c_out, spec.c_in / card, k, k)});
      b.params.push_back({"proj", zeros(spec.c_out, spec.c_out, 1, 1)});
      break;
    }
    case BlockKind::HybridInterpretation: {
      for (int p = 0; p < spec.c_in; ++p)
        b.params.push_back({"path" + std::to_string(p), zeros(1, 1, k, k)});
      b.params.push_back({"merge", zeros(spec.c_out, spec.c_in, 1, 1)});
      break;
    }
  }
  return b;
}

Block build_block(const BlockSpec& spec, Prng& prng) {
  Block b = make_block_shell(spec);
  for (auto& p : b.params) {
    const double stddev = std::sqrt(2.0 / param_fan_in(p.value));
    const auto& d = p.value.dims();
    p.value = random_normal(prng, d[0], d[1], d[2], d[3], 0.0, stddev);
  }
  return b;
}

void randomize_params(Block& block, Prng& prng, double stddev) {
  for (auto& p : block.params) {
    const auto& d = p.value.dims();
    p.value = random_normal(prng, d[0], d[1], d[2], d[3], 0.0, stddev);
  }
}

Tensor4 block_forward(const Block& block, const Tensor4& x, BlockTrace* trace,
                      const BlockOptions& opts) {
  const BlockSpec& s = block.spec;
  if (x.c() != s.c_in)
    throw std::invalid_argument("block forward: input has " + std::to_string(x.c()) +
                                " channels, spec expects " + std::to_string(s.c_in));
  const int pad = s.padding();
  if (trace) trace->vals.clear();
  Tensor4 y;
  switch (s.kind) {
    case BlockKind::Separable: {
      Tensor4 t = depthwise_conv2d(x, block.params[0].value, s.stride, pad);
      y = pointwise_conv2d(t, block.params[1].value);
      if (trace) trace->vals.push_back(std::move(t));
      break;
    }
    case BlockKind::SeparableIntermediateRelu: {
      Tensor4 t_pre = depthwise_conv2d(x, block.params[0].value, s.stride, pad);
      Tensor4 t_post = opts.relu_as_identity ? t_pre : relu(t_pre);
      y = pointwise_conv2d(t_post, block.params[1].value);
      if (trace) {
        trace->vals.push_back(std::move(t_pre));
        trace->vals.push_back(std::move(t_post));
      }
      break;
    }
    case BlockKind::SepReformulation: {
      Tensor4 t = conv2d(x, conv_of(block.params[0].value, s.stride, pad, s.c_in));
      y = conv2d(t, conv_of(block.params[1].value, 1, 0, 1));
      if (trace) trace->vals.push_back(std::move(t));
      break;
    }
    case BlockKind::Inception: {
      const int ct = s.c_out / s.towers;
      bool first = true;
      for (int t = 0; t < s.towers; ++t) {
        Tensor4 r = pointwise_conv2d(x, block.params[static_cast<std::size_t>(2 * t)].value);
        Tensor4 z = conv2d(r, conv_of(block.params[static_cast<std::size_t>(2 * t + 1)].value, s.stride, pad, 1));
        if (first) {
          y = uninitialized_tensor(z.n(), s.c_out, z.h(), z.w());
          first = false;
        }
        copy_into_channels(y, z, t * ct);
        if (trace) trace->vals.push_back(std::move(r));
      }
      break;
    }
    case BlockKind::ReformulatedInception: {
      Tensor4 r = pointwise_conv2d(x, block.params[0].value);
      y = conv2d(r, conv_of(block.params[1].value, s.stride, pad, s.towers));
      if (trace) trace->vals.push_back(std::move(r));
      break;
    }
    case BlockKind::ResNeXt: {
      const int card = s.effective_cardinality();
      const int cinp = s.c_in / card, coutp = s.c_out / card;
      Tensor4 cat;
      bool first = true;
      for (int p = 0; p < card; ++p) {
        Tensor4 slab = channel_slice(x, p * cinp, cinp);
        Tensor4 z = conv2d(slab, conv_of(block.params[static_cast<std::size_t>(p)].value, s.stride, pad, 1));
        if (first) {
          cat = uninitialized_tensor(z.n(), s.c_out, z.h(), z.w());
          first = false;
        }
        copy_into_channels(cat, z, p * coutp);
      }
      y = pointwise_conv2d(cat, block.params.back().value);
      if (trace) trace->vals.push_back(std::move(cat));
      break;
    }
    case BlockKind::ResNeXtGrouped: {
      const int card = s.effective_cardinality();
      Tensor4 t = conv2d(x, conv_of(block.params[0].value, s.stride, pad, card));
      y = pointwise_conv2d(t, block.params[1].value);
      if (trace) trace->vals.push_back(std::move(t));
      break;
    }
    case BlockKind::HybridInterpretation: {
      Tensor4 dw = packed_path_weights(block, s.c_in, s.kernel);
      Tensor4 t = conv2d(x, conv_of(dw, s.stride, pad, s.c_in));
      y = merge_forward(t, block.params.back().value);
      if (trace) trace->vals.push_back(std::move(t));
      break;
    }
  }
  if (s.residual) y = add(y, x);
  return y;
}

BlockGrads block_backward(const Block& block, const Tensor4& x, const Tensor4& grad_out,
                          const BlockTrace& trace, const BlockOptions& opts, bool need_grad_x) {
  const BlockSpec& s = block.spec;
  const int pad = s.padding();
  BlockGrads out;
  out.grad_params.reserve(block.params.size());
  switch (s.kind) {
    case BlockKind::Separable: {
      const Tensor4& t = trace.vals[0];
      ConvGrads pw = conv2d_backward(t, conv_of(block.params[1].value, 1, 0, 1), grad_out, true);
      ConvGrads dw = conv2d_backward(x, conv_of(block.params[0].value, s.stride, pad, s.c_in),
                                     pw.grad_x, need_grad_x);
      out.grad_params.push_back({"dw", std::move(dw.grad_w)});
      out.grad_params.push_back({"pw", std::move(pw.grad_w)});
      if (need_grad_x) out.grad_x = std::move(dw.grad_x);
      break;
    }
    case BlockKind::SeparableIntermediateRelu: {
      const Tensor4& t_pre = trace.vals[0];
      const Tensor4& t_post = trace.vals[1];
      ConvGrads pw = conv2d_backward(t_post, conv_of(block.params[1].value, 1, 0, 1), grad_out, true);
      Tensor4 g_pre = opts.relu_as_identity ? std::move(pw.grad_x) : relu_backward(t_pre, pw.grad_x);
      ConvGrads dw = conv2d_backward(x, conv_of(block.params[0].value, s.stride, pad, s.c_in),
                                     g_pre, need_grad_x);
      out.grad_params.push_back({"dw", std::move(dw.grad_w)});
      out.grad_params.push_back({"pw", std::move(pw.grad_w)});
      if (need_grad_x) out.grad_x = std::move(dw.grad_x);
      break;
    }
    case BlockKind::SepReformulation: {
      const Tensor4& t = trace.vals[0];
      ConvGrads pw = conv2d_backward(t, conv_of(block.params[1].value, 1, 0, 1), grad_out, true);
      ConvGrads g = conv2d_backward(x, conv_of(block.params[0].value, s.stride, pad, s.c_in),
                                    pw.grad_x, need_grad_x);
      out.grad_params.push_back({"grouped", std::move(g.grad_w)});
      out.grad_params.push_back({"pw", std::move(pw.grad_w)});
      if (need_grad_x) out.grad_x = std::move(g.grad_x);
      break;
    }
    case BlockKind::Inception: {
      const int ct = s.c_out / s.towers;
      Tensor4 gx;
      for (int t = 0; t < s.towers; ++t) {
        const Tensor4& r = trace.vals[static_cast<std::size_t>(t)];
        Tensor4 gz = channel_slice(grad_out, t * ct, ct);
        ConvGrads conv = conv2d_backward(r, conv_of(block.params[static_cast<std::size_t>(2 * t + 1)].value, s.stride, pad, 1), gz, true);
        ConvGrads red = conv2d_backward(x, conv_of(block.params[static_cast<std::size_t>(2 * t)].value, 1, 0, 1), conv.grad_x, need_grad_x);
        const std::string prefix = "tower" + std::to_string(t);
        out.grad_params.push_back({prefix + ".reduce", std::move(red.grad_w)});
        out.grad_params.push_back({prefix + ".conv", std::move(conv.grad_w)});
        if (need_grad_x) gx = t == 0 ? std::move(red.grad_x) : add(gx, red.grad_x);
      }
      if (need_grad_x) out.grad_x = std::move(gx);
      break;
    }
    case BlockKind::ReformulatedInception: {
      const Tensor4& r = trace.vals[0];
      ConvGrads g = conv2d_backward(r, conv_of(block.params[1].value, s.stride, pad, s.towers), grad_out, true);
      ConvGrads red = conv2d_backward(x, conv_of(block.params[0].value, 1, 0, 1), g.grad_x, need_grad_x);
      out.grad_params.push_back({"reduce", std::move(red.grad_w)});
      out.grad_params.push_back({"grouped", std::move(g.grad_w)});
      if (need_grad_x) out.grad_x = std::move(red.grad_x);
      break;
    }
    case BlockKind::ResNeXt: {
      const int card = s.effective_cardinality();
      const int cinp = s.c_in / card, coutp = s.c_out / card;
      const Tensor4& cat = trace.vals[0];
      ConvGrads proj = conv2d_backward(cat, conv_of(block.params.back().value, 1, 0, 1), grad_out, true);
      Tensor4 gx;
      if (need_grad_x) gx = uninitialized_tensor(x.n(), x.c(), x.h(), x.w());
      for (int p = 0; p < card; ++p) {
        Tensor4 gcat_p = channel_slice(proj.grad_x, p * coutp, coutp);
        Tensor4 slab = channel_slice(x, p * cinp, cinp);
        ConvGrads pg = conv2d_backward(slab, conv_of(block.params[static_cast<std::size_t>(p)].value, s.stride, pad, 1), gcat_p, need_grad_x);
        out.grad_params.push_back({"path" + std::to_string(p), std::move(pg.grad_w)});
        if (need_grad_x) copy_into_channels(gx, pg.grad_x, p * cinp);
      }
      out.grad_params.push_back({"proj", std::move(proj.grad_w)});
      if (need_grad_x) out.grad_x = std::move(gx);
      break;
    }
    case BlockKind::ResNeXtGrouped: {
      const int card = s.effective_cardinality();
      const Tensor4& t = trace.vals[0];
      ConvGrads proj = conv2d_backward(t, conv_of(block.params[1].value, 1, 0, 1), grad_out, true);
      ConvGrads g = conv2d_backward(x, conv_of(block.params[0].value, s.stride, pad, card),
                                    proj.grad_x, need_grad_x);
      out.grad_params.push_back({"grouped", std::move(g.grad_w)});
      out.grad_params.push_back({"proj", std::move(proj.grad_w)});
      if (need_grad_x) out.grad_x = std::move(g.grad_x);
      break;
    }
    case BlockKind::HybridInterpretation: {
      const Tensor4& m = block.params.back().value;
      const int cin = s.c_in, cout = s.c_out, k = s.kernel;
      const Tensor4& t = trace.vals[0];
      const int ho = grad_out.h(), wo = grad_out.w(), plane = ho * wo;
      Tensor4 gm = zeros(cout, cin, 1, 1);
      Tensor4 gt = uninitialized_tensor(grad_out.n(), cin, ho, wo);
      if (plane >= cin) {
        std::fill_n(gt.data(), gt.size(), 0.0);
        for (int j = 0; j < cout; ++j)
          for (int i = 0; i < cin; ++i) {
            double acc = 0.0;
            for (int n = 0; n < grad_out.n(); ++n)
              acc += detail::dot4(grad_out.plane(n, j), t.plane(n, i), plane);
            gm.at(j, i, 0, 0) = acc;
          }
        for (int n = 0; n < grad_out.n(); ++n)
          for (int i = 0; i < cin; ++i) {
            double* __restrict dst = gt.plane(n, i);
            for (int j = 0; j < cout; ++j) {
              const double wv = m.at(j, i, 0, 0);
              const double* __restrict src = grad_out.plane(n, j);
              for (int pix = 0; pix < plane; ++pix) dst[pix] += wv * src[pix];
            }
          }
      } else {
        // pixel-major layout for short planes, as in the forward merge
        std::vector<double> tt(static_cast<std::size_t>(plane) * cin);
        std::vector<double> gq(static_cast<std::size_t>(plane) * cout);
        std::vector<double> gtt(static_cast<std::size_t>(plane) * cin);
        for (int n = 0; n < grad_out.n(); ++n) {
          transpose_into(t.plane(n, 0), cin, plane, tt.data());
          transpose_into(grad_out.plane(n, 0), cout, plane, gq.data());
          for (int j = 0; j < cout; ++j) {
            double* __restrict gmrow = gm.data() + static_cast<std::int64_t>(j) * cin;
            for (int pix = 0; pix < plane; ++pix) {
              const double wv = gq[static_cast<std::size_t>(pix) * cout + j];
              const double* __restrict ttrow = tt.data() + static_cast<std::int64_t>(pix) * cin;
              for (int i = 0; i < cin; ++i) gmrow[i] += wv * ttrow[i];
            }
          }
          std::fill(gtt.begin(), gtt.end(), 0.0);
          for (int pix = 0; pix < plane; ++pix) {
            double* __restrict gtrow = gtt.data() + static_cast<std::int64_t>(pix) * cin;
            for (int j = 0; j < cout; ++j) {
              const double wv = gq[static_cast<std::size_t>(pix) * cout + j];
              const double* __restrict mrow = m.data() + static_cast<std::int64_t>(j) * cin;
              for (int i = 0; i < cin; ++i) gtrow[i] += wv * mrow[i];
            }
          }
          transpose_into(gtt.data(), plane, cin, gt.plane(n, 0));
        }
      }
      Tensor4 dw = packed_path_weights(block, cin, k);
      ConvGrads pg = conv2d_backward(x, conv_of(dw, s.stride, pad, cin), gt, need_grad_x);
      for (int i = 0; i < cin; ++i) {
        Tensor4 gw = uninitialized_tensor(1, 1, k, k);
        std::memcpy(gw.data(), pg.grad_w.plane(i, 0), static_cast<std::size_t>(k) * k * sizeof(double));
        out.grad_params.push_back({"path" + std::to_string(i), std::move(gw)});
      }
      out.grad_params.push_back({"merge", std::move(gm)});
      if (need_grad_x) out.grad_x = std::move(pg.grad_x);
      break;
    }
  }
  if (s.residual && need_grad_x) out.grad_x = add(out.grad_x, grad_out);
  return out;
}

BlockGrads block_backward(const Block& block, const Tensor4& x, const Tensor4& grad_out,
                          const BlockOptions& opts, bool need_grad_x) {
  BlockTrace trace;
  block_forward(block, x, &trace, opts);
  return block_backward(block, x, grad_out, trace, opts, need_grad_x);
}

bool mapping_supported(BlockKind src, BlockKind dst) {
  auto pair_ok = [](BlockKind a, BlockKind b, BlockKind s, BlockKind d) {
    return (s == a && d == b) || (s == b && d == a);
  };
  return pair_ok(BlockKind::Separable, BlockKind::SepReformulation, src, dst) ||
         pair_ok(BlockKind::Separable, BlockKind::HybridInterpretation, src, dst) ||
         pair_ok(BlockKind::Separable, BlockKind::SeparableIntermediateRelu, src, dst) ||
         pair_ok(BlockKind::ResNeXt, BlockKind::ResNeXtGrouped, src, dst);
}

Block map_weights(const Block& src, BlockKind dst_kind) {
  const BlockSpec& s = src.spec;
  if (!mapping_supported(s.kind, dst_kind)) throw std::invalid_argument(bad_pair_msg(s.kind, dst_kind));
  BlockSpec dspec = s;
  dspec.kind = dst_kind;
  if (dst_kind == BlockKind::HybridInterpretation || s.kind == BlockKind::HybridInterpretation)
    dspec.cardinality = 0;
  Block dst = make_block_shell(dspec);
  const int k = s.kernel;

  auto copy_tensor = [](const Tensor4& from, Tensor4& to) {
    std::memcpy(to.data(), from.data(), static_cast<std::size_t>(from.size()) * sizeof(double));
  };

  const bool sep_like = [](BlockKind kind) {
    return kind == BlockKind::Separable || kind == BlockKind::SeparableIntermediateRelu ||
           kind == BlockKind::SepReformulation;
  }(s.kind);

  if (sep_like && (dst_kind == BlockKind::Separable || dst_kind == BlockKind::SeparableIntermediateRelu ||
                   dst_kind == BlockKind::SepReformulation)) {
    copy_tensor(src.params[0].value, dst.params[0].value);
    copy_tensor(src.params[1].value, dst.params[1].value);
  } else if (sep_like && dst_kind == BlockKind::HybridInterpretation) {
    const Tensor4& dw = src.params[0].value;
    for (int i = 0; i < s.c_in; ++i) {
      Tensor4& path = dst.params[static_cast<std::size_t>(i)].value;
      std::memcpy(path.data(), dw.plane(i, 0), static_cast<std::size_t>(k) * k * sizeof(double));
    }
    copy_tensor(src.params[1].value, dst.params.back().value);
  } else if (s.kind == BlockKind::HybridInterpretation) {
    Tensor4& dw = dst.params[0].value;
    for (int i = 0; i < s.c_in; ++i)
      std::memcpy(dw.plane(i, 0), src.params[static_cast<std::size_t>(i)].value.data(),
                  static_cast<std::size_t>(k) * k * sizeof(double));
    copy_tensor(src.params.back().value, dst.params[1].value);
  } else if (s.kind == BlockKind::ResNeXt) {
    // per-path kernels stack into the grouped weights' block-diagonal slabs
    Tensor4& grouped = dst.params[0].value;
    double* out = grouped.data();
    for (int p = 0; p < s.effective_cardinality(); ++p) {
      const Tensor4& path = src.params[static_cast<std::size_t>(p)].value;
      std::memcpy(out, path.data(), static_cast<std::size_t>(path.size()) * sizeof(double));
      out += path.size();
    }
    copy_tensor(src.params.back().value, dst.params[1].value);
  } else {
    const Tensor4& grouped = src.params[0].value;
    const double* in = grouped.data();
    for (int p = 0; p < s.effective_cardinality(); ++p) {
      Tensor4& path = dst.params[static_cast<std::size_t>(p)].value;
      std::memcpy(path.data(), in, static_cast<std::size_t>(path.size()) * sizeof(double));
      in += path.size();
    }
    copy_tensor(src.params[1].value, dst.params.back().value);
  }
  return dst;
}

void save_block_params(const Block& block, std::ostream& out) {
  out.write("SCLB", 4);
  put_u16(out, kSclbVersion);
  std::vector<unsigned char> buf;
  for (const auto& p : block.params) {
    if (p.name.size() > 0xffff) throw std::invalid_argument("sclb: parameter name too long");
    put_u16(out, static_cast<std::uint16_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    for (int d : p.value.dims()) put_u32(out, static_cast<std::uint32_t>(d));
    buf.resize(static_cast<std::size_t>(p.value.size()) * 8);
    const double* vals = p.value.data();
    for (std::int64_t i = 0; i < p.value.size(); ++i) {
      const std::uint64_t v = std::bit_cast<std::uint64_t>(vals[i]);
      for (int b = 0; b < 8; ++b) buf[static_cast<std::size_t>(i) * 8 + b] = static_cast<unsigned char>((v >> (8 * b)) & 0xff);
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  }
  if (!out) throw std::runtime_error("sclb: write failed");
}

std::vector<Param> load_block_params(std::istream& in) {
  unsigned char hdr[6];
  if (!read_exact(in, hdr, 6)) throw std::runtime_error("sclb: truncated header");
  if (std::memcmp(hdr, "SCLB", 4) != 0) throw std::runtime_error("sclb: bad magic");
  if (get_u16(hdr + 4) != kSclbVersion) throw std::runtime_error("sclb: unsupported version");
  std::vector<Param> out;
  for (;;) {
    unsigned char lenb[2];
    in.read(reinterpret_cast<char*>(lenb), 2);
    if (in.gcount() == 0 && in.eof()) break;
    if (in.gcount() != 2) throw std::runtime_error("sclb: truncated record");
    const std::size_t name_len = get_u16(lenb);
    std::string name(name_len, '\0');
    if (name_len > 0 && !read_exact(in, reinterpret_cast<unsigned char*>(name.data()), name_len))
      throw std::runtime_error("sclb: truncated name");
    unsigned char extb[16];
    if (!read_exact(in, extb, 16)) throw std::runtime_error("sclb: truncated extents");
    int dims[4];
    for (int d = 0; d < 4; ++d) {
      const std::uint32_t v = get_u32(extb + 4 * d);
      if (v > 0x7fffffffu) throw std::runtime_error("sclb: extent out of range");
      dims[d] = static_cast<int>(v);
    }
    Tensor4 t = zeros(dims[0], dims[1], dims[2], dims[3]);
    std::vector<unsigned char> buf(static_cast<std::size_t>(t.size()) * 8);
    if (!buf.empty() && !read_exact(in, buf.data(), buf.size()))
      throw std::runtime_error("sclb: truncated payload");
    double* vals = t.data();
    for (std::int64_t i = 0; i < t.size(); ++i) {
      std::uint64_t v = 0;
      for (int b = 7; b >= 0; --b) v = (v << 8) | buf[static_cast<std::size_t>(i) * 8 + b];
      vals[i] = std::bit_cast<double>(v);
    }
    out.push_back({std::move(name), std::move(t)});
  }
  return out;
}

void save_block_params_file(const Block& block, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("sclb: cannot open " + path + " for writing");
  save_block_params(block, f);
}

std::vector<Param> load_block_params_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("sclb: cannot open " + path);
  return load_block_params(f);
}

void apply_params(Block& block, const std::vector<Param>& params) {
  if (params.size() != block.params.size())
    throw std::invalid_argument("apply_params: expected " + std::to_string(block.params.size()) +
                                " parameters, got " + std::to_string(params.size()));
  std::vector<bool> seen(block.params.size(), false);
  for (const auto& p : params) {
    bool found = false;
    for (std::size_t i = 0; i < block.params.size(); ++i) {
      if (block.params[i].name != p.name) continue;
      if (seen[i]) throw std::invalid_argument("apply_params: duplicate parameter " + p.name);
      if (!block.params[i].value.same_dims(p.value))
        throw std::invalid_argument("apply_params: shape mismatch for " + p.name + ": " +
                                    block.params[i].value.dims_str() + " vs " + p.value.dims_str());
      std::memcpy(block.params[i].value.data(), p.value.data(),
                  static_cast<std::size_t>(p.value.size()) * sizeof(double));
      seen[i] = true;
      found = true;
      break;
    }
    if (!found) throw std::invalid_argument("apply_params: unknown parameter " + p.name);
  }
}

}  // namespace sepconv
