#include "sepconv/equivalence.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "sepconv/conv.hpp"

namespace sepconv {

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct DiffAccum {
  double max_abs = 0.0;
  double sum_abs = 0.0;
  double max_rel = 0.0;
  std::int64_t count = 0;

  void absorb(const Tensor4& a, const Tensor4& b) {
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::int64_t i = 0; i < a.size(); ++i) {
      const double ad = std::fabs(pa[i] - pb[i]);
      sum_abs += ad;
      if (ad > max_abs) max_abs = ad;
      const double denom = std::max(std::fabs(pa[i]), std::fabs(pb[i]));
      if (denom > 0.0) {
        const double rel = ad / denom;
        if (rel > max_rel) max_rel = rel;
      }
    }
    count += a.size();
  }
};

BlockSpec case_spec(const BlockSpec& base, const SweepOptions& opts, int case_idx, int& h,
                    int& w) {
  BlockSpec s = base;
  if (opts.vary_shapes) {
    int idx = case_idx;
    const int c = opts.channels[static_cast<std::size_t>(idx % static_cast<int>(opts.channels.size()))];
    idx /= static_cast<int>(opts.channels.size());
    const int hw = opts.sizes[static_cast<std::size_t>(idx % static_cast<int>(opts.sizes.size()))];
    idx /= static_cast<int>(opts.sizes.size());
    s.stride = opts.strides[static_cast<std::size_t>(idx % static_cast<int>(opts.strides.size()))];
    idx /= static_cast<int>(opts.strides.size());
    s.kernel = opts.kernels[static_cast<std::size_t>(idx % static_cast<int>(opts.kernels.size()))];
    s.c_in = s.c_out = c;
    if (s.residual && s.stride != 1) s.residual = false;
    h = w = hw;
  } else {
    h = w = 8;
  }
  return s;
}

}  // namespace

std::string EquivalenceReport::csv_row() const {
  std::string row = pair;
  row += ',' + std::to_string(cases);
  row += ',' + format_double(max_abs_diff);
  row += ',' + format_double(mean_abs_diff);
  row += ',' + format_double(max_rel_diff);
  row += ',' + format_double(tolerance);
  row += pass ? ",pass," : ",fail,";
  row += std::to_string(seed);
  return row;
}

EquivalenceReport sweep_equivalence(const BlockSpec& src_spec, BlockKind dst_kind,
                                    const SweepOptions& opts) {
  if (opts.cases < 1) throw std::invalid_argument("sweep: cases must be >= 1");
  if (!mapping_supported(src_spec.kind, dst_kind))
    throw std::invalid_argument(std::string("sweep: unsupported pair ") + to_string(src_spec.kind) +
                                ":" + to_string(dst_kind));
  DiffAccum acc;
  for (int i = 0; i < opts.cases; ++i) {
    int h = 0, w = 0;
    const BlockSpec cs = case_spec(src_spec, opts, i, h, w);
    Prng prng(derive_seed(opts.seed, static_cast<std::uint64_t>(i)));
    Block src = make_block_shell(cs);
    randomize_params(src, prng, opts.weight_stddev);
    Block dst = map_weights(src, dst_kind);
    Tensor4 x = random_normal(prng, 2, cs.c_in, h, w, 0.0, 1.0);
    acc.absorb(block_forward(src, x), block_forward(dst, x));
  }
  EquivalenceReport rep;
  rep.pair = std::string(to_string(src_spec.kind)) + ":" + to_string(dst_kind);
  rep.cases = opts.cases;
  rep.max_abs_diff = acc.max_abs;
  rep.mean_abs_diff = acc.count > 0 ? acc.sum_abs / static_cast<double>(acc.count) : 0.0;
  rep.max_rel_diff = acc.max_rel;
  rep.tolerance = opts.tolerance;
  rep.pass = acc.max_abs <= opts.tolerance;
  rep.seed = opts.seed;
  return rep;
}

EquivalenceReport sweep_equivalence(const BlockSpec& src_spec, BlockKind dst_kind, int cases,
                                    double tol, std::uint64_t seed) {
  SweepOptions opts;
  opts.cases = cases;
  opts.tolerance = tol;
  opts.seed = seed;
  return sweep_equivalence(src_spec, dst_kind, opts);
}

EquivalenceReport sweep_depthwise_grouped(const SweepOptions& opts) {
  if (opts.cases < 1) throw std::invalid_argument("sweep: cases must be >= 1");
  DiffAccum acc;
  BlockSpec base;  // only dims are consulted below
  for (int i = 0; i < opts.cases; ++i) {
    int h = 0, w = 0;
    const BlockSpec cs = case_spec(base, opts, i, h, w);
    Prng prng(derive_seed(opts.seed, static_cast<std::uint64_t>(i)));
    const int c = cs.c_in, k = cs.kernel;
    Tensor4 weights = random_normal(prng, c, 1, k, k, 0.0, opts.weight_stddev);
    Tensor4 x = random_normal(prng, 2, c, h, w, 0.0, 1.0);
    const int pad = (k - 1) / 2;
    ConvParams p;
    p.weights = weights;
    p.stride = cs.stride;
    p.padding = pad;
    p.groups = c;
    acc.absorb(depthwise_conv2d(x, weights, cs.stride, pad), conv2d(x, p));
  }
  EquivalenceReport rep;
  rep.pair = "depthwise:grouped";
  rep.cases = opts.cases;
  rep.max_abs_diff = acc.max_abs;
  rep.mean_abs_diff = acc.count > 0 ? acc.sum_abs / static_cast<double>(acc.count) : 0.0;
  rep.max_rel_diff = acc.max_rel;
  rep.tolerance = opts.tolerance;
  rep.pass = acc.max_abs <= opts.tolerance;
  rep.seed = opts.seed;
  return rep;
}

namespace {

double sum_squared(const Tensor4& y) {
  const double* p = y.data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < y.size(); ++i) acc += p[i] * p[i];
  return acc;
}

double rel_err(double fd, double an) {
  const double denom = std::max({1.0, std::fabs(fd), std::fabs(an)});
  return std::fabs(fd - an) / denom;
}

}  // namespace

GradCheckReport gradcheck(const BlockSpec& spec, double eps, double tol, std::uint64_t seed) {
  if (eps <= 0.0) throw std::invalid_argument("gradcheck: eps must be > 0");
  spec.validate();
  Prng init_prng(derive_seed(seed, 1));
  Block block = build_block(spec, init_prng);
  if (block.parameter_count() > 10000)
    throw std::invalid_argument("gradcheck: parameter budget exceeded (" +
                                std::to_string(block.parameter_count()) + " > 10000)");
  Prng input_prng(derive_seed(seed, 2));
  Tensor4 x = random_normal(input_prng, 2, spec.c_in, 6, 6, 0.0, 1.0);
  for (std::int64_t i = 0; i < x.size(); ++i) x.data()[i] += 0.01;

  BlockTrace trace;
  Tensor4 y = block_forward(block, x, &trace);
  Tensor4 grad_out = scale(y, 2.0);
  BlockGrads grads = block_backward(block, x, grad_out, trace);

  GradCheckReport rep;
  rep.kind = spec.kind;
  rep.eps = eps;
  rep.tol = tol;
  rep.seed = seed;

  for (std::size_t pi = 0; pi < block.params.size(); ++pi) {
    Tensor4& theta = block.params[pi].value;
    const Tensor4& analytic = grads.grad_params[pi].value;
    double worst = 0.0;
    for (std::int64_t i = 0; i < theta.size(); ++i) {
      const double saved = theta.data()[i];
      theta.data()[i] = saved + eps;
      const double lp = sum_squared(block_forward(block, x));
      theta.data()[i] = saved - eps;
      const double lm = sum_squared(block_forward(block, x));
      theta.data()[i] = saved;
      worst = std::max(worst, rel_err((lp - lm) / (2.0 * eps), analytic.data()[i]));
    }
    rep.entries.push_back({block.params[pi].name, worst});
  }

  double worst_input = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + eps;
    const double lp = sum_squared(block_forward(block, x));
    x.data()[i] = saved - eps;
    const double lm = sum_squared(block_forward(block, x));
    x.data()[i] = saved;
    worst_input = std::max(worst_input, rel_err((lp - lm) / (2.0 * eps), grads.grad_x.data()[i]));
  }
  rep.entries.push_back({"input", worst_input});

  for (const auto& e : rep.entries) rep.max_rel_err = std::max(rep.max_rel_err, e.max_rel_err);
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace sepconv
