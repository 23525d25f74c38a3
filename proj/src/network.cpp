#include "sepconv/network.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace sepconv {

namespace {

constexpr std::uint64_t kStemSalt = 1;
constexpr std::uint64_t kBlockSalt = 10;  // + block index
constexpr std::uint64_t kDownsampleSalt = 50;  // + downsample index
constexpr std::uint64_t kHeadSalt = 90;

Tensor4 he_tensor(std::uint64_t seed, int n, int c, int h, int w) {
  Prng prng(seed);
  const double stddev = std::sqrt(2.0 / (static_cast<double>(c) * h * w));
  return random_normal(prng, n, c, h, w, 0.0, stddev);
}

Tensor4 relu_backward(const Tensor4& pre, const Tensor4& g) {
  Tensor4 out = zeros(g.n(), g.c(), g.h(), g.w());
  const double* p = pre.data();
  const double* gp = g.data();
  double* o = out.data();
  for (std::int64_t i = 0; i < g.size(); ++i) o[i] = p[i] > 0.0 ? gp[i] : 0.0;
  return out;
}

struct Batch {
  Tensor4 x;
  std::vector<int> labels;
};

Batch gather(const Dataset& ds, const std::vector<int>& order, int start, int count) {
  Batch b;
  b.x = zeros(count, ds.images.c(), ds.images.h(), ds.images.w());
  b.labels.reserve(static_cast<std::size_t>(count));
  const std::size_t row_len =
      static_cast<std::size_t>(ds.images.c()) * ds.images.h() * ds.images.w();
  for (int i = 0; i < count; ++i) {
    const int src = order[static_cast<std::size_t>(start + i)];
    std::memcpy(b.x.plane(i, 0), ds.images.plane(src, 0), row_len * sizeof(double));
    b.labels.push_back(ds.labels[static_cast<std::size_t>(src)]);
  }
  return b;
}

struct ForwardCache {
  Tensor4 stem_pre;
  std::vector<Tensor4> block_in;
  std::vector<Tensor4> block_pre;
  std::vector<BlockTrace> traces;
  std::vector<Tensor4> ds_in;
  std::vector<Tensor4> ds_pre;
  Tensor4 gap_in;
  Tensor4 gap_out;
};

Tensor4 forward_logits(const Network& net, const Tensor4& x, const BlockOptions& opts,
                       ForwardCache* cache) {
  const int depth = net.spec.depth_per_stage;
  Tensor4 pre = conv2d(x, net.stem);
  if (cache) cache->stem_pre = pre;
  Tensor4 cur = relu(pre);
  int bi = 0;
  for (int stage = 0; stage < 3; ++stage) {
    for (int d = 0; d < depth; ++d, ++bi) {
      BlockTrace trace;
      Tensor4 bpre = block_forward(net.blocks[static_cast<std::size_t>(bi)], cur,
                                   cache ? &trace : nullptr, opts);
      if (cache) {
        cache->block_in.push_back(std::move(cur));
        cache->traces.push_back(std::move(trace));
        cache->block_pre.push_back(bpre);
      }
      cur = relu(bpre);
    }
    if (stage < 2) {
      Tensor4 dpre = conv2d(cur, net.downsamples[static_cast<std::size_t>(stage)]);
      if (cache) {
        cache->ds_in.push_back(std::move(cur));
        cache->ds_pre.push_back(dpre);
      }
      cur = relu(dpre);
    }
  }
  Tensor4 pooled = global_avg_pool(cur);
  if (cache) {
    cache->gap_in = std::move(cur);
    cache->gap_out = pooled;
  }
  return conv2d(pooled, net.head);
}

// mean cross-entropy; fills grad (d loss / d logits) when non-null
double softmax_ce(const Tensor4& logits, const std::vector<int>& labels, Tensor4* grad) {
  const int b = logits.n(), classes = logits.c();
  if (grad) *grad = zeros(b, classes, 1, 1);
  double total = 0.0;
  for (int i = 0; i < b; ++i) {
    const double* z = logits.plane(i, 0);
    double m = z[0];
    for (int k = 1; k < classes; ++k) m = std::max(m, z[k]);
    double sum = 0.0;
    for (int k = 0; k < classes; ++k) sum += std::exp(z[k] - m);
    const double lse = m + std::log(sum);
    total += lse - z[labels[static_cast<std::size_t>(i)]];
    if (grad) {
      double* g = grad->plane(i, 0);
      for (int k = 0; k < classes; ++k) {
        const double p = std::exp(z[k] - lse);
        g[k] = (p - (k == labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0)) / b;
      }
    }
  }
  return total / b;
}

struct NetGrads {
  Tensor4 stem_w;
  std::vector<BlockGrads> blocks;
  std::vector<Tensor4> ds_w;
  Tensor4 head_w;
  std::vector<double> head_b;
};

NetGrads backward(const Network& net, const Tensor4& x, const ForwardCache& cache,
                  const Tensor4& dlogits, const BlockOptions& opts) {
  const int depth = net.spec.depth_per_stage;
  NetGrads grads;
  grads.blocks.resize(net.blocks.size());
  grads.ds_w.resize(2);

  ConvGrads head = conv2d_backward(cache.gap_out, net.head, dlogits, true);
  grads.head_w = std::move(head.grad_w);
  grads.head_b = std::move(*head.grad_bias);

  // spread the pooled gradient uniformly over the spatial sites
  const Tensor4& gi = cache.gap_in;
  const int plane = gi.h() * gi.w();
  Tensor4 g = zeros(gi.n(), gi.c(), gi.h(), gi.w());
  for (int n = 0; n < gi.n(); ++n)
    for (int c = 0; c < gi.c(); ++c) {
      const double v = head.grad_x.at(n, c, 0, 0) / plane;
      double* dst = g.plane(n, c);
      for (int p = 0; p < plane; ++p) dst[p] = v;
    }

  int bi = static_cast<int>(net.blocks.size()) - 1;
  for (int stage = 2; stage >= 0; --stage) {
    if (stage < 2) {
      g = relu_backward(cache.ds_pre[static_cast<std::size_t>(stage)], g);
      ConvGrads ds = conv2d_backward(cache.ds_in[static_cast<std::size_t>(stage)],
                                     net.downsamples[static_cast<std::size_t>(stage)], g, true);
      grads.ds_w[static_cast<std::size_t>(stage)] = std::move(ds.grad_w);
      g = std::move(ds.grad_x);
    }
    for (int d = depth - 1; d >= 0; --d, --bi) {
      g = relu_backward(cache.block_pre[static_cast<std::size_t>(bi)], g);
      BlockGrads bg = block_backward(net.blocks[static_cast<std::size_t>(bi)],
                                     cache.block_in[static_cast<std::size_t>(bi)], g,
                                     cache.traces[static_cast<std::size_t>(bi)], opts, true);
      grads.blocks[static_cast<std::size_t>(bi)] = std::move(bg);
      g = std::move(grads.blocks[static_cast<std::size_t>(bi)].grad_x);
    }
  }

  g = relu_backward(cache.stem_pre, g);
  ConvGrads stem = conv2d_backward(x, net.stem, g, false);
  grads.stem_w = std::move(stem.grad_w);
  return grads;
}

struct Velocity {
  std::vector<double> stem_w;
  std::vector<std::vector<double>> block_params;  // flattened per block
  std::vector<std::vector<double>> ds_w;
  std::vector<double> head_w;
  std::vector<double> head_b;
};

void sgd_step(double* w, double* v, const double* g, std::int64_t len, double lr, double mu) {
  for (std::int64_t i = 0; i < len; ++i) {
    v[i] = mu * v[i] + g[i];
    w[i] -= lr * v[i];
  }
}

}  // namespace

void NetworkSpec::validate() const {
  if (base_width < 1) throw std::invalid_argument("network: base_width must be >= 1");
  if (depth_per_stage < 1) throw std::invalid_argument("network: depth_per_stage must be >= 1");
  if (in_channels < 1) throw std::invalid_argument("network: in_channels must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("network: num_classes must be >= 2");
}

std::int64_t Network::parameter_count() const {
  std::int64_t total = stem.weights.size();
  for (const auto& b : blocks) total += b.parameter_count();
  for (const auto& d : downsamples) total += d.weights.size();
  total += head.weights.size() + static_cast<std::int64_t>(head.bias->size());
  return total;
}

Network build_network(const NetworkSpec& spec, std::uint64_t init_seed) {
  spec.validate();
  Network net;
  net.spec = spec;

  net.stem.weights = he_tensor(derive_seed(init_seed, kStemSalt), spec.base_width,
                               spec.in_channels, 3, 3);
  net.stem.stride = 1;
  net.stem.padding = 1;

  const bool card_kind =
      spec.block_kind == BlockKind::ResNeXt || spec.block_kind == BlockKind::ResNeXtGrouped;
  int bi = 0;
  for (int stage = 0; stage < 3; ++stage) {
    const int width = spec.stage_width(stage);
    BlockSpec bs;
    bs.kind = spec.block_kind;
    bs.c_in = bs.c_out = width;
    bs.kernel = spec.kernel;
    bs.stride = 1;
    bs.cardinality = card_kind ? spec.cardinality : 0;
    bs.towers = spec.towers;
    bs.residual = spec.residual;
    for (int d = 0; d < spec.depth_per_stage; ++d, ++bi) {
      Prng prng(derive_seed(init_seed, kBlockSalt + static_cast<std::uint64_t>(bi)));
      net.blocks.push_back(build_block(bs, prng));
    }
  }

  for (int s = 0; s < 2; ++s) {
    ConvParams ds;
    ds.weights = he_tensor(derive_seed(init_seed, kDownsampleSalt + static_cast<std::uint64_t>(s)),
                           spec.stage_width(s + 1), spec.stage_width(s), 1, 1);
    ds.stride = 2;
    ds.padding = 0;
    net.downsamples.push_back(std::move(ds));
  }

  net.head.weights = he_tensor(derive_seed(init_seed, kHeadSalt), spec.num_classes,
                               spec.stage_width(2), 1, 1);
  net.head.bias = std::vector<double>(static_cast<std::size_t>(spec.num_classes), 0.0);
  return net;
}

Tensor4 network_logits(const Network& net, const Tensor4& x, const BlockOptions& opts) {
  return forward_logits(net, x, opts, nullptr);
}

TrainResult train_network(Network& net, const Dataset& train, const TrainConfig& cfg) {
  if (train.n() < 1) throw std::invalid_argument("train: dataset is empty");
  if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (cfg.learning_rate < 0.0) throw std::invalid_argument("train: learning_rate must be >= 0");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0)
    throw std::invalid_argument("train: momentum must be in [0, 1)");

  Velocity vel;
  vel.stem_w.assign(static_cast<std::size_t>(net.stem.weights.size()), 0.0);
  for (const auto& b : net.blocks)
    vel.block_params.emplace_back(static_cast<std::size_t>(b.parameter_count()), 0.0);
  for (const auto& d : net.downsamples)
    vel.ds_w.emplace_back(static_cast<std::size_t>(d.weights.size()), 0.0);
  vel.head_w.assign(static_cast<std::size_t>(net.head.weights.size()), 0.0);
  vel.head_b.assign(net.head.bias->size(), 0.0);

  TrainResult result;
  Prng batch_prng(cfg.batch_seed);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<int> order = shuffled_indices(train.n(), batch_prng);
    for (int start = 0; start < train.n(); start += cfg.batch_size) {
      const int count = std::min(cfg.batch_size, train.n() - start);
      Batch batch = gather(train, order, start, count);
      ForwardCache cache;
      Tensor4 logits = forward_logits(net, batch.x, cfg.block_opts, &cache);
      Tensor4 dlogits;
      const double loss = softmax_ce(logits, batch.labels, &dlogits);
      result.final_loss = loss;
      if (!std::isfinite(loss)) {
        result.diverged = true;
        result.epochs_run = epoch;
        return result;
      }
      NetGrads grads = backward(net, batch.x, cache, dlogits, cfg.block_opts);

      sgd_step(net.stem.weights.data(), vel.stem_w.data(), grads.stem_w.data(),
               net.stem.weights.size(), cfg.learning_rate, cfg.momentum);
      for (std::size_t b = 0; b < net.blocks.size(); ++b) {
        double* v = vel.block_params[b].data();
        for (std::size_t p = 0; p < net.blocks[b].params.size(); ++p) {
          Tensor4& w = net.blocks[b].params[p].value;
          sgd_step(w.data(), v, grads.blocks[b].grad_params[p].value.data(), w.size(),
                   cfg.learning_rate, cfg.momentum);
          v += w.size();
        }
      }
      for (std::size_t s = 0; s < net.downsamples.size(); ++s)
        sgd_step(net.downsamples[s].weights.data(), vel.ds_w[s].data(), grads.ds_w[s].data(),
                 net.downsamples[s].weights.size(), cfg.learning_rate, cfg.momentum);
      sgd_step(net.head.weights.data(), vel.head_w.data(), grads.head_w.data(),
               net.head.weights.size(), cfg.learning_rate, cfg.momentum);
      sgd_step(net.head.bias->data(), vel.head_b.data(), grads.head_b.data(),
               static_cast<std::int64_t>(vel.head_b.size()), cfg.learning_rate, cfg.momentum);
    }
    result.epochs_run = epoch + 1;
  }
  return result;
}

double network_loss(const Network& net, const Dataset& ds, int batch_size,
                    const BlockOptions& opts) {
  if (ds.n() < 1) throw std::invalid_argument("loss: dataset is empty");
  std::vector<int> order(static_cast<std::size_t>(ds.n()));
  for (int i = 0; i < ds.n(); ++i) order[static_cast<std::size_t>(i)] = i;
  double total = 0.0;
  for (int start = 0; start < ds.n(); start += batch_size) {
    const int count = std::min(batch_size, ds.n() - start);
    Batch batch = gather(ds, order, start, count);
    total += softmax_ce(network_logits(net, batch.x, opts), batch.labels, nullptr) * count;
  }
  return total / ds.n();
}

double evaluate_error_pct(const Network& net, const Dataset& eval_set, int batch_size,
                          const BlockOptions& opts) {
  if (eval_set.n() < 1) throw std::invalid_argument("evaluate: dataset is empty");
  std::vector<int> order(static_cast<std::size_t>(eval_set.n()));
  for (int i = 0; i < eval_set.n(); ++i) order[static_cast<std::size_t>(i)] = i;
  int miss = 0;
  for (int start = 0; start < eval_set.n(); start += batch_size) {
    const int count = std::min(batch_size, eval_set.n() - start);
    Batch batch = gather(eval_set, order, start, count);
    Tensor4 logits = network_logits(net, batch.x, opts);
    Tensor4 pred = argmax_over_channels(logits);
    for (int i = 0; i < count; ++i)
      if (static_cast<int>(pred.at(i, 0, 0, 0)) != batch.labels[static_cast<std::size_t>(i)]) ++miss;
  }
  return 100.0 * miss / eval_set.n();
}

}  // namespace sepconv
