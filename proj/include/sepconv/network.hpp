#pragma once
// Stacked-block classifier: a 3x3 stem conv, three stages of blocks at
// widths (base, 2*base, 4*base) joined by stride-2 1x1 downsample convs,
// then global average pooling and a linear head. ReLU follows the stem,
// every block, and every downsample; blocks are internally linear except
// the intermediate-ReLU variant. Training is plain minibatch SGD with
// momentum on softmax cross-entropy, with a fixed batch order per epoch
// drawn from the given seed, and every floating-point reduction in the
// whole pass runs in a fixed order, so one seed gives one bit-exact
// trajectory.

#include <cstdint>
#include <vector>

#include "sepconv/blocks.hpp"
#include "sepconv/conv.hpp"
#include "sepconv/data.hpp"

namespace sepconv {

struct NetworkSpec {
  BlockKind block_kind = BlockKind::Separable;
  int base_width = 16;
  int depth_per_stage = 1;
  int in_channels = 3;
  int num_classes = 10;
  int kernel = 3;
  int towers = 4;
  // Applied to the ResNeXt-family kinds only (0 = per-kind default).
  int cardinality = 0;
  bool residual = false;

  int stage_width(int stage) const { return base_width << stage; }
  void validate() const;
};

struct Network {
  NetworkSpec spec;
  ConvParams stem;
  std::vector<Block> blocks;  // depth_per_stage per stage, stage-major
  std::vector<ConvParams> downsamples;  // two, between the three stages
  ConvParams head;  // 1x1 conv with bias on the pooled features

  std::int64_t parameter_count() const;
};

// Per-component sub-seeds are derived from init_seed with fixed salts, so
// stem, downsamples, and head coincide across block kinds given one seed.
Network build_network(const NetworkSpec& spec, std::uint64_t init_seed);

// Logits of shape (n, num_classes, 1, 1).
Tensor4 network_logits(const Network& net, const Tensor4& x, const BlockOptions& opts = {});

struct TrainConfig {
  int epochs = 15;
  int batch_size = 32;
  double learning_rate = 0.02;
  double momentum = 0.9;
  std::uint64_t batch_seed = 0;
  BlockOptions block_opts;
};

struct TrainResult {
  bool diverged = false;
  int epochs_run = 0;
  double final_loss = 0.0;
};

// Mutates net in place; aborts with diverged=true the moment a batch loss
// is non-finite.
TrainResult train_network(Network& net, const Dataset& train, const TrainConfig& cfg);

// Mean softmax cross-entropy over a dataset (no training).
double network_loss(const Network& net, const Dataset& ds, int batch_size = 64,
                    const BlockOptions& opts = {});

// 100 * misclassified / n under argmax-over-logits prediction.
double evaluate_error_pct(const Network& net, const Dataset& eval_set, int batch_size = 64,
                          const BlockOptions& opts = {});

}  // namespace sepconv
