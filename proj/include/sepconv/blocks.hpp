#pragma once
// The competing block formulations and the weight mappings between them.
//
// A separable convolution (depthwise k x k followed by pointwise 1x1) is the
// baseline. The other kinds are the interpretations it is compared against:
//
//   Separable                  depthwise(k x k) -> pointwise(1x1)
//   SeparableIntermediateRelu  depthwise -> relu -> pointwise
//   SepReformulation           conv(groups = c_in, k x k) -> conv(1x1)
//   Inception                  `towers` parallel [1x1 reduce -> k x k conv],
//                              concatenated along channels
//   ReformulatedInception      shared 1x1 -> grouped k x k (groups = towers)
//   ResNeXt                    `cardinality` paths, each a k x k conv on its
//                              contiguous input channel slab, concat + 1x1
//                              projection, optional identity skip
//   ResNeXtGrouped             the single grouped-conv execution of ResNeXt
//                              (grouped k x k -> 1x1 projection)
//   HybridInterpretation       c_in single-channel k x k paths, merged per
//                              output channel by a scalar weight matrix,
//                              optional identity skip
//
// Weight mappings exist between Separable and {SepReformulation,
// HybridInterpretation, SeparableIntermediateRelu} (verbatim copies) and
// between ResNeXt and ResNeXtGrouped (per-path kernels stacked as the
// block-diagonal of the grouped weights). Blocks are bias-free; spatial
// convs use same-padding (kernel-1)/2, so odd kernels are required.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "sepconv/tensor.hpp"

namespace sepconv {

enum class BlockKind {
  Separable,
  SeparableIntermediateRelu,
  SepReformulation,
  Inception,
  ReformulatedInception,
  ResNeXt,
  ResNeXtGrouped,
  HybridInterpretation,
};

inline constexpr BlockKind kAllBlockKinds[] = {
    BlockKind::Separable,        BlockKind::SeparableIntermediateRelu,
    BlockKind::SepReformulation, BlockKind::Inception,
    BlockKind::ReformulatedInception, BlockKind::ResNeXt,
    BlockKind::ResNeXtGrouped,   BlockKind::HybridInterpretation,
};

const char* to_string(BlockKind kind);
// Accepts the canonical names: separable, relu-variant, reformulation,
// inception, reformulated-inception, resnext, resnext-grouped, hybrid.
bool block_kind_from_string(std::string_view name, BlockKind& out);

struct BlockSpec {
  BlockKind kind = BlockKind::Separable;
  int c_in = 0;
  int c_out = 0;
  int kernel = 3;
  int stride = 1;
  int cardinality = 0;  // 0 = defaults to c_in
  int towers = 4;
  bool residual = false;

  int padding() const { return (kernel - 1) / 2; }
  int effective_cardinality() const { return cardinality > 0 ? cardinality : c_in; }
  // Throws std::invalid_argument on any violated invariant.
  void validate() const;
};

struct Param {
  std::string name;
  Tensor4 value;
};

struct Block {
  BlockSpec spec;
  std::vector<Param> params;

  const Tensor4& param(std::string_view name) const;
  Tensor4& param(std::string_view name);
  std::int64_t parameter_count() const;
};

// Parameter shapes and order are fully determined by the spec; values are
// He-initialized (normal with stddev sqrt(2 / fan_in)) from the given Prng
// in declaration order, so one seed yields one parameter set.
Block build_block(const BlockSpec& spec, Prng& prng);

// Same layout as build_block with all parameters zero.
Block make_block_shell(const BlockSpec& spec);

// Overwrites every parameter with draws ~ normal(0, stddev) in declaration
// order (equivalence sweeps use this instead of He scaling).
void randomize_params(Block& block, Prng& prng, double stddev);

// Intermediate activations captured by a forward pass; block_backward can
// consume them to avoid recomputing the forward graph.
struct BlockTrace {
  std::vector<Tensor4> vals;
};

struct BlockOptions {
  // Test hook: run every block-internal ReLU as the identity.
  bool relu_as_identity = false;
};

Tensor4 block_forward(const Block& block, const Tensor4& x, BlockTrace* trace = nullptr,
                      const BlockOptions& opts = {});

struct BlockGrads {
  Tensor4 grad_x;  // default-constructed when need_grad_x is false
  std::vector<Param> grad_params;
};

BlockGrads block_backward(const Block& block, const Tensor4& x, const Tensor4& grad_out,
                          const BlockTrace& trace, const BlockOptions& opts = {},
                          bool need_grad_x = true);
// Convenience form that recomputes the forward trace internally.
BlockGrads block_backward(const Block& block, const Tensor4& x, const Tensor4& grad_out,
                          const BlockOptions& opts = {}, bool need_grad_x = true);

// Returns a dst-kind block whose forward equals src's forward on every input
// (up to float summation order). Supported pairs: Separable <->
// {SepReformulation, HybridInterpretation, SeparableIntermediateRelu} and
// ResNeXt <-> ResNeXtGrouped. Note the Separable -> relu-variant copy shares
// weights but is NOT an equivalence; it exists so the broken pair can be
// swept and shown to fail.
Block map_weights(const Block& src, BlockKind dst_kind);
bool mapping_supported(BlockKind src, BlockKind dst);

// Flat binary parameter container: magic "SCLB", version u16 LE, then per
// parameter: name length u16 LE, UTF-8 name, 4 extents u32 LE, payload as
// little-endian binary64 in flat order.
void save_block_params(const Block& block, std::ostream& out);
std::vector<Param> load_block_params(std::istream& in);
void save_block_params_file(const Block& block, const std::string& path);
std::vector<Param> load_block_params_file(const std::string& path);
// Copies loaded values into a built block; names and shapes must match.
void apply_params(Block& block, const std::vector<Param>& params);

}  // namespace sepconv
