#pragma once
// Verification engine: numerical equivalence sweeps between mapped block
// formulations, the depthwise/grouped kernel identity sweep, and
// finite-difference gradient audits. All sweeps are deterministic given
// their seed and aggregate in case-index order, so reports reproduce
// bitwise.

#include <cstdint>
#include <string>
#include <vector>

#include "sepconv/blocks.hpp"

namespace sepconv {

struct EquivalenceReport {
  std::string pair;  // "src:dst" canonical kind names
  int cases = 0;
  double max_abs_diff = 0.0;
  double mean_abs_diff = 0.0;
  double max_rel_diff = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::uint64_t seed = 0;

  std::string csv_row() const;
};

inline constexpr const char* kEquivalenceCsvHeader =
    "pair,cases,max_abs_diff,mean_abs_diff,max_rel_diff,tolerance,verdict,seed";

struct SweepOptions {
  int cases = 100;
  double tolerance = 1e-12;
  std::uint64_t seed = 42;
  // Sweep weights are drawn ~ normal(0, weight_stddev), not He-scaled.
  double weight_stddev = 1.0;
  // When set, case i cycles channels/sizes/strides/kernels through the
  // grids below; when clear, every case uses src_spec's dims as given.
  bool vary_shapes = true;
  std::vector<int> channels = {2, 4, 8};
  std::vector<int> sizes = {5, 8};
  std::vector<int> strides = {1, 2};
  std::vector<int> kernels = {1, 3};
};

// For each case: fresh seeded weights and a fresh ~N(0,1) input, src block
// forward vs map_weights(src, dst_kind) forward, diffs accumulated.
EquivalenceReport sweep_equivalence(const BlockSpec& src_spec, BlockKind dst_kind,
                                    const SweepOptions& opts);
EquivalenceReport sweep_equivalence(const BlockSpec& src_spec, BlockKind dst_kind, int cases,
                                    double tol, std::uint64_t seed);

// Kernel-level sweep of the depthwise-grouped identity:
// depthwise_conv2d(x, W) vs conv2d(x, groups = c_in, same W).
EquivalenceReport sweep_depthwise_grouped(const SweepOptions& opts);

struct GradCheckEntry {
  std::string name;  // parameter name, or "input"
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  BlockKind kind = BlockKind::Separable;
  double eps = 0.0;
  double tol = 0.0;
  std::uint64_t seed = 0;
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool pass = false;
};

// Central finite differences of the scalar loss sum(forward(x)^2) against
// the analytic backward, per parameter scalar and per input scalar, on a
// fixed (2, c_in, 6, 6) input shifted by +0.01 to stay clear of ReLU kinks.
// Relative error is |fd - analytic| / max(1, |fd|, |analytic|). Throws if
// eps <= 0 or the block exceeds the 1e4-parameter finite-differencing
// budget.
GradCheckReport gradcheck(const BlockSpec& spec, double eps, double tol, std::uint64_t seed);

}  // namespace sepconv
