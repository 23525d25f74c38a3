#pragma once
// Experiment harness: trains one stacked-block classifier per (setup,
// trial), reproduces the |delta test error|-vs-baseline protocol averaged
// over trials, and the intermediate-nonlinearity ablation. Within one trial
// every setup sees the identical train/eval split, batch order, and init
// seed; with shared_init the baseline's initial block weights are
// weight-mapped into every setup a mapping exists for. All reductions run
// in fixed order, so a re-run with the same config reproduces every number
// bitwise.

#include <cstdint>
#include <string>
#include <vector>

#include "sepconv/blocks.hpp"
#include "sepconv/data.hpp"
#include "sepconv/network.hpp"

namespace sepconv {

struct DatasetConfig {
  bool synthetic = true;
  std::vector<std::string> cifar_train_paths;
  std::vector<std::string> cifar_eval_paths;
  int classes = 10;
  int h = 16;
  int w = 16;
  // Pixel noise swamping most of the sinusoid signal; spatial averaging
  // makes anything much below 2.0 trivially separable (0% test error),
  // which would collapse every |delta| row to zero.
  double noise = 2.0;
};

struct ExperimentConfig {
  std::vector<BlockKind> setups = {
      BlockKind::Separable,        BlockKind::Inception,
      BlockKind::ResNeXt,          BlockKind::ReformulatedInception,
      BlockKind::SepReformulation, BlockKind::HybridInterpretation,
  };
  int trials = 10;
  int epochs = 15;
  int batch_size = 32;
  double learning_rate = 0.02;
  double momentum = 0.9;
  std::uint64_t seed_base = 1;
  DatasetConfig dataset;
  int n_train = 2000;
  int n_eval = 1000;
  bool deterministic = true;
  bool shared_init = false;
  int base_width = 16;
  int depth_per_stage = 1;
  int towers = 4;
  int cardinality = 4;
  int jobs = 1;

  void validate() const;
};

// Flat `key = value` lines, `#` comments, unknown or duplicate keys are
// errors; `setups` is a comma-separated list of kind names, `dataset` is
// `synthetic` or `cifar10` (with `cifar10_train` / `cifar10_eval` path
// lists). Throws std::invalid_argument with the offending line.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

// Full config echo in a fixed key order; parsing it back yields the same
// config. The FNV-1a hash of this text is the config hash stamped into
// every output file.
std::string canonical_config_text(const ExperimentConfig& cfg);
std::uint64_t config_hash(const ExperimentConfig& cfg);

struct TrialResult {
  BlockKind setup = BlockKind::Separable;
  int trial = 0;
  std::uint64_t seed = 0;
  double test_error_pct = 0.0;
  bool diverged = false;
};

struct SetupSummary {
  BlockKind setup = BlockKind::Separable;
  double mean_abs_diff_pct = 0.0;
  double std_abs_diff_pct = 0.0;  // population std over used trials
  int trials_used = 0;
  int diverged = 0;
};

struct ProtocolResult {
  std::vector<TrialResult> trials;  // setup-major, trial order within
  std::vector<SetupSummary> summary;
};

ProtocolResult run_protocol(const ExperimentConfig& cfg);

struct AblationPair {
  int trial = 0;
  std::uint64_t seed = 0;
  double plain_error_pct = 0.0;
  double relu_error_pct = 0.0;
  bool diverged = false;  // either side diverged
};

struct AblationResult {
  std::vector<AblationPair> pairs;
  double mean_plain_pct = 0.0;
  double mean_relu_pct = 0.0;
  double mean_diff_pct = 0.0;  // relu - plain over used pairs
  int pairs_used = 0;
  int relu_worse_count = 0;  // pairs with relu_error >= plain_error
};

// Paired separable vs intermediate-ReLU trials on shared seeds and splits.
// relu_as_identity is a test hook that turns every block-internal ReLU
// into the identity, collapsing the two kinds onto the same function.
AblationResult ablate_nonlinearity(const ExperimentConfig& cfg, bool relu_as_identity = false);

inline constexpr const char* kResultsCsvHeader = "setup,trial,seed,test_error_pct";
inline constexpr const char* kSummaryCsvHeader =
    "setup,mean_abs_diff_pct,std_abs_diff_pct,trials_used,diverged";
inline constexpr const char* kAblationCsvHeader =
    "trial,seed,plain_error_pct,relu_error_pct,diff_pct";

// Converged rows only; diverged trials are listed in the manifest and
// counted in the summary's diverged column.
std::string results_csv(const ProtocolResult& result);
// Leading `# key = value` provenance comments (seed_base, config hash),
// then the schema header and one row per setup in setup order.
std::string summary_csv(const ProtocolResult& result, const ExperimentConfig& cfg);
std::string ablation_csv(const AblationResult& result, const ExperimentConfig& cfg);
std::string manifest_text(const ExperimentConfig& cfg, const ProtocolResult& result);

void write_text_file(const std::string& path, const std::string& text);
std::string format_g17(double v);

}  // namespace sepconv
