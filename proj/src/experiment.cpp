#include "sepconv/experiment.hpp"

#include <atomic>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace sepconv {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t comma = s.find(',', start);
    const std::size_t end = comma == std::string::npos ? s.size() : comma;
    const std::string item = trim(s.substr(start, end - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw std::invalid_argument("config: bad unsigned integer for " + key + ": '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size() || v.empty())
    throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("config: bad flag for " + key + ": '" + v + "' (want true/false)");
}

std::vector<BlockKind> parse_setups(const std::string& v) {
  std::vector<BlockKind> out;
  for (const auto& name : split_list(v)) {
    BlockKind kind;
    if (!block_kind_from_string(name, kind))
      throw std::invalid_argument("config: unknown block kind '" + name + "'");
    for (const BlockKind seen : out)
      if (seen == kind) throw std::invalid_argument("config: duplicate setup '" + name + "'");
    out.push_back(kind);
  }
  if (out.empty()) throw std::invalid_argument("config: setups must name at least one kind");
  return out;
}

std::string join_kinds(const std::vector<BlockKind>& kinds) {
  std::string out;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    if (i) out += ',';
    out += to_string(kinds[i]);
  }
  return out;
}

std::string join_strings(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ',';
    out += items[i];
  }
  return out;
}

NetworkSpec net_spec_for(const ExperimentConfig& cfg, BlockKind kind) {
  NetworkSpec s;
  s.block_kind = kind;
  s.base_width = cfg.base_width;
  s.depth_per_stage = cfg.depth_per_stage;
  s.towers = cfg.towers;
  s.cardinality = cfg.cardinality;
  s.num_classes = cfg.dataset.synthetic ? cfg.dataset.classes : 10;
  return s;
}

struct TrialSeeds {
  std::uint64_t trial_seed;
  std::uint64_t split_seed;
  std::uint64_t data_seed;
  std::uint64_t init_seed;
  std::uint64_t batch_seed;
};

TrialSeeds seeds_for(std::uint64_t seed_base, int trial) {
  const std::uint64_t ts = seed_base + static_cast<std::uint64_t>(trial);
  return {ts, derive_seed(ts, 1), derive_seed(ts, 2), derive_seed(ts, 3), derive_seed(ts, 4)};
}

struct TrialData {
  Dataset train;
  Dataset eval;
};

TrialData make_trial_data(const ExperimentConfig& cfg, const Dataset* train_pool,
                          const Dataset* eval_pool, const TrialSeeds& seeds) {
  if (cfg.dataset.synthetic) {
    const Dataset pool =
        synthetic_dataset(cfg.n_train + cfg.n_eval, cfg.dataset.classes, cfg.dataset.h,
                          cfg.dataset.w, cfg.dataset.noise, seeds.data_seed);
    auto [train, eval] = sample_split(pool, cfg.n_train, cfg.n_eval, seeds.split_seed);
    return {std::move(train), std::move(eval)};
  }
  TrialData data;
  data.train = sample_split(*train_pool, cfg.n_train, 0, seeds.split_seed).first;
  data.eval = sample_split(*eval_pool, 0, cfg.n_eval, derive_seed(seeds.split_seed, 1)).second;
  return data;
}

void for_each_trial(int trials, int jobs, const std::function<void(int)>& body) {
  if (jobs <= 1 || trials <= 1) {
    for (int t = 0; t < trials; ++t) body(t);
    return;
  }
  std::atomic<int> next{0};
  const int workers = std::min(jobs, trials);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int t = next.fetch_add(1); t < trials; t = next.fetch_add(1)) body(t);
    });
  for (auto& th : pool) th.join();
}

}  // namespace

void ExperimentConfig::validate() const {
  if (setups.empty()) throw std::invalid_argument("config: setups must name at least one kind");
  if (trials < 1) throw std::invalid_argument("config: trials must be >= 1");
  if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (learning_rate < 0.0) throw std::invalid_argument("config: learning_rate must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0)
    throw std::invalid_argument("config: momentum must be in [0, 1)");
  if (n_train < 1 || n_eval < 1)
    throw std::invalid_argument("config: n_train and n_eval must be >= 1");
  if (base_width < 1) throw std::invalid_argument("config: base_width must be >= 1");
  if (depth_per_stage < 1) throw std::invalid_argument("config: depth_per_stage must be >= 1");
  if (towers < 1) throw std::invalid_argument("config: towers must be >= 1");
  if (cardinality < 0) throw std::invalid_argument("config: cardinality must be >= 0");
  if (jobs < 1) throw std::invalid_argument("config: jobs must be >= 1");
  if (dataset.synthetic) {
    if (dataset.classes < 2 || dataset.classes > 10)
      throw std::invalid_argument("config: synthetic_classes must be in [2, 10]");
    if (dataset.h < 1 || dataset.w < 1)
      throw std::invalid_argument("config: synthetic dims must be positive");
    if (dataset.noise < 0.0) throw std::invalid_argument("config: synthetic_noise must be >= 0");
  } else {
    if (dataset.cifar_train_paths.empty() || dataset.cifar_eval_paths.empty())
      throw std::invalid_argument("config: cifar10 dataset needs cifar10_train and cifar10_eval");
  }
}

ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + stripped + "'");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    if (!seen.insert(key).second)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": duplicate key '" +
                                  key + "'");
    if (key == "setups") cfg.setups = parse_setups(value);
    else if (key == "trials") cfg.trials = parse_int(key, value);
    else if (key == "epochs") cfg.epochs = parse_int(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_int(key, value);
    else if (key == "learning_rate") cfg.learning_rate = parse_double(key, value);
    else if (key == "momentum") cfg.momentum = parse_double(key, value);
    else if (key == "seed_base") cfg.seed_base = parse_u64(key, value);
    else if (key == "dataset") {
      if (value == "synthetic") cfg.dataset.synthetic = true;
      else if (value == "cifar10") cfg.dataset.synthetic = false;
      else throw std::invalid_argument("config: dataset must be synthetic or cifar10, got '" + value + "'");
    }
    else if (key == "synthetic_classes") cfg.dataset.classes = parse_int(key, value);
    else if (key == "synthetic_h") cfg.dataset.h = parse_int(key, value);
    else if (key == "synthetic_w") cfg.dataset.w = parse_int(key, value);
    else if (key == "synthetic_noise") cfg.dataset.noise = parse_double(key, value);
    else if (key == "cifar10_train") cfg.dataset.cifar_train_paths = split_list(value);
    else if (key == "cifar10_eval") cfg.dataset.cifar_eval_paths = split_list(value);
    else if (key == "n_train") cfg.n_train = parse_int(key, value);
    else if (key == "n_eval") cfg.n_eval = parse_int(key, value);
    else if (key == "deterministic") cfg.deterministic = parse_bool(key, value);
    else if (key == "shared_init") cfg.shared_init = parse_bool(key, value);
    else if (key == "base_width") cfg.base_width = parse_int(key, value);
    else if (key == "depth_per_stage") cfg.depth_per_stage = parse_int(key, value);
    else if (key == "towers") cfg.towers = parse_int(key, value);
    else if (key == "cardinality") cfg.cardinality = parse_int(key, value);
    else if (key == "jobs") cfg.jobs = parse_int(key, value);
    else throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_config_text(buf.str());
}

std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string canonical_config_text(const ExperimentConfig& cfg) {
  std::string out;
  out += "setups = " + join_kinds(cfg.setups) + "\n";
  out += "trials = " + std::to_string(cfg.trials) + "\n";
  out += "epochs = " + std::to_string(cfg.epochs) + "\n";
  out += "batch_size = " + std::to_string(cfg.batch_size) + "\n";
  out += "learning_rate = " + format_g17(cfg.learning_rate) + "\n";
  out += "momentum = " + format_g17(cfg.momentum) + "\n";
  out += "seed_base = " + std::to_string(cfg.seed_base) + "\n";
  out += std::string("dataset = ") + (cfg.dataset.synthetic ? "synthetic" : "cifar10") + "\n";
  out += "synthetic_classes = " + std::to_string(cfg.dataset.classes) + "\n";
  out += "synthetic_h = " + std::to_string(cfg.dataset.h) + "\n";
  out += "synthetic_w = " + std::to_string(cfg.dataset.w) + "\n";
  out += "synthetic_noise = " + format_g17(cfg.dataset.noise) + "\n";
  if (!cfg.dataset.cifar_train_paths.empty())
    out += "cifar10_train = " + join_strings(cfg.dataset.cifar_train_paths) + "\n";
  if (!cfg.dataset.cifar_eval_paths.empty())
    out += "cifar10_eval = " + join_strings(cfg.dataset.cifar_eval_paths) + "\n";
  out += "n_train = " + std::to_string(cfg.n_train) + "\n";
  out += "n_eval = " + std::to_string(cfg.n_eval) + "\n";
  out += std::string("deterministic = ") + (cfg.deterministic ? "true" : "false") + "\n";
  out += std::string("shared_init = ") + (cfg.shared_init ? "true" : "false") + "\n";
  out += "base_width = " + std::to_string(cfg.base_width) + "\n";
  out += "depth_per_stage = " + std::to_string(cfg.depth_per_stage) + "\n";
  out += "towers = " + std::to_string(cfg.towers) + "\n";
  out += "cardinality = " + std::to_string(cfg.cardinality) + "\n";
  out += "jobs = " + std::to_string(cfg.jobs) + "\n";
  return out;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  const std::string text = canonical_config_text(cfg);
  std::uint64_t h = 14695981039346656037ull;
  for (const char ch : text) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ull;
  }
  return h;
}

ProtocolResult run_protocol(const ExperimentConfig& cfg) {
  cfg.validate();
  std::optional<Dataset> train_pool, eval_pool;
  if (!cfg.dataset.synthetic) {
    train_pool = load_cifar10(cfg.dataset.cifar_train_paths);
    eval_pool = load_cifar10(cfg.dataset.cifar_eval_paths);
  }

  const int S = static_cast<int>(cfg.setups.size());
  const int T = cfg.trials;
  std::vector<TrialResult> grid(static_cast<std::size_t>(S) * T);

  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.learning_rate = cfg.learning_rate;
  tc.momentum = cfg.momentum;

  auto run_trial = [&](int t) {
    const TrialSeeds seeds = seeds_for(cfg.seed_base, t);
    const TrialData data = make_trial_data(cfg, train_pool ? &*train_pool : nullptr,
                                           eval_pool ? &*eval_pool : nullptr, seeds);
    TrainConfig trial_tc = tc;
    trial_tc.batch_seed = seeds.batch_seed;

    Network baseline = build_network(net_spec_for(cfg, cfg.setups[0]), seeds.init_seed);
    const std::vector<Block> baseline_init = baseline.blocks;
    const TrainResult base_run = train_network(baseline, data.train, trial_tc);
    TrialResult& base_row = grid[static_cast<std::size_t>(t)];
    base_row.setup = cfg.setups[0];
    base_row.trial = t;
    base_row.seed = seeds.trial_seed;
    base_row.diverged = base_run.diverged;
    base_row.test_error_pct = base_run.diverged ? 0.0 : evaluate_error_pct(baseline, data.eval);

    for (int s = 1; s < S; ++s) {
      Network net = build_network(net_spec_for(cfg, cfg.setups[static_cast<std::size_t>(s)]),
                                  seeds.init_seed);
      if (cfg.shared_init &&
          mapping_supported(cfg.setups[0], cfg.setups[static_cast<std::size_t>(s)])) {
        for (std::size_t b = 0; b < net.blocks.size(); ++b)
          net.blocks[b] = map_weights(baseline_init[b], cfg.setups[static_cast<std::size_t>(s)]);
      }
      const TrainResult run = train_network(net, data.train, trial_tc);
      TrialResult& row = grid[static_cast<std::size_t>(s) * T + t];
      row.setup = cfg.setups[static_cast<std::size_t>(s)];
      row.trial = t;
      row.seed = seeds.trial_seed;
      row.diverged = run.diverged;
      row.test_error_pct = run.diverged ? 0.0 : evaluate_error_pct(net, data.eval);
    }
  };
  for_each_trial(T, cfg.jobs, run_trial);

  ProtocolResult result;
  result.trials = std::move(grid);
  for (int s = 0; s < S; ++s) {
    SetupSummary row;
    row.setup = cfg.setups[static_cast<std::size_t>(s)];
    std::vector<double> diffs;
    for (int t = 0; t < T; ++t) {
      const TrialResult& mine = result.trials[static_cast<std::size_t>(s) * T + t];
      const TrialResult& base = result.trials[static_cast<std::size_t>(t)];
      if (mine.diverged) ++row.diverged;
      if (mine.diverged || base.diverged) continue;
      diffs.push_back(std::fabs(mine.test_error_pct - base.test_error_pct));
    }
    row.trials_used = static_cast<int>(diffs.size());
    if (!diffs.empty()) {
      double sum = 0.0;
      for (const double d : diffs) sum += d;
      row.mean_abs_diff_pct = sum / static_cast<double>(diffs.size());
      double var = 0.0;
      for (const double d : diffs) {
        const double dd = d - row.mean_abs_diff_pct;
        var += dd * dd;
      }
      row.std_abs_diff_pct = std::sqrt(var / static_cast<double>(diffs.size()));
    }
    result.summary.push_back(row);
  }
  return result;
}

AblationResult ablate_nonlinearity(const ExperimentConfig& cfg, bool relu_as_identity) {
  cfg.validate();
  std::optional<Dataset> train_pool, eval_pool;
  if (!cfg.dataset.synthetic) {
    train_pool = load_cifar10(cfg.dataset.cifar_train_paths);
    eval_pool = load_cifar10(cfg.dataset.cifar_eval_paths);
  }

  AblationResult result;
  result.pairs.resize(static_cast<std::size_t>(cfg.trials));

  auto run_trial = [&](int t) {
    const TrialSeeds seeds = seeds_for(cfg.seed_base, t);
    const TrialData data = make_trial_data(cfg, train_pool ? &*train_pool : nullptr,
                                           eval_pool ? &*eval_pool : nullptr, seeds);
    TrainConfig tc;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.learning_rate = cfg.learning_rate;
    tc.momentum = cfg.momentum;
    tc.batch_seed = seeds.batch_seed;
    tc.block_opts.relu_as_identity = relu_as_identity;

    AblationPair& pair = result.pairs[static_cast<std::size_t>(t)];
    pair.trial = t;
    pair.seed = seeds.trial_seed;

    Network plain = build_network(net_spec_for(cfg, BlockKind::Separable), seeds.init_seed);
    const TrainResult plain_run = train_network(plain, data.train, tc);
    Network variant =
        build_network(net_spec_for(cfg, BlockKind::SeparableIntermediateRelu), seeds.init_seed);
    const TrainResult variant_run = train_network(variant, data.train, tc);
    pair.diverged = plain_run.diverged || variant_run.diverged;
    if (!pair.diverged) {
      pair.plain_error_pct = evaluate_error_pct(plain, data.eval, 64, tc.block_opts);
      pair.relu_error_pct = evaluate_error_pct(variant, data.eval, 64, tc.block_opts);
    }
  };
  for_each_trial(cfg.trials, cfg.jobs, run_trial);

  double sum_plain = 0.0, sum_relu = 0.0;
  for (const auto& pair : result.pairs) {
    if (pair.diverged) continue;
    ++result.pairs_used;
    sum_plain += pair.plain_error_pct;
    sum_relu += pair.relu_error_pct;
    if (pair.relu_error_pct >= pair.plain_error_pct) ++result.relu_worse_count;
  }
  if (result.pairs_used > 0) {
    result.mean_plain_pct = sum_plain / result.pairs_used;
    result.mean_relu_pct = sum_relu / result.pairs_used;
    result.mean_diff_pct = result.mean_relu_pct - result.mean_plain_pct;
  }
  return result;
}

std::string results_csv(const ProtocolResult& result) {
  std::string out = kResultsCsvHeader;
  out += '\n';
  for (const auto& row : result.trials) {
    if (row.diverged) continue;
    out += to_string(row.setup);
    out += ',' + std::to_string(row.trial);
    out += ',' + std::to_string(row.seed);
    out += ',' + format_g17(row.test_error_pct) + '\n';
  }
  return out;
}

namespace {

std::string provenance_comments(const ExperimentConfig& cfg) {
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(config_hash(cfg)));
  std::string out;
  out += "# seed_base = " + std::to_string(cfg.seed_base) + "\n";
  out += std::string("# config_hash = ") + hash + "\n";
  return out;
}

}  // namespace

std::string summary_csv(const ProtocolResult& result, const ExperimentConfig& cfg) {
  std::string out = provenance_comments(cfg);
  out += kSummaryCsvHeader;
  out += '\n';
  for (const auto& row : result.summary) {
    out += to_string(row.setup);
    out += ',' + format_g17(row.mean_abs_diff_pct);
    out += ',' + format_g17(row.std_abs_diff_pct);
    out += ',' + std::to_string(row.trials_used);
    out += ',' + std::to_string(row.diverged) + '\n';
  }
  return out;
}

std::string ablation_csv(const AblationResult& result, const ExperimentConfig& cfg) {
  std::string out = provenance_comments(cfg);
  out += kAblationCsvHeader;
  out += '\n';
  for (const auto& pair : result.pairs) {
    if (pair.diverged) continue;
    out += std::to_string(pair.trial);
    out += ',' + std::to_string(pair.seed);
    out += ',' + format_g17(pair.plain_error_pct);
    out += ',' + format_g17(pair.relu_error_pct);
    out += ',' + format_g17(pair.relu_error_pct - pair.plain_error_pct) + '\n';
  }
  return out;
}

std::string manifest_text(const ExperimentConfig& cfg, const ProtocolResult& result) {
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(config_hash(cfg)));
  std::string out;
  out += std::string("config_hash = ") + hash + "\n\n";
  out += "[config]\n";
  out += canonical_config_text(cfg);
  out += "\n[trial seeds]\n";
  for (int t = 0; t < cfg.trials; ++t) {
    const TrialSeeds s = seeds_for(cfg.seed_base, t);
    out += "trial " + std::to_string(t) + ": seed " + std::to_string(s.trial_seed) + " split " +
           std::to_string(s.split_seed) + " data " + std::to_string(s.data_seed) + " init " +
           std::to_string(s.init_seed) + " batch " + std::to_string(s.batch_seed) + "\n";
  }
  out += "\n[diverged]\n";
  bool any = false;
  for (const auto& row : result.trials) {
    if (!row.diverged) continue;
    any = true;
    out += std::string(to_string(row.setup)) + " trial " + std::to_string(row.trial) + "\n";
  }
  if (!any) out += "none\n";
  return out;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw std::runtime_error("write failed on " + path);
}

}  // namespace sepconv
