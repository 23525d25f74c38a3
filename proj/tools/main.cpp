#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sepconv/equivalence.hpp"
#include "sepconv/experiment.hpp"
#include "sepconv/svg.hpp"

namespace {

using namespace sepconv;

std::vector<std::string> split_pairs(const std::string& arg) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= arg.size()) {
    const std::size_t comma = arg.find(',', start);
    const std::size_t end = comma == std::string::npos ? arg.size() : comma;
    if (end > start) out.push_back(arg.substr(start, end - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

EquivalenceReport run_pair(const std::string& pair, int cases, std::optional<double> tol,
                           std::uint64_t seed) {
  SweepOptions opts;
  opts.cases = cases;
  opts.seed = seed;
  if (pair == "depthwise:grouped") {
    opts.tolerance = tol.value_or(1e-12);
    return sweep_depthwise_grouped(opts);
  }
  BlockSpec src;
  BlockKind dst;
  if (pair == "separable:reformulation") {
    src.kind = BlockKind::Separable;
    dst = BlockKind::SepReformulation;
    opts.tolerance = tol.value_or(1e-12);
  } else if (pair == "separable:hybrid") {
    src.kind = BlockKind::Separable;
    dst = BlockKind::HybridInterpretation;
    opts.tolerance = tol.value_or(1e-10);
  } else if (pair == "separable:relu-variant") {
    src.kind = BlockKind::Separable;
    dst = BlockKind::SeparableIntermediateRelu;
    opts.tolerance = tol.value_or(1e-10);
  } else if (pair == "resnext:grouped") {
    src.kind = BlockKind::ResNeXt;
    src.cardinality = 2;  // divides every channel count in the sweep grid
    dst = BlockKind::ResNeXtGrouped;
    opts.tolerance = tol.value_or(1e-10);
  } else {
    throw std::invalid_argument("unknown pair '" + pair +
                                "' (known: depthwise:grouped, separable:reformulation, "
                                "separable:hybrid, separable:relu-variant, resnext:grouped)");
  }
  return sweep_equivalence(src, dst, opts);
}

int cmd_verify(const std::string& pairs_arg, int cases, std::optional<double> tol,
               std::uint64_t seed, const std::string& out_path) {
  std::vector<std::string> names;
  if (pairs_arg == "all") {
    names = {"depthwise:grouped", "separable:reformulation", "separable:hybrid",
             "resnext:grouped"};
  } else {
    names = split_pairs(pairs_arg);
    if (names.empty()) throw std::invalid_argument("--pairs names no pair");
  }
  std::vector<EquivalenceReport> reports;
  reports.reserve(names.size());
  for (const auto& name : names) reports.push_back(run_pair(name, cases, tol, seed));

  bool all_pass = true;
  for (const auto& r : reports) {
    all_pass = all_pass && r.pass;
    std::cout << r.pair << ": cases=" << r.cases << " max_abs_diff=" << format_g17(r.max_abs_diff)
              << " max_rel_diff=" << format_g17(r.max_rel_diff) << " tol=" << r.tolerance
              << (r.pass ? " PASS" : " FAIL") << "\n";
  }
  if (!out_path.empty()) {
    std::string csv = kEquivalenceCsvHeader;
    csv += '\n';
    for (const auto& r : reports) csv += r.csv_row() + '\n';
    write_text_file(out_path, csv);
  }
  return all_pass ? 0 : 1;
}

int cmd_gradcheck(const std::string& kinds_arg, double eps, double tol, std::uint64_t seed) {
  std::vector<BlockKind> kinds;
  if (kinds_arg == "all") {
    kinds.assign(std::begin(kAllBlockKinds), std::end(kAllBlockKinds));
  } else {
    for (const auto& name : split_pairs(kinds_arg)) {
      BlockKind kind;
      if (!block_kind_from_string(name, kind))
        throw std::invalid_argument("unknown block kind '" + name + "'");
      kinds.push_back(kind);
    }
    if (kinds.empty()) throw std::invalid_argument("--kinds names no kind");
  }
  bool all_pass = true;
  for (const BlockKind kind : kinds) {
    BlockSpec spec;
    spec.kind = kind;
    spec.c_in = 4;
    spec.c_out = 4;
    const GradCheckReport report = gradcheck(spec, eps, tol, seed);
    all_pass = all_pass && report.pass;
    std::cout << to_string(kind) << ": max_rel_err=" << format_g17(report.max_rel_err)
              << " tol=" << tol << (report.pass ? " PASS" : " FAIL") << "\n";
  }
  return all_pass ? 0 : 1;
}

int cmd_experiment(const std::string& config_path, const std::string& out_dir, bool deterministic,
                   bool shared_init, std::optional<int> jobs) {
  ExperimentConfig cfg = parse_config_file(config_path);
  if (deterministic) cfg.deterministic = true;
  if (shared_init) cfg.shared_init = true;
  if (jobs) cfg.jobs = *jobs;
  cfg.validate();

  const ProtocolResult result = run_protocol(cfg);

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path out(out_dir);
  write_text_file((out / "results.csv").string(), results_csv(result));
  write_text_file((out / "summary.csv").string(), summary_csv(result, cfg));
  write_text_file((out / "manifest.txt").string(), manifest_text(cfg, result));

  bool any_dead = false;
  for (const auto& row : result.summary) {
    std::cout << to_string(row.setup) << ": mean_abs_diff_pct=" << format_g17(row.mean_abs_diff_pct)
              << " std=" << format_g17(row.std_abs_diff_pct) << " trials_used=" << row.trials_used
              << " diverged=" << row.diverged << "\n";
    if (row.trials_used == 0) any_dead = true;
  }
  std::cout << "wrote " << (out / "results.csv").string() << ", " << (out / "summary.csv").string()
            << ", " << (out / "manifest.txt").string() << "\n";
  return any_dead ? 1 : 0;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir,
               std::optional<int> trials, std::optional<int> jobs) {
  ExperimentConfig cfg = parse_config_file(config_path);
  if (trials) cfg.trials = *trials;
  if (jobs) cfg.jobs = *jobs;
  cfg.validate();

  const AblationResult result = ablate_nonlinearity(cfg);

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path out(out_dir);
  write_text_file((out / "ablation.csv").string(), ablation_csv(result, cfg));

  std::cout << "pairs_used=" << result.pairs_used
            << " mean_plain_pct=" << format_g17(result.mean_plain_pct)
            << " mean_relu_pct=" << format_g17(result.mean_relu_pct)
            << " mean_diff_pct=" << format_g17(result.mean_diff_pct)
            << " relu_worse_count=" << result.relu_worse_count << "\n";
  std::cout << "wrote " << (out / "ablation.csv").string() << "\n";
  return result.pairs_used == 0 ? 1 : 0;
}

int cmd_report(const std::string& in_path, const std::string& svg_path) {
  std::ifstream f(in_path, std::ios::binary);
  if (!f) throw std::invalid_argument("cannot open " + in_path);
  std::ostringstream buf;
  buf << f.rdbuf();
  const auto rows = parse_summary_csv(buf.str());
  write_text_file(svg_path, render_summary_svg(rows));
  std::cout << "wrote " << svg_path << " (" << rows.size() << " bars)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"separable-convolution lab: equivalence sweeps, gradient audits, training protocol"};
  app.require_subcommand(1);

  auto* verify = app.add_subcommand("verify", "numerical equivalence sweeps between block forms");
  std::string pairs = "all";
  int cases = 100;
  double tol_value = 0.0;
  std::uint64_t verify_seed = 42;
  std::string verify_out;
  verify->add_option("--pairs", pairs, "'all' or comma list like separable:reformulation");
  verify->add_option("--cases", cases, "cases per pair")->check(CLI::PositiveNumber);
  auto* tol_flag = verify->add_option("--tol", tol_value, "override per-pair tolerance");
  verify->add_option("--seed", verify_seed, "sweep seed");
  verify->add_option("--out", verify_out, "write a report CSV here");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient audit per block kind");
  std::string kinds = "all";
  double eps = 1e-5;
  double grad_tol = 1e-6;
  std::uint64_t grad_seed = 42;
  grad->add_option("--kinds", kinds, "'all' or comma list of block kinds");
  grad->add_option("--eps", eps, "central-difference step");
  grad->add_option("--tol", grad_tol, "max relative error allowed");
  grad->add_option("--seed", grad_seed, "weight/input seed");

  auto* exp = app.add_subcommand("experiment", "train per-setup trials and summarize vs baseline");
  std::string exp_config, exp_out;
  bool exp_det = false, exp_shared = false;
  int exp_jobs = 0;
  exp->add_option("--config", exp_config, "experiment config file")->required();
  exp->add_option("--out", exp_out, "output directory")->required();
  exp->add_flag("--deterministic", exp_det, "force fixed-order reductions");
  exp->add_flag("--shared-init", exp_shared, "weight-map the baseline init into mapped setups");
  auto* exp_jobs_flag = exp->add_option("--jobs", exp_jobs, "worker cap for trials");

  auto* abl = app.add_subcommand("ablate", "paired intermediate-nonlinearity ablation");
  std::string abl_config, abl_out;
  int abl_trials = 0, abl_jobs = 0;
  abl->add_option("--config", abl_config, "experiment config file")->required();
  abl->add_option("--out", abl_out, "output directory")->required();
  auto* abl_trials_flag = abl->add_option("--trials", abl_trials, "override trial count");
  auto* abl_jobs_flag = abl->add_option("--jobs", abl_jobs, "worker cap for trials");

  auto* rep = app.add_subcommand("report", "render a summary CSV as an SVG bar chart");
  std::string rep_in, rep_svg;
  rep->add_option("--in", rep_in, "summary CSV path")->required();
  rep->add_option("--svg", rep_svg, "SVG output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (verify->parsed()) {
      std::optional<double> tol;
      if (tol_flag->count() > 0) tol = tol_value;
      return cmd_verify(pairs, cases, tol, verify_seed, verify_out);
    }
    if (grad->parsed()) return cmd_gradcheck(kinds, eps, grad_tol, grad_seed);
    if (exp->parsed()) {
      std::optional<int> jobs;
      if (exp_jobs_flag->count() > 0) jobs = exp_jobs;
      return cmd_experiment(exp_config, exp_out, exp_det, exp_shared, jobs);
    }
    if (abl->parsed()) {
      std::optional<int> trials, jobs;
      if (abl_trials_flag->count() > 0) trials = abl_trials;
      if (abl_jobs_flag->count() > 0) jobs = abl_jobs;
      return cmd_ablate(abl_config, abl_out, trials, jobs);
    }
    if (rep->parsed()) return cmd_report(rep_in, rep_svg);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
