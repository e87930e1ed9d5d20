// teachcut: trajectory-specific release of dense distillation supervision.
//
//   teachcut release  --in rollouts.jsonl --out released.jsonl [--strategy bic|full|fixed:K|random]
//   teachcut diagnose --in rollouts.jsonl --out-dir diag/
//   teachcut simulate --out sim.jsonl --count 100 --n 20 --tau 10 --noise 0.1
//   teachcut permute  --in released.jsonl --out permuted.jsonl --seed 7
//   teachcut snr      --mp 1 --vp 1 --mr 0 --vr 1
//
// Exit status: 0 success, 1 usage error, 2 data error in --strict mode.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "teachcut/teachcut.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("teachcut");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("TEACHCUT_LOG")) {
    spdlog::set_level(spdlog::level::from_str(env));
  }
}

struct CommonFlags {
  std::string in;
  std::string out;
  std::size_t top_k = teachcut::kDefaultSupportSize;
  std::size_t bins = teachcut::kDefaultNumBins;
  double gain_threshold = teachcut::kDefaultGainThreshold;
  std::string segments = "record";
  bool probs = false;
  bool strict = false;
  std::size_t jobs = teachcut::default_jobs();
};

struct ReleaseFlags : CommonFlags {
  std::string strategy = "bic";
  std::optional<std::size_t> prefix_tokens;
  std::uint64_t seed = 0;
  std::string diag_dir;
};

struct SimulateFlags {
  std::string out;
  std::string ground_truth;
  std::size_t count = 100;
  teachcut::SyntheticConfig config;
  std::optional<std::size_t> tau;
  std::size_t jobs = teachcut::default_jobs();
};

struct SnrFlags {
  double mp = 0.0;
  double vp = 1.0;
  double mr = 0.0;
  double vr = 0.0;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_output_file) {
  cmd->add_option("--in", f.in, "Input rollout JSONL")->required()->check(CLI::ExistingFile);
  if (with_output_file) cmd->add_option("--out", f.out, "Output JSONL")->required();
  cmd->add_option("--top-k", f.top_k, "Student top-K support size for the teacher margin")
      ->capture_default_str()
      ->check(CLI::Range(std::size_t{2}, std::size_t{1} << 20));
  cmd->add_option("--bins", f.bins, "Number of position bins for diagnostics")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--gain-threshold", f.gain_threshold, "BIC gain threshold for the release summary")
      ->capture_default_str();
  cmd->add_option("--segments", f.segments, "Segment source: record-supplied segments or the built-in segmenter")
      ->capture_default_str()
      ->check(CLI::IsMember({"record", "builtin"}));
  cmd->add_flag("--probs", f.probs, "Interpret topk student/teacher arrays as probabilities (log with floor 1e-12)");
  cmd->add_flag("--strict", f.strict, "Abort on the first bad record (exit 2) instead of skipping it");
  cmd->add_option("--jobs", f.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
}

teachcut::Strategy parse_strategy(const ReleaseFlags& f) {
  const std::string& s = f.strategy;
  if (s != "fixed" && s.rfind("fixed:", 0) != 0 && f.prefix_tokens) {
    throw UsageError("--prefix-tokens only applies to --strategy fixed");
  }
  if (s == "bic") return teachcut::BicRelease{};
  if (s == "full") return teachcut::FullSupervision{};
  if (s == "random") return teachcut::RandomRelease{f.seed};
  if (s == "fixed") {
    if (!f.prefix_tokens) throw UsageError("--strategy fixed needs --prefix-tokens (or use fixed:K)");
    return teachcut::FixedPrefix{*f.prefix_tokens};
  }
  if (s.rfind("fixed:", 0) == 0) {
    std::size_t k = 0;
    try {
      std::size_t used = 0;
      k = std::stoul(s.substr(6), &used);
      if (used != s.size() - 6) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw UsageError("bad fixed prefix in --strategy " + s);
    }
    if (f.prefix_tokens && *f.prefix_tokens != k) throw UsageError("--strategy " + s + " conflicts with --prefix-tokens");
    if (k < 1) throw UsageError("fixed prefix must keep at least one token");
    return teachcut::FixedPrefix{k};
  }
  throw UsageError("unknown strategy '" + s + "' (expected bic, full, fixed:K or random)");
}

teachcut::PipelineConfig pipeline_config(const CommonFlags& f) {
  teachcut::PipelineConfig c;
  c.support_size = f.top_k;
  c.num_bins = f.bins;
  c.gain_threshold = f.gain_threshold;
  c.segments_source = f.segments == "builtin" ? teachcut::SegmentsSource::builtin : teachcut::SegmentsSource::record;
  return c;
}

teachcut::BatchOptions batch_options(const CommonFlags& f) {
  teachcut::BatchOptions o;
  o.strict = f.strict;
  o.jobs = f.jobs;
  o.parse.topk_as_probabilities = f.probs;
  o.on_error = [](const teachcut::RecordError& e) {
    spdlog::error("line {}{}: {}", e.line, e.rollout_id.empty() ? "" : " (" + e.rollout_id + ")", e.message);
  };
  return o;
}

void check_output_path(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty() && !fs::is_directory(parent)) throw UsageError("output directory does not exist: " + parent.string());
}

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot open for writing: " + path.string());
  return out;
}

void log_report(const teachcut::BatchReport& r) {
  spdlog::info("records={} ok={} errors={} accepted={} acceptance_rate={}", r.records, r.ok, r.errors, r.accepted,
               teachcut::format_number(r.acceptance_rate()));
  if (r.clamped > 0) {
    spdlog::warn("{} record(s) exported fewer candidates than --top-k; the support size was clamped", r.clamped);
  }
}

void write_diagnostics(const fs::path& dir, const teachcut::BatchReport& r, double gain_threshold) {
  if (r.ok == 0) {
    spdlog::warn("no healthy records; diagnostics not written");
    return;
  }
  {
    auto out = open_output(dir / "bins.csv");
    teachcut::write_bins_csv(out, r.advantage_bins.finish());
  }
  if (!r.observations.empty()) {
    const teachcut::BinnedStats margins = r.margin_bins.finish(/*normalize_means=*/true);
    if (margins.normalization_failed) spdlog::warn("first margin bin has zero mean; normalized curve left empty");
    auto out = open_output(dir / "margin_bins.csv");
    teachcut::write_bins_csv(out, margins);
    auto summary = open_output(dir / "summary.csv");
    teachcut::write_summary_csv(summary, teachcut::release_summary(r.observations, gain_threshold));
  }
}

int run_release(const ReleaseFlags& f) {
  teachcut::PipelineConfig config = pipeline_config(f);
  config.strategy = parse_strategy(f);
  check_output_path(f.out);
  if (!f.diag_dir.empty() && !fs::is_directory(f.diag_dir)) throw UsageError("--diag-dir does not exist: " + f.diag_dir);
  std::ifstream in(f.in, std::ios::binary);
  auto out = open_output(f.out);
  const auto report = teachcut::process_batch(in, out, config, batch_options(f));
  log_report(report);
  if (!f.diag_dir.empty()) write_diagnostics(f.diag_dir, report, f.gain_threshold);
  return kExitOk;
}

int run_diagnose(const CommonFlags& f, const std::string& out_dir) {
  if (!fs::is_directory(out_dir)) throw UsageError("--out-dir does not exist: " + out_dir);
  teachcut::PipelineConfig config = pipeline_config(f);
  std::ifstream in(f.in, std::ios::binary);
  std::ostringstream discard;
  discard.setstate(std::ios::badbit);
  const auto report = teachcut::process_batch(in, discard, config, batch_options(f));
  log_report(report);
  write_diagnostics(out_dir, report, f.gain_threshold);
  if (report.ok > 0) {
    const auto s = teachcut::release_summary(report.observations, f.gain_threshold);
    std::cout << "rollouts=" << s.num_rollouts << " acceptance_rate=" << teachcut::format_number(s.acceptance_rate)
              << " mean_bic_gain=" << teachcut::format_number(s.mean_bic_gain)
              << " fraction_gain_above_threshold=" << teachcut::format_number(s.fraction_gain_above_threshold)
              << " median_relative_release_position=" << teachcut::format_number(s.median_relative_release_position)
              << '\n';
  }
  return kExitOk;
}

int run_simulate(SimulateFlags f) {
  f.config.true_tau = f.tau;
  teachcut::validate(f.config);
  check_output_path(f.out);
  fs::path truth_path = f.ground_truth.empty() ? fs::path(f.out).parent_path() / "ground_truth.jsonl"
                                               : fs::path(f.ground_truth);
  auto out = open_output(f.out);
  auto truth = open_output(truth_path);
  const std::size_t chunk = 1024;
  std::vector<std::string> lines;
  std::vector<std::string> truth_lines;
  for (std::size_t begin = 0; begin < f.count; begin += chunk) {
    const std::size_t n = std::min(chunk, f.count - begin);
    lines.assign(n, {});
    truth_lines.assign(n, {});
    teachcut::parallel_for(n, f.jobs, [&](std::size_t i) {
      const auto sim = teachcut::generate_piecewise_rollout(f.config, begin + i);
      lines[i] = teachcut::serialize_rollout_record(sim.record);
      truth_lines[i] = "{\"rollout_id\":\"" + sim.truth.rollout_id + "\",\"true_tau\":" +
                       (sim.truth.true_tau ? std::to_string(*sim.truth.true_tau) : std::string("null")) + "}";
    });
    for (std::size_t i = 0; i < n; ++i) {
      out << lines[i] << '\n';
      truth << truth_lines[i] << '\n';
    }
  }
  spdlog::info("wrote {} rollouts to {} (ground truth: {})", f.count, f.out, truth_path.string());
  return kExitOk;
}

int run_permute(const CommonFlags& f, std::uint64_t seed) {
  check_output_path(f.out);
  teachcut::PipelineConfig config = pipeline_config(f);
  std::ifstream in(f.in, std::ios::binary);
  auto out = open_output(f.out);
  const auto report = teachcut::permute_release_output(in, out, seed, config, batch_options(f));
  log_report(report);
  return kExitOk;
}

int run_snr(const SnrFlags& f) {
  const auto r = teachcut::snr_release_check(f.mp, f.vp, f.mr, f.vr);
  std::cout << "improves=" << (r.release_improves ? "true" : "false")
            << " snr_release=" << teachcut::format_number(r.snr_release)
            << " snr_full=" << teachcut::format_number(r.snr_full);
  if (r.forms_agree) std::cout << " forms_agree=" << (*r.forms_agree ? "true" : "false");
  std::cout << '\n';
  if (!f.out.empty()) {
    check_output_path(f.out);
    auto out = open_output(f.out);
    teachcut::write_snr_csv(out, r);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"teachcut: release dense distillation supervision at the trajectory's teachability drop"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  ReleaseFlags release;
  auto* release_cmd = app.add_subcommand("release", "Compute per-rollout release masks and rescaled advantages");
  add_common(release_cmd, release, true);
  release_cmd->add_option("--strategy", release.strategy, "Masking strategy: bic, full, fixed:K, fixed or random")
      ->capture_default_str();
  release_cmd->add_option("--prefix-tokens", release.prefix_tokens, "Prefix length for --strategy fixed");
  release_cmd->add_option("--seed", release.seed, "Seed for --strategy random")->capture_default_str();
  release_cmd->add_option("--diag-dir", release.diag_dir, "Also write bins.csv, margin_bins.csv, summary.csv here");

  CommonFlags diagnose;
  std::string diagnose_dir;
  auto* diagnose_cmd = app.add_subcommand("diagnose", "Binned advantage/margin statistics and release summary as CSV");
  add_common(diagnose_cmd, diagnose, false);
  diagnose_cmd->add_option("--out-dir", diagnose_dir, "Directory for bins.csv, margin_bins.csv, summary.csv")
      ->required();

  SimulateFlags simulate;
  auto* simulate_cmd = app.add_subcommand("simulate", "Generate synthetic rollouts with a planted margin drop");
  simulate_cmd->add_option("--out", simulate.out, "Output rollout JSONL")->required();
  simulate_cmd->add_option("--ground-truth", simulate.ground_truth,
                           "Ground-truth JSONL (default: ground_truth.jsonl next to --out)");
  simulate_cmd->add_option("--count", simulate.count, "Number of rollouts")->capture_default_str();
  simulate_cmd->add_option("--n", simulate.config.num_segments, "Segments per rollout")->capture_default_str();
  simulate_cmd->add_option("--tokens-per-segment", simulate.config.tokens_per_segment, "Tokens per segment")
      ->capture_default_str();
  simulate_cmd->add_option("--tau", simulate.tau, "Planted release segment in [1, n-1]; omit for no change");
  simulate_cmd->add_option("--pre", simulate.config.pre_margin_mean, "Margin mean before the drop")
      ->capture_default_str();
  simulate_cmd->add_option("--post", simulate.config.post_margin_mean, "Margin mean after the drop")
      ->capture_default_str();
  simulate_cmd->add_option("--noise", simulate.config.noise_std, "Per-token margin noise std")->capture_default_str();
  simulate_cmd->add_option("--top-k", simulate.config.support_size, "Candidates per position")->capture_default_str();
  simulate_cmd->add_option("--seed", simulate.config.seed, "Generator seed")->capture_default_str();
  simulate_cmd->add_option("--jobs", simulate.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);

  CommonFlags permute;
  std::uint64_t permute_seed = 0;
  auto* permute_cmd = app.add_subcommand("permute", "Random-release control over an existing release output");
  add_common(permute_cmd, permute, true);
  permute_cmd->add_option("--seed", permute_seed, "Permutation seed")->capture_default_str();

  SnrFlags snr;
  auto* snr_cmd = app.add_subcommand("snr", "Check whether release improves directional SNR for given moments");
  snr_cmd->add_option("--mp", snr.mp, "Prefix directional mean m_P")->required();
  snr_cmd->add_option("--vp", snr.vp, "Prefix variance v_P (> 0)")->required();
  snr_cmd->add_option("--mr", snr.mr, "Suffix directional mean m_R")->required();
  snr_cmd->add_option("--vr", snr.vr, "Suffix variance v_R (>= 0)")->required();
  snr_cmd->add_option("--out", snr.out, "Optional snr.csv output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  setup_logging();
  try {
    if (*release_cmd) return run_release(release);
    if (*diagnose_cmd) return run_diagnose(diagnose, diagnose_dir);
    if (*simulate_cmd) return run_simulate(simulate);
    if (*permute_cmd) return run_permute(permute, permute_seed);
    if (*snr_cmd) return run_snr(snr);
  } catch (const teachcut::BatchAborted& e) {
    spdlog::error("aborted: {}", e.what());
    return kExitData;
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  } catch (const teachcut::ConfigError& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitData;
  }
  return kExitUsage;
}
