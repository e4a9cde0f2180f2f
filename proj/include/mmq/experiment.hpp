#pragma once

#include "mmq/datasets.hpp"
#include "mmq/finetune.hpp"
#include "mmq/metrics.hpp"
#include "mmq/quantize.hpp"
#include "mmq/rqvae.hpp"
#include "mmq/tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace mmq {

struct DataSection {
  /// Synthetic generation (used when no paths are given).
  SyntheticConfig synthetic;
  std::string items_path;
  std::string interactions_path;

  bool from_files() const { return !items_path.empty(); }
};

struct EvalSection {
  std::vector<std::size_t> cutoffs{5, 10};
  bool strata = true;
};

/// Component switches for one MMQ run (the ablation rows toggle these).
struct AblationFlags {
  bool use_cosine = true;
  bool aux_on = true;
  bool ortho_on = true;
  bool baf_on = true;
};

enum class Command { mmq, baselines, ablations, sweep };
std::string to_string(Command c);

struct BaselineSpec {
  BaselineMethod method = BaselineMethod::rq_kmeans;
  Paradigm paradigm = Paradigm::MA;
};

struct BaselinesSection {
  std::vector<BaselineSpec> runs;
  /// Also run behavior-aware fine-tuning on vae-mode baselines.
  bool finetune_rqvae = false;
  std::size_t kmeans_iters = 25;
  std::size_t opq_iters = 8;
  RqVaeOptions vae;
};

struct ExpertCount {
  std::size_t shared = 2;
  std::size_t specific = 4;  // split evenly between text and vision
  std::vector<std::size_t> expert_hidden;    // overrides tokenizer.expert_hidden when non-empty
  std::vector<std::size_t> specific_hidden;  // overrides tokenizer.specific_hidden when non-empty
};

struct SweepSection {
  /// Semantic-ID lengths; each must be divisible by 3 (shared/text/vision).
  std::vector<std::size_t> lengths;
  std::vector<ExpertCount> experts;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "mmq_out";
  DataSection data;
  TokenizerConfig tokenizer;
  Stage1Options stage1;
  FinetuneConfig finetune;
  EvalSection eval;

  Command command = Command::mmq;
  AblationFlags flags;        // "mmq" section
  BaselinesSection baselines;  // "baselines" section
  std::vector<std::string> ablation_rows;  // "ablations" section
  SweepSection sweep;          // "sweep" section

  /// Parses and validates; unknown keys, a missing seed or a command-section
  /// count other than one raise ConfigError naming the field.
  static ExperimentConfig from_json(const std::string& text);
  /// Canonical JSON (sorted keys) of the effective configuration.
  std::string to_json() const;
  /// 16 hex digits of FNV-1a over to_json().
  std::string hash() const;
  /// Propagates the top-level seed into data, tokenizer and fine-tuning.
  void apply_seed(std::uint64_t s);
  void validate() const;
};

/// Normalized catalog, interaction log and popularity strata for one run.
struct Workload {
  EmbeddingDataset catalog;
  InteractionDataset log;
  PopularityStrata strata;
};

Workload load_workload(const DataSection& data);

using LogSink = std::function<void(const std::string& json_line)>;

/// One finished pipeline: metrics plus artifacts to persist.
struct RunResult {
  std::string label;
  MetricsReport report;
  SemanticIdTable ids;
  std::optional<Checkpoint> checkpoint;
  std::size_t parameter_count = 0;
};

/// Stage 1, then fine-tuning (or head-only training when BAF is off), then evaluation.
RunResult run_mmq(const Workload& w, TokenizerConfig tok_cfg, const Stage1Options& s1, const FinetuneConfig& ft,
                  const EvalSection& eval, const AblationFlags& flags, const std::string& label, const LogSink& log = {});

/// Fit a baseline, train a head on its IDs (or fine-tune jointly when
/// `finetune` is set and the method is rq_vae), then evaluate.
RunResult run_baseline(const Workload& w, const BaselineConfig& cfg, const RqVaeOptions& vae, bool finetune,
                       const FinetuneConfig& ft, const EvalSection& eval, const std::string& label,
                       const LogSink& log = {});

/// Table 2 row labels, in order.
const std::vector<std::string>& ablation_row_names();
AblationFlags ablation_flags(const std::string& row);

/// Tokenizer config for a semantic-ID length (split evenly over the three groups).
TokenizerConfig config_for_length(TokenizerConfig base, std::size_t length);
TokenizerConfig config_for_experts(TokenizerConfig base, const ExpertCount& e);

/// Runs every pipeline the config asks for, in order.
std::vector<RunResult> run_experiment(const ExperimentConfig& cfg, const LogSink& log = {});

/// Directory-safe form of a run label.
std::string label_slug(const std::string& label);

/// Writes metrics.json, semantic_ids.tsv and tokenizer.ckpt (when present)
/// into `dir`; the report carries `config_hash`.
void write_run(const std::filesystem::path& dir, const RunResult& run, const std::string& config_hash);

/// Writes all runs: a single run goes straight into `out`, several runs go
/// into one subdirectory per label plus an index.json listing them.
void write_experiment(const std::filesystem::path& out, const std::vector<RunResult>& runs, const ExperimentConfig& cfg);

struct CompareTable {
  std::vector<std::string> labels;
  std::vector<std::string> metrics;
  /// values[run][metric]; NaN when a run lacks the metric.
  std::vector<std::vector<double>> values;
  /// Percent improvement of the last run over the best of the others.
  std::vector<double> improvement;

  std::string to_text() const;
  std::string to_json() const;
};

/// Metrics where lower is better (currently only recon_loss).
bool lower_is_better(const std::string& metric);

CompareTable compare_reports(const std::vector<MetricsReport>& reports);
/// Reads `<dir>/metrics.json` for every dir; a missing file raises IoError naming the run.
CompareTable compare_runs(const std::vector<std::filesystem::path>& dirs);

}  // namespace mmq
