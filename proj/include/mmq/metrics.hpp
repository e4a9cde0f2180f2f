#pragma once

#include "mmq/datasets.hpp"
#include "mmq/semantic_id.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mmq {

/// counts[slot][code].
using SlotCounts = std::vector<std::vector<std::uint64_t>>;

SlotCounts code_counts(const std::vector<SemanticId>& ids, std::size_t codebook_size);

/// Mean over slots of the fraction of codes used at least once.
double codebook_utilization(const SlotCounts& counts);
/// Mean over slots of the Shannon entropy (nats) of the code distribution.
double token_entropy(const SlotCounts& counts);
/// Entropy of the code distribution pooled over all slots.
double pooled_token_entropy(const SlotCounts& counts);

/// 1-based rank of the relevant item for every user.
double recall_at_n(const std::vector<std::size_t>& ranks, std::size_t n);
double ndcg_at_n(const std::vector<std::size_t>& ranks, std::size_t n);

/// Rank-sum AUC with ties counted as one half.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct UserScores {
  std::vector<double> scores;
  std::vector<int> labels;
};

/// Impression-weighted mean of per-user AUC over users with both classes.
double gauc(const std::vector<UserScores>& users);

struct QuantMetrics {
  double recon_loss = 0.0;
  double utilization = 0.0;
  double entropy = 0.0;
  double pooled_entropy = 0.0;
};

struct RankingMetrics {
  std::map<std::size_t, double> recall_at;
  std::map<std::size_t, double> ndcg_at;
  std::optional<double> auc;
  std::optional<double> gauc;
  std::size_t users = 0;
};

RankingMetrics ranking_metrics(const std::vector<std::size_t>& ranks, const std::vector<std::size_t>& cutoffs);

/// Ranking metrics restricted to users whose held-out item falls in each
/// stratum; strata without test items are omitted and listed in `omitted`.
struct StratifiedReport {
  std::map<std::string, RankingMetrics> strata;
  std::vector<std::string> omitted;
};

StratifiedReport stratified_report(const std::vector<std::size_t>& ranks, const std::vector<std::uint64_t>& target_items,
                                   const PopularityStrata& strata, const std::vector<std::size_t>& cutoffs);

struct MetricsReport {
  std::string label;
  std::optional<QuantMetrics> quant;
  std::optional<RankingMetrics> ranking;
  std::optional<StratifiedReport> stratified;
  /// Additional named scalars (e.g. pre/post fine-tuning values).
  std::map<std::string, double> extra;
  std::string config_hash;

  /// Deterministic JSON (sorted keys, fixed float formatting).
  std::string to_json() const;
  static MetricsReport from_json(const std::string& json);
  /// Flat metric name -> value view ("recall@10", "recon_loss", ...).
  std::map<std::string, double> flat() const;
};

}  // namespace mmq
