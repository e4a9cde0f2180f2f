#include "mmq/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mmq {

using nlohmann::json;

SlotCounts code_counts(const std::vector<SemanticId>& ids, std::size_t codebook_size) {
  if (ids.empty()) return {};
  const std::size_t slots = ids.front().length();
  SlotCounts counts(slots, std::vector<std::uint64_t>(codebook_size, 0));
  for (const auto& id : ids) {
    if (id.length() != slots) throw std::invalid_argument("code_counts: semantic ids of different lengths");
    for (std::size_t s = 0; s < slots; ++s) {
      if (id.codes[s] >= codebook_size)
        throw std::out_of_range("code_counts: code " + std::to_string(id.codes[s]) + " >= K=" + std::to_string(codebook_size));
      ++counts[s][id.codes[s]];
    }
  }
  return counts;
}

double codebook_utilization(const SlotCounts& counts) {
  if (counts.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& slot : counts) {
    if (slot.empty()) continue;
    const auto used = std::count_if(slot.begin(), slot.end(), [](std::uint64_t c) { return c > 0; });
    sum += static_cast<double>(used) / static_cast<double>(slot.size());
  }
  return sum / static_cast<double>(counts.size());
}

namespace {

double entropy_of(const std::vector<std::uint64_t>& counts) {
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}));
  if (!(total > 0.0)) throw std::invalid_argument("token_entropy: slot with zero total count");
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace

double token_entropy(const SlotCounts& counts) {
  if (counts.empty()) throw std::invalid_argument("token_entropy: no slots");
  double sum = 0.0;
  for (const auto& slot : counts) sum += entropy_of(slot);
  return sum / static_cast<double>(counts.size());
}

double pooled_token_entropy(const SlotCounts& counts) {
  if (counts.empty()) throw std::invalid_argument("token_entropy: no slots");
  std::vector<std::uint64_t> pooled(counts.front().size(), 0);
  for (const auto& slot : counts)
    for (std::size_t k = 0; k < slot.size() && k < pooled.size(); ++k) pooled[k] += slot[k];
  return entropy_of(pooled);
}

namespace {

void check_cutoff(const std::vector<std::size_t>& ranks, std::size_t n) {
  if (n < 1) throw std::invalid_argument("ranking metric: N must be >= 1");
  if (ranks.empty()) throw std::invalid_argument("ranking metric: no users");
}

}  // namespace

double recall_at_n(const std::vector<std::size_t>& ranks, std::size_t n) {
  check_cutoff(ranks, n);
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [n](std::size_t r) { return r >= 1 && r <= n; });
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double ndcg_at_n(const std::vector<std::size_t>& ranks, std::size_t n) {
  check_cutoff(ranks, n);
  double sum = 0.0;
  for (auto r : ranks)
    if (r >= 1 && r <= n) sum += 1.0 / std::log2(static_cast<double>(r) + 1.0);
  return sum / static_cast<double>(ranks.size());
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: scores/labels size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  double pos = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] != 0) {
        pos_rank_sum += avg_rank;
        pos += 1.0;
      }
    }
    i = j;
  }
  const double neg = static_cast<double>(scores.size()) - pos;
  if (pos == 0.0 || neg == 0.0) throw std::invalid_argument("auc: undefined for single-class input");
  return (pos_rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double gauc(const std::vector<UserScores>& users) {
  double num = 0.0;
  double den = 0.0;
  for (const auto& u : users) {
    const auto pos = std::count_if(u.labels.begin(), u.labels.end(), [](int l) { return l != 0; });
    if (pos == 0 || pos == static_cast<std::ptrdiff_t>(u.labels.size())) continue;
    const double w = static_cast<double>(u.labels.size());
    num += w * auc(u.scores, u.labels);
    den += w;
  }
  if (den == 0.0) throw std::invalid_argument("gauc: no user has both positive and negative labels");
  return num / den;
}

RankingMetrics ranking_metrics(const std::vector<std::size_t>& ranks, const std::vector<std::size_t>& cutoffs) {
  RankingMetrics m;
  m.users = ranks.size();
  for (auto n : cutoffs) {
    m.recall_at[n] = recall_at_n(ranks, n);
    m.ndcg_at[n] = ndcg_at_n(ranks, n);
  }
  return m;
}

StratifiedReport stratified_report(const std::vector<std::size_t>& ranks, const std::vector<std::uint64_t>& target_items,
                                   const PopularityStrata& strata, const std::vector<std::size_t>& cutoffs) {
  if (ranks.size() != target_items.size()) throw std::invalid_argument("stratified_report: ranks/targets size mismatch");
  StratifiedReport rep;
  for (auto s : {Stratum::popular, Stratum::middle, Stratum::long_tail}) {
    std::vector<std::size_t> sub;
    for (std::size_t i = 0; i < ranks.size(); ++i) {
      const auto it = strata.stratum.find(target_items[i]);
      if (it == strata.stratum.end())
        throw std::invalid_argument("stratified_report: item " + std::to_string(target_items[i]) + " has no stratum");
      if (it->second == s) sub.push_back(ranks[i]);
    }
    if (sub.empty())
      rep.omitted.push_back(to_string(s));
    else
      rep.strata[to_string(s)] = ranking_metrics(sub, cutoffs);
  }
  return rep;
}

namespace {

json ranking_json(const RankingMetrics& r) {
  json j = json::object();
  for (const auto& [n, v] : r.recall_at) j["recall@" + std::to_string(n)] = v;
  for (const auto& [n, v] : r.ndcg_at) j["ndcg@" + std::to_string(n)] = v;
  if (r.auc) j["auc"] = *r.auc;
  if (r.gauc) j["gauc"] = *r.gauc;
  j["users"] = r.users;
  return j;
}

RankingMetrics ranking_from(const json& j) {
  RankingMetrics r;
  for (const auto& [key, v] : j.items()) {
    if (key.rfind("recall@", 0) == 0)
      r.recall_at[std::stoul(key.substr(7))] = v.get<double>();
    else if (key.rfind("ndcg@", 0) == 0)
      r.ndcg_at[std::stoul(key.substr(5))] = v.get<double>();
    else if (key == "auc")
      r.auc = v.get<double>();
    else if (key == "gauc")
      r.gauc = v.get<double>();
    else if (key == "users")
      r.users = v.get<std::size_t>();
  }
  return r;
}

}  // namespace

std::string MetricsReport::to_json() const {
  json j = json::object();
  j["label"] = label;
  if (!config_hash.empty()) j["config_hash"] = config_hash;
  if (quant) {
    j["recon_loss"] = quant->recon_loss;
    j["utilization"] = quant->utilization;
    j["entropy"] = quant->entropy;
    j["entropy_pooled"] = quant->pooled_entropy;
  }
  if (ranking) j.update(ranking_json(*ranking));
  if (stratified) {
    json s = json::object();
    for (const auto& [name, r] : stratified->strata) s[name] = ranking_json(r);
    j["strata"] = s;
    j["strata_omitted"] = stratified->omitted;
  }
  if (!extra.empty()) j["extra"] = extra;
  return j.dump(2) + "\n";
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  const json j = json::parse(text);
  MetricsReport r;
  r.label = j.value("label", "");
  r.config_hash = j.value("config_hash", "");
  if (j.contains("recon_loss")) {
    QuantMetrics q;
    q.recon_loss = j.at("recon_loss").get<double>();
    q.utilization = j.at("utilization").get<double>();
    q.entropy = j.at("entropy").get<double>();
    q.pooled_entropy = j.value("entropy_pooled", 0.0);
    r.quant = q;
  }
  if (j.contains("users")) r.ranking = ranking_from(j);
  if (j.contains("strata")) {
    StratifiedReport s;
    for (const auto& [name, v] : j.at("strata").items()) s.strata[name] = ranking_from(v);
    s.omitted = j.value("strata_omitted", std::vector<std::string>{});
    r.stratified = s;
  }
  if (j.contains("extra")) r.extra = j.at("extra").get<std::map<std::string, double>>();
  return r;
}

std::map<std::string, double> MetricsReport::flat() const {
  std::map<std::string, double> out;
  if (quant) {
    out["recon_loss"] = quant->recon_loss;
    out["utilization"] = quant->utilization;
    out["entropy"] = quant->entropy;
  }
  if (ranking) {
    for (const auto& [n, v] : ranking->recall_at) out["recall@" + std::to_string(n)] = v;
    for (const auto& [n, v] : ranking->ndcg_at) out["ndcg@" + std::to_string(n)] = v;
    if (ranking->auc) out["auc"] = *ranking->auc;
    if (ranking->gauc) out["gauc"] = *ranking->gauc;
  }
  for (const auto& [k, v] : extra) out[k] = v;
  return out;
}

}  // namespace mmq
