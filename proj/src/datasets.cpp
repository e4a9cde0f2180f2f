#include "mmq/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace mmq {

std::vector<float> MultimodalEmbedding::concatenated() const {
  std::vector<float> out(text);
  out.insert(out.end(), vision.begin(), vision.end());
  return out;
}

EmbeddingDataset::EmbeddingDataset(std::size_t text_dim, std::size_t vision_dim)
    : text_dim_(text_dim), vision_dim_(vision_dim), text_(0, text_dim), vision_(0, vision_dim) {}

EmbeddingDataset::EmbeddingDataset(std::vector<std::uint64_t> ids, MatrixF text, MatrixF vision)
    : text_dim_(static_cast<std::size_t>(text.cols())),
      vision_dim_(static_cast<std::size_t>(vision.cols())),
      ids_(std::move(ids)),
      text_(std::move(text)),
      vision_(std::move(vision)) {
  if (text_.rows() != static_cast<Eigen::Index>(ids_.size()) || vision_.rows() != text_.rows())
    throw ShapeError("EmbeddingDataset: id/text/vision row counts differ");
  index();
}

void EmbeddingDataset::index() {
  rows_.clear();
  rows_.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) rows_.emplace(ids_[i], i);
}

MatrixF EmbeddingDataset::concatenated() const {
  MatrixF out(text_.rows(), static_cast<Eigen::Index>(text_dim_ + vision_dim_));
  out.leftCols(static_cast<Eigen::Index>(text_dim_)) = text_;
  out.rightCols(static_cast<Eigen::Index>(vision_dim_)) = vision_;
  return out;
}

MultimodalEmbedding EmbeddingDataset::item(std::size_t row) const {
  MultimodalEmbedding e;
  e.item_id = ids_.at(row);
  const auto r = static_cast<Eigen::Index>(row);
  e.text.assign(text_.row(r).data(), text_.row(r).data() + text_dim_);
  e.vision.assign(vision_.row(r).data(), vision_.row(r).data() + vision_dim_);
  return e;
}

void EmbeddingDataset::push_back(const MultimodalEmbedding& e) {
  if (e.text.size() != text_dim_ || e.vision.size() != vision_dim_) throw ShapeError("push_back: dimension mismatch");
  const Eigen::Index n = text_.rows();
  text_.conservativeResize(n + 1, Eigen::NoChange);
  vision_.conservativeResize(n + 1, Eigen::NoChange);
  for (std::size_t j = 0; j < text_dim_; ++j) text_(n, static_cast<Eigen::Index>(j)) = e.text[j];
  for (std::size_t j = 0; j < vision_dim_; ++j) vision_(n, static_cast<Eigen::Index>(j)) = e.vision[j];
  ids_.push_back(e.item_id);
  rows_.emplace(e.item_id, ids_.size() - 1);
}

std::ptrdiff_t EmbeddingDataset::find(std::uint64_t item_id) const {
  auto it = rows_.find(item_id);
  return it == rows_.end() ? -1 : static_cast<std::ptrdiff_t>(it->second);
}

std::size_t EmbeddingDataset::row_of(std::uint64_t item_id) const {
  auto it = rows_.find(item_id);
  if (it == rows_.end()) throw std::out_of_range("item " + std::to_string(item_id) + " not in catalog");
  return it->second;
}

EmbeddingDataset EmbeddingDataset::subset(const std::vector<std::size_t>& rows) const {
  std::vector<std::uint64_t> ids;
  MatrixF t(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(text_dim_));
  MatrixF v(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(vision_dim_));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    ids.push_back(ids_.at(rows[i]));
    t.row(static_cast<Eigen::Index>(i)) = text_.row(static_cast<Eigen::Index>(rows[i]));
    v.row(static_cast<Eigen::Index>(i)) = vision_.row(static_cast<Eigen::Index>(rows[i]));
  }
  EmbeddingDataset out(std::move(ids), std::move(t), std::move(v));
  out.text_dim_ = text_dim_;
  out.vision_dim_ = vision_dim_;
  return out;
}

EmbeddingDataset EmbeddingDataset::normalized() const {
  EmbeddingDataset out = *this;
  normalize_rows(out.text_);
  normalize_rows(out.vision_);
  return out;
}

void EmbeddingDataset::validate() const {
  if (rows_.size() != ids_.size()) throw std::invalid_argument("embedding dataset has duplicate item ids");
  if (!text_.allFinite() || !vision_.allFinite()) throw std::invalid_argument("embedding dataset has non-finite values");
}

bool EmbeddingDataset::operator==(const EmbeddingDataset& o) const {
  if (text_dim_ != o.text_dim_ || vision_dim_ != o.vision_dim_ || ids_ != o.ids_) return false;
  const auto bytes = [](const MatrixF& m) { return sizeof(float) * static_cast<std::size_t>(m.size()); };
  return std::memcmp(text_.data(), o.text_.data(), bytes(text_)) == 0 &&
         std::memcmp(vision_.data(), o.vision_.data(), bytes(vision_)) == 0;
}

namespace {
constexpr char kEmbMagic[4] = {'M', 'M', 'Q', 'E'};
constexpr std::uint32_t kEmbVersion = 1;
}  // namespace

std::string encode_embeddings(const EmbeddingDataset& ds) {
  std::string out(kEmbMagic, 4);
  binio::put_u32(out, kEmbVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(ds.size()));
  binio::put_u32(out, static_cast<std::uint32_t>(ds.text_dim()));
  binio::put_u32(out, static_cast<std::uint32_t>(ds.vision_dim()));
  const std::size_t rec = 8 + 4 * (ds.text_dim() + ds.vision_dim());
  out.reserve(out.size() + rec * ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    binio::put_u64(out, ds.ids()[i]);
    out.append(reinterpret_cast<const char*>(ds.text().row(r).data()), 4 * ds.text_dim());
    out.append(reinterpret_cast<const char*>(ds.vision().row(r).data()), 4 * ds.vision_dim());
  }
  return out;
}

EmbeddingDataset decode_embeddings(const std::string& bytes) {
  binio::Reader r(bytes);
  if (bytes.size() < 4 || r.raw(4) != std::string(kEmbMagic, 4)) throw FormatError("bad embedding file magic", 0);
  const auto ver_at = r.offset();
  if (r.u32() != kEmbVersion) throw FormatError("unsupported embedding file version", ver_at);
  const auto n = r.u32();
  const auto dt = r.u32();
  const auto dv = r.u32();
  const std::uint64_t rec = 8 + 4ull * (static_cast<std::uint64_t>(dt) + dv);
  if (rec * n > r.remaining()) {
    const std::uint64_t complete = r.remaining() / rec;
    throw FormatError("embedding file truncated: header declares " + std::to_string(n) + " records, " +
                          std::to_string(complete) + " complete",
                      r.offset() + complete * rec);
  }
  std::vector<std::uint64_t> ids(n);
  MatrixF text(n, dt);
  MatrixF vision(n, dv);
  for (std::uint32_t i = 0; i < n; ++i) {
    ids[i] = r.u64();
    r.f32_block(text.row(i).data(), dt);
    r.f32_block(vision.row(i).data(), dv);
  }
  if (!r.at_end()) throw FormatError("unexpected trailing bytes", r.offset());
  EmbeddingDataset ds(std::move(ids), std::move(text), std::move(vision));
  if (ds.size() == 0) ds = EmbeddingDataset(dt, dv);
  return ds;
}

void write_embeddings(const EmbeddingDataset& ds, const std::filesystem::path& path) {
  binio::write_file(path, encode_embeddings(ds));
}

EmbeddingDataset read_embeddings(const std::filesystem::path& path) { return decode_embeddings(binio::read_file(path)); }

std::vector<std::pair<std::uint64_t, std::vector<std::uint64_t>>> InteractionDataset::positive_sequences() const {
  std::map<std::uint64_t, std::vector<const Interaction*>> by_user;
  for (const auto& e : events)
    if (e.label == 1) by_user[e.user_id].push_back(&e);
  std::vector<std::pair<std::uint64_t, std::vector<std::uint64_t>>> out;
  out.reserve(by_user.size());
  for (auto& [user, evs] : by_user) {
    std::stable_sort(evs.begin(), evs.end(),
                     [](const Interaction* a, const Interaction* b) { return a->timestamp < b->timestamp; });
    std::vector<std::uint64_t> items;
    items.reserve(evs.size());
    for (const auto* e : evs) items.push_back(e->item_id);
    out.emplace_back(user, std::move(items));
  }
  return out;
}

void InteractionDataset::validate(const EmbeddingDataset& catalog) const {
  std::unordered_map<std::uint64_t, std::uint64_t> last_ts;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    if (catalog.find(e.item_id) < 0)
      throw std::invalid_argument("interaction " + std::to_string(i) + ": item " + std::to_string(e.item_id) +
                                  " has no embedding");
    if (e.label > 1) throw std::invalid_argument("interaction " + std::to_string(i) + ": label must be 0 or 1");
    auto [it, inserted] = last_ts.emplace(e.user_id, e.timestamp);
    if (!inserted) {
      if (e.timestamp < it->second)
        throw std::invalid_argument("interaction " + std::to_string(i) + ": events of user " +
                                    std::to_string(e.user_id) + " not ordered by timestamp");
      it->second = e.timestamp;
    }
  }
}

void write_interactions(const InteractionDataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "user_id\titem_id\ttimestamp\tlabel\n";
  for (const auto& e : ds.events)
    out << e.user_id << '\t' << e.item_id << '\t' << e.timestamp << '\t' << static_cast<int>(e.label) << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

InteractionDataset read_interactions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument(path.string() + ": missing header line");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "user_id\titem_id\ttimestamp\tlabel")
    throw std::invalid_argument(path.string() + ": header must be 'user_id<TAB>item_id<TAB>timestamp<TAB>label'");
  InteractionDataset ds;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
      cols.push_back(line.substr(start, tab - start));
    cols.push_back(line.substr(start));
    Interaction e;
    unsigned long long label = 2;
    try {
      if (cols.size() != 4) throw std::invalid_argument("column count");
      std::size_t used = 0;
      e.user_id = std::stoull(cols[0], &used);
      if (used != cols[0].size()) throw std::invalid_argument("user_id");
      e.item_id = std::stoull(cols[1], &used);
      if (used != cols[1].size()) throw std::invalid_argument("item_id");
      e.timestamp = std::stoull(cols[2], &used);
      if (used != cols[2].size()) throw std::invalid_argument("timestamp");
      label = std::stoull(cols[3], &used);
      if (used != cols[3].size() || label > 1) throw std::invalid_argument("label");
    } catch (const std::exception& ex) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": malformed row (" + ex.what() + ")");
    }
    e.label = static_cast<std::uint8_t>(label);
    ds.events.push_back(e);
  }
  return ds;
}

void SyntheticConfig::validate() const {
  if (n_clusters == 0 || n_clusters > n_items) throw std::invalid_argument("synthetic: need 1 <= n_clusters <= n_items");
  if (text_dim == 0 || vision_dim == 0 || latent_dim == 0) throw std::invalid_argument("synthetic: dims must be >= 1");
  if (modality_unique_frac < 0 || modality_unique_frac > 1) throw std::invalid_argument("synthetic: modality_unique_frac must be in [0,1]");
  if (p_gap < 0 || p_gap > 1) throw std::invalid_argument("synthetic: p_gap must be in [0,1]");
  if (content_noise < 0) throw std::invalid_argument("synthetic: content_noise must be >= 0");
  if (dirichlet_alpha <= 0) throw std::invalid_argument("synthetic: dirichlet_alpha must be > 0");
}

namespace {

MatrixD gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  MatrixD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace

SyntheticItems gen_synthetic_items(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const auto L = static_cast<Eigen::Index>(cfg.latent_dim);
  const MatrixD proj_t = gaussian(static_cast<Eigen::Index>(cfg.text_dim), L, rng);
  const MatrixD proj_v = gaussian(static_cast<Eigen::Index>(cfg.vision_dim), L, rng);
  const MatrixD shared = gaussian(static_cast<Eigen::Index>(cfg.n_clusters), L, rng);

  SyntheticItems out;
  out.content_cluster.resize(cfg.n_items);
  for (std::size_t i = 0; i < cfg.n_items; ++i) out.content_cluster[i] = static_cast<std::uint32_t>(i % cfg.n_clusters);
  std::shuffle(out.content_cluster.begin(), out.content_cluster.end(), rng);

  const double ws = std::sqrt(1.0 - cfg.modality_unique_frac);
  const double wu = std::sqrt(cfg.modality_unique_frac);
  const double noise_t = cfg.content_noise / std::sqrt(static_cast<double>(cfg.text_dim));
  const double noise_v = cfg.content_noise / std::sqrt(static_cast<double>(cfg.vision_dim));
  std::normal_distribution<double> normal(0.0, 1.0);

  MatrixF text(static_cast<Eigen::Index>(cfg.n_items), static_cast<Eigen::Index>(cfg.text_dim));
  MatrixF vision(static_cast<Eigen::Index>(cfg.n_items), static_cast<Eigen::Index>(cfg.vision_dim));
  std::vector<std::uint64_t> ids(cfg.n_items);
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    ids[i] = i;
    const auto c = static_cast<Eigen::Index>(out.content_cluster[i]);
    const MatrixD ut = gaussian(1, L, rng);
    const MatrixD uv = gaussian(1, L, rng);
    Vector<double> ht = (ws * shared.row(c) + wu * ut).transpose();
    Vector<double> hv = (ws * shared.row(c) + wu * uv).transpose();
    Vector<double> xt = proj_t * ht;
    Vector<double> xv = proj_v * hv;
    xt /= xt.norm();
    xv /= xv.norm();
    const auto r = static_cast<Eigen::Index>(i);
    for (Eigen::Index j = 0; j < xt.size(); ++j) text(r, j) = static_cast<float>(xt(j) + noise_t * normal(rng));
    for (Eigen::Index j = 0; j < xv.size(); ++j) vision(r, j) = static_cast<float>(xv(j) + noise_v * normal(rng));
  }
  out.items = EmbeddingDataset(std::move(ids), std::move(text), std::move(vision));
  return out;
}

SyntheticInteractions gen_synthetic_interactions(const SyntheticItems& items, const SyntheticConfig& cfg) {
  cfg.validate();
  const std::size_t n = items.items.size();
  if (items.content_cluster.size() != n) throw std::invalid_argument("gen_synthetic_interactions: label count mismatch");
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  SyntheticInteractions out;
  out.behavior_cluster = items.content_cluster;
  std::bernoulli_distribution gap(cfg.p_gap);
  if (cfg.n_clusters > 1) {
    std::uniform_int_distribution<std::uint32_t> other(0, static_cast<std::uint32_t>(cfg.n_clusters - 2));
    for (auto& c : out.behavior_cluster) {
      if (gap(rng)) {
        const std::uint32_t pick = other(rng);
        c = pick >= c ? pick + 1 : pick;
      }
    }
  }

  // Popularity: random rank permutation, weight rank^-s.
  std::vector<std::size_t> rank(n);
  std::iota(rank.begin(), rank.end(), std::size_t{1});
  std::shuffle(rank.begin(), rank.end(), rng);
  std::vector<std::vector<std::size_t>> members(cfg.n_clusters);
  for (std::size_t i = 0; i < n; ++i) members[out.behavior_cluster[i]].push_back(i);
  std::vector<std::discrete_distribution<std::size_t>> within(cfg.n_clusters);
  std::vector<double> cluster_ok(cfg.n_clusters, 0.0);
  for (std::size_t c = 0; c < cfg.n_clusters; ++c) {
    std::vector<double> w;
    for (std::size_t i : members[c]) w.push_back(std::pow(static_cast<double>(rank[i]), -cfg.zipf_exponent));
    if (!w.empty()) {
      within[c] = std::discrete_distribution<std::size_t>(w.begin(), w.end());
      cluster_ok[c] = 1.0;
    }
  }

  std::gamma_distribution<double> gamma(cfg.dirichlet_alpha, 1.0);
  std::uniform_int_distribution<std::size_t> uniform_item(0, n - 1);
  const auto& ids = items.items.ids();
  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    std::vector<double> pref(cfg.n_clusters);
    double total = 0.0;
    for (std::size_t c = 0; c < cfg.n_clusters; ++c) {
      pref[c] = gamma(rng) * cluster_ok[c];
      total += pref[c];
    }
    if (!(total > 0.0)) pref = cluster_ok;
    std::discrete_distribution<std::size_t> pick_cluster(pref.begin(), pref.end());
    for (std::size_t k = 0; k < cfg.seq_len; ++k) {
      const std::size_t c = pick_cluster(rng);
      const std::size_t item = members[c][within[c](rng)];
      const std::uint64_t ts = 10ull * k;
      out.log.events.push_back({u, ids[item], ts, 1});
      for (std::size_t j = 0; j < cfg.negatives_per_positive; ++j)
        out.log.events.push_back({u, ids[uniform_item(rng)], ts + 1 + j, 0});
    }
  }
  return out;
}

std::string to_string(Stratum s) {
  switch (s) {
    case Stratum::popular: return "popular";
    case Stratum::middle: return "middle";
    case Stratum::long_tail: return "long_tail";
  }
  return "middle";
}

std::vector<std::uint64_t> PopularityStrata::members(Stratum s) const {
  std::vector<std::uint64_t> out;
  for (const auto& [id, st] : stratum)
    if (st == s) out.push_back(id);
  std::sort(out.begin(), out.end());
  return out;
}

PopularityStrata popularity_strata(const InteractionDataset& log, std::pair<double, double> quantiles,
                                   const std::vector<std::uint64_t>& catalog_ids) {
  if (log.events.empty()) throw std::invalid_argument("popularity_strata: empty interaction log");
  const auto [q_lo, q_hi] = quantiles;
  if (!(q_lo >= 0 && q_lo <= q_hi && q_hi <= 1)) throw std::invalid_argument("popularity_strata: bad quantiles");
  std::unordered_map<std::uint64_t, std::uint64_t> counts;
  for (auto id : catalog_ids) counts.emplace(id, 0);
  for (const auto& e : log.events) ++counts[e.item_id];
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  const std::size_t n = ranked.size();
  // Small epsilon keeps q*n exact for representable products like 0.25*4.
  const auto top = static_cast<std::size_t>(std::ceil(q_lo * static_cast<double>(n) - 1e-9));
  const auto upper = static_cast<std::size_t>(std::ceil(q_hi * static_cast<double>(n) - 1e-9));
  PopularityStrata out;
  for (std::size_t i = 0; i < n; ++i) {
    Stratum s = i < top ? Stratum::popular : (i >= upper ? Stratum::long_tail : Stratum::middle);
    out.stratum.emplace(ranked[i].first, s);
  }
  out.popular_count = top;
  out.long_tail_count = n - upper;
  out.popular_min_events = top > 0 ? ranked[top - 1].second : 0;
  out.long_tail_max_events = upper < n ? ranked[upper].second : 0;
  return out;
}

}  // namespace mmq
