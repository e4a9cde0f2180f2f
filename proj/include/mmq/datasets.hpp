#pragma once

#include "mmq/checkpoint.hpp"
#include "mmq/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mmq {

struct MultimodalEmbedding {
  std::uint64_t item_id = 0;
  std::vector<float> text;
  std::vector<float> vision;

  std::vector<float> concatenated() const;
};

/// Item catalog of text/vision embedding pairs, stored as two row-aligned
/// matrices (N x D_t and N x D_v).
class EmbeddingDataset {
 public:
  EmbeddingDataset() = default;
  EmbeddingDataset(std::size_t text_dim, std::size_t vision_dim);
  EmbeddingDataset(std::vector<std::uint64_t> ids, MatrixF text, MatrixF vision);

  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  std::size_t text_dim() const { return text_dim_; }
  std::size_t vision_dim() const { return vision_dim_; }

  const std::vector<std::uint64_t>& ids() const { return ids_; }
  const MatrixF& text() const { return text_; }
  const MatrixF& vision() const { return vision_; }
  MatrixF concatenated() const;

  MultimodalEmbedding item(std::size_t row) const;
  void push_back(const MultimodalEmbedding& e);

  /// Row of `item_id`, or -1 when absent.
  std::ptrdiff_t find(std::uint64_t item_id) const;
  std::size_t row_of(std::uint64_t item_id) const;

  EmbeddingDataset subset(const std::vector<std::size_t>& rows) const;
  /// L2-normalizes each modality's vector per item.
  EmbeddingDataset normalized() const;

  /// Throws std::invalid_argument on duplicate ids or non-finite values.
  void validate() const;

  bool operator==(const EmbeddingDataset& o) const;

 private:
  void index();

  std::size_t text_dim_ = 0;
  std::size_t vision_dim_ = 0;
  std::vector<std::uint64_t> ids_;
  MatrixF text_;
  MatrixF vision_;
  std::unordered_map<std::uint64_t, std::size_t> rows_;
};

/// "MMQE" u32 version=1, u32 N, u32 D_t, u32 D_v, then N x (u64 id, D_t f32, D_v f32), little-endian.
std::string encode_embeddings(const EmbeddingDataset& ds);
EmbeddingDataset decode_embeddings(const std::string& bytes);
void write_embeddings(const EmbeddingDataset& ds, const std::filesystem::path& path);
EmbeddingDataset read_embeddings(const std::filesystem::path& path);

struct Interaction {
  std::uint64_t user_id = 0;
  std::uint64_t item_id = 0;
  std::uint64_t timestamp = 0;
  std::uint8_t label = 1;

  bool operator==(const Interaction&) const = default;
};

struct InteractionDataset {
  std::vector<Interaction> events;

  /// Positive item sequences per user, ordered by timestamp.
  std::vector<std::pair<std::uint64_t, std::vector<std::uint64_t>>> positive_sequences() const;
  /// Throws std::invalid_argument if an item is missing from `catalog` or a
  /// user's events are out of timestamp order.
  void validate(const EmbeddingDataset& catalog) const;
};

/// TSV with header "user_id\titem_id\ttimestamp\tlabel".
void write_interactions(const InteractionDataset& ds, const std::filesystem::path& path);
InteractionDataset read_interactions(const std::filesystem::path& path);

struct SyntheticConfig {
  std::size_t n_items = 5000;
  std::size_t n_users = 2000;
  std::size_t n_clusters = 20;
  std::size_t text_dim = 256;
  std::size_t vision_dim = 256;
  std::size_t latent_dim = 32;
  double content_noise = 0.05;
  double modality_unique_frac = 0.3;
  double p_gap = 0.0;
  std::size_t seq_len = 30;
  double zipf_exponent = 1.1;
  double dirichlet_alpha = 0.2;
  std::size_t negatives_per_positive = 4;
  std::uint64_t seed = 1;

  void validate() const;
};

struct SyntheticItems {
  EmbeddingDataset items;
  std::vector<std::uint32_t> content_cluster;
};

struct SyntheticInteractions {
  InteractionDataset log;
  std::vector<std::uint32_t> behavior_cluster;
};

/// Items of cluster c mix a shared latent s_c with per-item modality-unique
/// latents, are projected to D_t / D_v, unit-normalized, and perturbed by
/// Gaussian noise of total norm ~content_noise.
SyntheticItems gen_synthetic_items(const SyntheticConfig& cfg);

/// Behavioral clusters diverge from content clusters with probability p_gap;
/// users sample positives from a Dirichlet preference over behavioral
/// clusters, Zipf-skewed by item popularity, plus uniform negatives.
SyntheticInteractions gen_synthetic_interactions(const SyntheticItems& items, const SyntheticConfig& cfg);

enum class Stratum : std::uint8_t { popular, middle, long_tail };
std::string to_string(Stratum s);

struct PopularityStrata {
  std::unordered_map<std::uint64_t, Stratum> stratum;
  std::size_t popular_count = 0;
  std::size_t long_tail_count = 0;
  std::uint64_t popular_min_events = 0;
  std::uint64_t long_tail_max_events = 0;

  Stratum of(std::uint64_t item_id) const { return stratum.at(item_id); }
  std::vector<std::uint64_t> members(Stratum s) const;
};

/// Ranks items by event count (ties by ascending id): the top ceil(q_lo*n)
/// are popular, the bottom n - ceil(q_hi*n) long-tail. Items listed in
/// `catalog_ids` but absent from the log count as zero events.
PopularityStrata popularity_strata(const InteractionDataset& log, std::pair<double, double> quantiles = {0.25, 0.75},
                                   const std::vector<std::uint64_t>& catalog_ids = {});

}  // namespace mmq
