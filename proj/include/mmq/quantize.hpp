#pragma once

#include "mmq/checkpoint.hpp"
#include "mmq/datasets.hpp"
#include "mmq/semantic_id.hpp"
#include "mmq/tensor.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mmq {

/// K x dim table of codewords with per-code usage counters.
struct Codebook {
  MatrixF codewords;
  std::vector<std::uint64_t> usage_counts;

  Codebook() = default;
  explicit Codebook(MatrixF words);

  std::size_t size() const { return static_cast<std::size_t>(codewords.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(codewords.cols()); }

  /// Nearest codeword by squared L2 distance; lowest index wins ties.
  std::uint32_t nearest(const float* x) const;
  /// nearest() for every row of `points`.
  std::vector<std::uint32_t> nearest_rows(const MatrixF& points) const;
  /// nearest() plus a usage-counter increment.
  std::uint32_t assign(const float* x);
  void reset_usage();
};

struct KMeansResult {
  Codebook codebook;
  std::vector<std::uint32_t> assignments;
  /// Mean squared distance after each assignment step.
  std::vector<double> distortion_history;
  double distortion = 0.0;
};

/// k-means++ seeding then Lloyd iterations. Empty clusters are re-seeded to
/// the point farthest from its centroid. Throws if rows < k.
KMeansResult kmeans(const MatrixF& points, std::size_t k, std::size_t iters, std::uint64_t seed);
/// Lloyd iterations from given initial centroids.
KMeansResult kmeans_from(const MatrixF& points, const MatrixF& init, std::size_t iters);

double mean_squared_distance(const MatrixF& a, const MatrixF& b);

enum class RqMode { kmeans, vae };

class RqVae;

/// Residual quantizer: level t quantizes what levels 1..t-1 left over.
/// In vae mode the residual chain runs in the latent space of a learned
/// encoder/decoder pair.
struct RqModel {
  RqMode mode = RqMode::kmeans;
  std::vector<Codebook> levels;
  std::shared_ptr<const RqVae> vae;
  std::vector<double> level_distortion;

  std::size_t dim() const;
  SemanticId encode(const float* x) const;
  std::vector<SemanticId> encode_rows(const MatrixF& points) const;
  MatrixF reconstruct(const MatrixF& points) const;
};

struct RqVaeOptions;

RqModel rq_fit(const MatrixF& points, std::size_t levels, std::size_t k, RqMode mode, std::uint64_t seed,
               std::size_t kmeans_iters = 25);
RqModel rq_fit(const MatrixF& points, std::size_t levels, std::size_t k, RqMode mode, std::uint64_t seed,
               const RqVaeOptions& vae_opts, std::size_t kmeans_iters = 25);

/// Product quantizer over M disjoint sub-vectors of the rotated input.
struct OpqModel {
  std::size_t m = 1;
  std::vector<Codebook> books;
  MatrixF rotation;
  std::vector<double> distortion_history;

  std::size_t dim() const { return static_cast<std::size_t>(rotation.rows()); }
  SemanticId encode(const float* x) const;
  std::vector<SemanticId> encode_rows(const MatrixF& points) const;
  MatrixF reconstruct(const MatrixF& points) const;
  double orthogonality_error() const;
};

/// rotate=false: plain PQ. rotate=true: alternates per-block k-means with an
/// orthogonal Procrustes rotation update for `iters` rounds.
OpqModel opq_fit(const MatrixF& points, std::size_t m, std::size_t k, bool rotate, std::size_t iters,
                 std::uint64_t seed, std::size_t kmeans_iters = 25);

enum class Paradigm { MA, MS };
enum class BaselineMethod { rq_vae, rq_kmeans, opq };

std::string to_string(Paradigm p);
std::string to_string(BaselineMethod m);
Paradigm parse_paradigm(const std::string& s);
BaselineMethod parse_baseline_method(const std::string& s);

struct BaselineConfig {
  BaselineMethod method = BaselineMethod::rq_kmeans;
  Paradigm paradigm = Paradigm::MA;
  /// Codes per item; MS splits them evenly between text and vision.
  std::size_t id_length = 6;
  std::size_t k = 100;
  std::size_t kmeans_iters = 25;
  std::size_t opq_iters = 8;
  bool opq_rotate = true;
  std::uint64_t seed = 1;
};

/// A fitted baseline tokenizer: one quantizer over [e_t, e_v] (MA) or one
/// per modality (MS, text codes first).
struct BaselineTokenizer {
  BaselineConfig config;
  std::size_t text_dim = 0;
  std::size_t vision_dim = 0;
  std::vector<RqModel> rq;
  std::vector<OpqModel> opq;

  std::size_t id_length() const;
  std::size_t codebook_size() const { return config.k; }
  SemanticId tokenize(const MultimodalEmbedding& e) const;
  std::vector<SemanticId> tokenize_all(const EmbeddingDataset& ds) const;
  /// Per-dimension MSE between [e_t, e_v] and its reconstruction.
  double recon_loss(const EmbeddingDataset& ds) const;

  Checkpoint to_checkpoint() const;
};

BaselineTokenizer fit_baseline(const EmbeddingDataset& ds, const BaselineConfig& cfg, const RqVaeOptions* vae_opts = nullptr);
/// Inverse of BaselineTokenizer::to_checkpoint().
BaselineTokenizer baseline_from_checkpoint(const Checkpoint& ckpt);

/// Tokenizes with a fitted baseline after checking that it was fitted under
/// `paradigm` and on matching modality dimensions.
SemanticId baseline_tokenize(const BaselineTokenizer& model, Paradigm paradigm, const MultimodalEmbedding& e);

}  // namespace mmq
