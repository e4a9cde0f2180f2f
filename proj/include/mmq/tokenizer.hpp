#pragma once

#include "mmq/checkpoint.hpp"
#include "mmq/datasets.hpp"
#include "mmq/quantize.hpp"
#include "mmq/semantic_id.hpp"
#include "mmq/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace mmq {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ExpertGroup : std::uint8_t { shared, text, vision };

struct TokenizerConfig {
  std::size_t text_dim = 256;
  std::size_t vision_dim = 256;
  std::size_t n_shared = 2;
  std::size_t n_text = 2;
  std::size_t n_vision = 2;
  std::size_t latent_dim = 128;
  std::size_t codebook_size = 100;
  std::vector<std::size_t> expert_hidden{512};
  /// Overrides expert_hidden for modality-specific experts when non-empty.
  std::vector<std::size_t> specific_hidden;
  std::size_t gate_hidden = 64;
  std::vector<std::size_t> decoder_hidden{512};
  Activation activation = Activation::relu;
  double alpha = 12.0;
  double beta = 10.0;
  double gamma = 0.005;
  double ema_decay = 0.99;
  std::size_t dead_code_steps = 20;
  /// false selects L2 lookup with raw (unnormalized) codewords.
  bool use_cosine = true;
  bool shared_codebook = false;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t id_length() const { return n_shared + n_text + n_vision; }
  std::size_t input_dim() const { return text_dim + vision_dim; }
  ExpertGroup group_of(std::size_t slot) const;

  MlpSpec expert_spec(ExpertGroup g) const;
  MlpSpec gate_spec(ExpertGroup g) const;
  MlpSpec decoder_spec() const;
  MlpSpec aux_decoder_spec(ExpertGroup g) const;

  std::string to_json() const;
  /// Unknown keys raise ConfigError naming the key.
  static TokenizerConfig from_json(const std::string& json);
};

/// Stage-1 parameters. Slots are ordered [shared..., text..., vision...];
/// `experts[j]` encodes slot j.
template <typename T>
struct TokenizerModel {
  TokenizerConfig config;
  std::vector<Mlp<T>> experts;
  Mlp<T> gate_text;
  Mlp<T> gate_vision;
  Parameter<T> gate_text_bias;
  Parameter<T> gate_vision_bias;
  Mlp<T> decoder;
  Mlp<T> decoder_text;
  Mlp<T> decoder_vision;
  /// One K x d_z table per slot, or a single table with shared_codebook.
  std::vector<Parameter<T>> codebooks;

  /// Seeded initialization; codebooks start as random unit rows.
  static TokenizerModel init(const TokenizerConfig& cfg);

  Parameter<T>& codebook(std::size_t slot) { return codebooks[config.shared_codebook ? 0 : slot]; }
  const Parameter<T>& codebook(std::size_t slot) const { return codebooks[config.shared_codebook ? 0 : slot]; }
  std::size_t id_length() const { return config.id_length(); }

  /// Expert, gate and decoder parameters (everything Adam updates in stage 1).
  std::vector<Parameter<T>*> network_parameters();
  std::vector<Parameter<T>*> codebook_parameters();
  /// Trainable scalars including codebooks.
  std::size_t parameter_count() const;
  void zero_grad();

  template <typename U>
  TokenizerModel<U> cast() const;

  Checkpoint to_checkpoint(const std::string& stage = "stage1") const;
  static TokenizerModel from_checkpoint(const Checkpoint& ckpt);
};

/// Forward state for a batch of items.
template <typename T>
struct LatentBundle {
  Matrix<T> text;
  Matrix<T> vision;
  Matrix<T> joint;
  std::vector<typename Mlp<T>::Cache> expert_caches;
  /// Per-slot latents z_{s,i} / z_{t,i} / z_{v,i} (batch x d_z).
  std::vector<Matrix<T>> latents;
  typename Mlp<T>::Cache gate_text_cache;
  typename Mlp<T>::Cache gate_vision_cache;
  Matrix<T> gates_text;    // batch x N_t
  Matrix<T> gates_vision;  // batch x N_v
  Matrix<T> z;
  std::vector<std::vector<std::uint32_t>> codes;  // per slot
  std::vector<Matrix<T>> quantized;               // selected codewords per slot
  Matrix<T> zq;
  std::size_t zero_latents = 0;

  std::size_t batch() const { return static_cast<std::size_t>(z.rows()); }
  /// Slot-ordered codes of row i.
  SemanticId id(std::size_t i) const;
};

/// Stop-gradient values frozen at a base point (see grad checks).
template <typename T>
struct TokenizerFrozen {
  Matrix<T> decoder_offset;                 // zq - z
  std::vector<Matrix<T>> slot_offsets;      // q_j - z_j per slot
};

template <typename T>
TokenizerFrozen<T> freeze(const LatentBundle<T>& b);

/// Experts only: fills text/vision/joint, caches and latents.
template <typename T>
LatentBundle<T> encode_experts(const TokenizerModel<T>& model, const Matrix<T>& text, const Matrix<T>& vision);
/// Gate softmax weights for both modalities.
template <typename T>
void gate_weights(const TokenizerModel<T>& model, LatentBundle<T>& b);
/// z = sum shared + sum g_t * text + sum g_v * vision.
template <typename T>
void fuse(const TokenizerModel<T>& model, LatentBundle<T>& b);
/// Per-slot lookup, selected codewords and fused z_q.
template <typename T>
void quantize_bundle(const TokenizerModel<T>& model, LatentBundle<T>& b);
/// encode_experts + gate_weights + fuse + quantize_bundle.
template <typename T>
LatentBundle<T> forward(const TokenizerModel<T>& model, const Matrix<T>& text, const Matrix<T>& vision);

/// Weighted combination over slots of per-slot matrices, using unit weights
/// for shared slots and gate weights for specific ones.
template <typename T>
Matrix<T> fuse_slots(const TokenizerConfig& cfg, const LatentBundle<T>& b, const std::vector<Matrix<T>>& per_slot);

struct LookupResult {
  std::uint32_t index = 0;
  bool zero_latent = false;
};

/// argmax_j cos(z, c_j), lowest index on ties; a zero vector maps to 0 with
/// `zero_latent` set. Increments the chosen usage counter.
LookupResult cosine_lookup(const float* z, Codebook& book);

/// Row-wise cosine argmax (or L2 argmin when `cosine` is false), evaluated
/// in 64-bit. Zero rows map to index 0 and are counted in `zero_rows`.
template <typename T>
std::vector<std::uint32_t> lookup_rows(const Matrix<T>& latents, const Matrix<T>& codewords, bool cosine,
                                       std::size_t* zero_rows = nullptr);

/// Gradients w.r.t. forward quantities, consumed by tokenizer_backward().
template <typename T>
struct BundleGrad {
  Matrix<T> dz;
  std::vector<Matrix<T>> dlatents;
  Matrix<T> dgates_text;
  Matrix<T> dgates_vision;

  static BundleGrad zeros(const LatentBundle<T>& b);
};

/// Backpropagates `g` through fusion, gates and experts into the model grads.
template <typename T>
void tokenizer_backward(TokenizerModel<T>& model, const LatentBundle<T>& b, BundleGrad<T> g);

struct Stage1Loss {
  double recon = 0.0;
  double aux = 0.0;
  double ortho = 0.0;
  double total = 0.0;
};

/// Mean squared error between [e_t, e_v] and decoder(z + sg(zq - z)).
template <typename T>
double recon_loss(TokenizerModel<T>& model, const LatentBundle<T>& b, const TokenizerFrozen<T>* frozen = nullptr,
                  BundleGrad<T>* grad = nullptr, T weight = T(1));
/// MSE(e_t, decoder_t(sum_j st(z_{t,j}))) + MSE(e_v, decoder_v(sum_j st(z_{v,j}))).
template <typename T>
double aux_loss(TokenizerModel<T>& model, const LatentBundle<T>& b, const TokenizerFrozen<T>* frozen = nullptr,
                BundleGrad<T>* grad = nullptr, T weight = T(1));
/// Sum over expert groups of ||V_n V_n^T - I||_F^2 on flattened expert parameters.
template <typename T>
double ortho_loss(TokenizerModel<T>& model, bool backward = false, T weight = T(1));
/// Loss of one expert group (0 with fewer than two experts).
template <typename T>
double ortho_group_loss(const TokenizerModel<T>& model, ExpertGroup g);

/// alpha * recon + beta * aux + gamma * ortho on a batch, with optional backward.
template <typename T>
Stage1Loss total_loss(TokenizerModel<T>& model, const Matrix<T>& text, const Matrix<T>& vision,
                      const TokenizerFrozen<T>* frozen = nullptr, bool backward = false,
                      LatentBundle<T>* bundle_out = nullptr);

/// Running EMA statistics for every codebook.
struct EmaState {
  std::vector<MatrixF> sums;
  std::vector<std::vector<double>> sizes;
  std::vector<std::vector<std::size_t>> idle_steps;

  static EmaState init(const TokenizerModel<float>& model);
};

/// One EMA step from the lookups recorded in `b`; codes idle for
/// dead_code_steps are re-seeded to random latents of the batch.
/// Returns the number of restarted codes.
std::size_t ema_codebook_update(TokenizerModel<float>& model, EmaState& state, const LatentBundle<float>& b,
                                std::mt19937_64& rng);

/// Per-slot k-means on the latents of `b` (unit-normalized in cosine mode).
void init_codebooks_kmeans(TokenizerModel<float>& model, const LatentBundle<float>& b, std::uint64_t seed);

struct EpochReport {
  std::size_t epoch = 0;
  double loss = 0.0;
  double recon_loss = 0.0;
  double aux_loss = 0.0;
  double ortho_loss = 0.0;
  double utilization = 0.0;
  double entropy = 0.0;
  std::size_t restarts = 0;
  std::size_t zero_latents = 0;

  std::string to_json() const;
};

struct Stage1Options {
  std::size_t epochs = 20;
  std::size_t batch_size = 256;
  float lr = 1e-3f;
  std::function<void(const EpochReport&)> on_epoch;
};

/// Stage-1 loop: Adam on networks, EMA on codebooks. Throws NumericError on a
/// non-finite loss.
std::vector<EpochReport> train_stage1(TokenizerModel<float>& model, const EmbeddingDataset& ds,
                                      const Stage1Options& opts);

SemanticId tokenize(const TokenizerModel<float>& model, const MultimodalEmbedding& e);
std::vector<SemanticId> tokenize_all(const TokenizerModel<float>& model, const EmbeddingDataset& ds);
/// Per-dimension reconstruction MSE of the main decoder over a dataset.
double dataset_recon_loss(const TokenizerModel<float>& model, const EmbeddingDataset& ds);

/// Mean absolute off-diagonal cosine between flattened experts of each
/// group with at least two experts.
double expert_gram_offdiag(const TokenizerModel<float>& model);

}  // namespace mmq
