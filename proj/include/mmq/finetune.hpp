#pragma once

#include "mmq/datasets.hpp"
#include "mmq/metrics.hpp"
#include "mmq/quantize.hpp"
#include "mmq/rqvae.hpp"
#include "mmq/tokenizer.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace mmq {

struct FinetuneConfig {
  double alpha_prime = 0.5;
  double beta_prime = 0.5;
  double tau = 1.0;
  /// Learning rate of the retrieval head tables.
  float lr = 5e-3f;
  /// Learning rate of tokenizer networks and codebooks.
  float tokenizer_lr = 1e-3f;
  std::size_t epochs = 20;
  /// Leading epochs that train only the head (tokenizer frozen).
  std::size_t warmup_epochs = 5;
  std::size_t batch_size = 256;
  std::size_t history = 10;
  /// Training targets drawn per user and epoch.
  std::size_t samples_per_user = 1;
  /// Subtract log sampling frequency from in-batch logits so the softmax is
  /// not biased against popular items.
  bool logq_correction = true;
  std::size_t embed_dim = 64;
  bool freeze_encoders = false;
  bool freeze_codebooks = false;
  std::vector<std::size_t> cutoffs{5, 10};
  std::uint64_t seed = 1;

  void validate() const;
  bool tokenizer_frozen() const { return freeze_encoders && freeze_codebooks; }
};

/// Soft indices of one latent against one codebook.
struct SoftIndexResult {
  RowVector<double> logits;
  RowVector<double> soft;
  RowVector<double> hard;
  /// Forward value of soft + sg(hard - soft), which is hard exactly.
  RowVector<double> ind;
  double tau = 1.0;
  std::uint32_t index = 0;
};

/// Cosine logits against every codeword, softmax(logits / tau), one-hot at
/// the argmax (lowest index on ties). Throws NumericError on a zero latent.
SoftIndexResult soft_indices(const RowVector<double>& z, const MatrixD& codebook, double tau);

/// Batched soft indices for one slot.
template <typename T>
struct SlotSoft {
  Matrix<T> logits;
  Matrix<T> soft;
  /// Forward value of the straight-through composition.
  Matrix<T> ind;
  std::vector<std::uint32_t> hard;
};

/// `cosine` selects cosine logits, otherwise -||z - c||^2. With `ind_offset`
/// the composition is evaluated literally as soft + ind_offset.
template <typename T>
SlotSoft<T> soft_slot(const Matrix<T>& latents, const Matrix<T>& codebook, T tau, bool cosine,
                      const std::vector<std::uint32_t>& hard, const Matrix<T>* ind_offset = nullptr);

/// Backward of soft_slot given d(loss)/d(ind): accumulates into dlatents and dcodebook.
template <typename T>
void soft_slot_backward(const Matrix<T>& latents, const Matrix<T>& codebook, const SlotSoft<T>& s, T tau, bool cosine,
                        const Matrix<T>& dind, Matrix<T>& dlatents, Matrix<T>& dcodebook);

/// Per-slot K x d_r embedding tables; an item is the sum of its slots' rows.
template <typename T>
struct RetrievalHead {
  std::size_t history = 10;
  std::vector<Parameter<T>> tables;

  static RetrievalHead init(std::size_t slots, std::size_t k, std::size_t dim, std::size_t history, std::uint64_t seed);
  std::size_t dim() const { return static_cast<std::size_t>(tables.front().value.cols()); }
  std::vector<Parameter<T>*> parameters();
  /// sum_i ind_i . E_i (exact row lookups for one-hot inputs).
  Matrix<T> item_repr(const std::vector<Matrix<T>>& ind) const;
  /// sum_i E_i[c_i] for each id.
  Matrix<T> item_repr(const std::vector<SemanticId>& ids) const;

  template <typename U>
  RetrievalHead<U> cast() const {
    RetrievalHead<U> out;
    out.history = history;
    for (const auto& t : tables) out.tables.push_back(t.template cast<U>());
    return out;
  }
};

/// In-batch softmax cross-entropy: row i of `users` should score row i of
/// `items` highest. Writes gradients when the outputs are set. Batch of 1 throws.
/// With `keys`, rows whose targets share a key are not negatives of each other.
/// `column_offsets` are added to every score in a column before the softmax.
template <typename T>
double retrieval_loss(const Matrix<T>& users, const Matrix<T>& items, Matrix<T>* dusers = nullptr,
                      Matrix<T>* ditems = nullptr, const std::vector<std::size_t>* keys = nullptr,
                      const std::vector<double>* column_offsets = nullptr);

/// A training batch over the M distinct items it touches.
struct FinetuneBatch {
  std::vector<std::size_t> item_rows;               // dataset rows of the distinct items
  std::vector<std::vector<std::size_t>> histories;  // per user, indices into item_rows
  std::vector<std::size_t> targets;                 // per user, index into item_rows
  /// Per user: -log of the target's sampling frequency (empty disables the correction).
  std::vector<double> target_offsets;
};

struct JointLoss {
  double downstream = 0.0;
  double recon = 0.0;
  double aux = 0.0;
  double total = 0.0;
};

/// Stop-gradient constants for finite-difference checks of the joint loss.
template <typename T>
struct MmqJointFrozen {
  TokenizerFrozen<T> tokenizer;
  std::vector<Matrix<T>> ind_offsets;  // hard - soft per slot
};

/// L_downstream + alpha' L_recon + beta' L_aux through the soft-index path.
/// `text`/`vision` hold the batch's distinct items in item_rows order.
template <typename T>
JointLoss mmq_joint_loss(TokenizerModel<T>& tok, RetrievalHead<T>& head, const Matrix<T>& text, const Matrix<T>& vision,
                         const FinetuneBatch& batch, const FinetuneConfig& cfg, const MmqJointFrozen<T>* frozen,
                         bool backward, MmqJointFrozen<T>* capture = nullptr);

template <typename T>
struct RqJointFrozen {
  std::vector<RqVaeFrozen<T>> parts;
  std::vector<Matrix<T>> ind_offsets;  // per level, parts concatenated
};

/// Same objective for residual quantizers: soft indices per residual level
/// (logits -||r_l - c||^2), recon through each part's decoder, no aux term.
template <typename T>
JointLoss rqvae_joint_loss(std::vector<RqVaeNet<T>*> parts, RetrievalHead<T>& head, const std::vector<Matrix<T>>& inputs,
                           const FinetuneBatch& batch, const FinetuneConfig& cfg, const RqJointFrozen<T>* frozen,
                           bool backward, RqJointFrozen<T>* capture = nullptr);

/// Leave-one-out split: the last positive of each user is the test target.
struct LeaveOneOut {
  std::vector<std::uint64_t> users;
  /// Full positive sequences as catalog rows (test target last).
  std::vector<std::vector<std::size_t>> sequences;
  /// Catalog rows of label-0 events per user.
  std::vector<std::vector<std::size_t>> negatives;
};

/// Users with at least three positives; throws if an item is missing from the catalog.
LeaveOneOut leave_one_out(const InteractionDataset& log, const EmbeddingDataset& catalog);

struct EvalResult {
  RankingMetrics metrics;
  std::vector<std::size_t> ranks;
  std::vector<std::uint64_t> target_items;
};

/// Full-catalog dot-product ranking of each user's held-out item (ties go to
/// the lower catalog row). Also fills AUC/GAUC from the users' negatives.
EvalResult evaluate_retrieval(const MatrixF& item_reprs, const LeaveOneOut& split, const EmbeddingDataset& catalog,
                              std::size_t history, const std::vector<std::size_t>& cutoffs);

struct FinetuneResult {
  RankingMetrics pre;
  RankingMetrics post;
  EvalResult post_eval;
  double pre_recon = 0.0;
  double post_recon = 0.0;
  std::vector<JointLoss> epoch_losses;
};

using FinetuneLogger = std::function<void(std::size_t epoch, const JointLoss&)>;

/// Joint stage-2 training of an MMQ tokenizer and the retrieval head.
/// Recon losses are measured on `recon_set` (the catalog when null).
FinetuneResult finetune(TokenizerModel<float>& tok, RetrievalHead<float>& head, const InteractionDataset& log,
                        const EmbeddingDataset& catalog, const FinetuneConfig& cfg,
                        const EmbeddingDataset* recon_set = nullptr, const FinetuneLogger& logger = {});

/// The same procedure applied to a vae-mode baseline (soft indices per residual level).
FinetuneResult finetune_baseline_rqvae(BaselineTokenizer& tok, RetrievalHead<float>& head, const InteractionDataset& log,
                                       const EmbeddingDataset& catalog, const FinetuneConfig& cfg,
                                       const EmbeddingDataset* recon_set = nullptr, const FinetuneLogger& logger = {});

/// Trains only the head on fixed semantic IDs (any tokenizer).
FinetuneResult train_head_on_ids(const std::vector<SemanticId>& ids, RetrievalHead<float>& head,
                                 const InteractionDataset& log, const EmbeddingDataset& catalog, const FinetuneConfig& cfg,
                                 const FinetuneLogger& logger = {});

}  // namespace mmq
