#include "mmq/finetune.hpp"

#include "mmq/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <unordered_map>

namespace mmq {

void FinetuneConfig::validate() const {
  if (alpha_prime < 0 || beta_prime < 0) throw ConfigError("finetune.alpha_prime/beta_prime: must be >= 0");
  if (!(tau > 0)) throw ConfigError("finetune.tau: must be > 0");
  if (!(lr > 0) || !(tokenizer_lr > 0)) throw ConfigError("finetune.lr/tokenizer_lr: must be > 0");
  if (batch_size < 2) throw ConfigError("finetune.batch_size: in-batch negatives need at least 2");
  if (history == 0) throw ConfigError("finetune.history: must be >= 1");
  if (samples_per_user == 0) throw ConfigError("finetune.samples_per_user: must be >= 1");
  if (embed_dim == 0) throw ConfigError("finetune.embed_dim: must be >= 1");
  if (cutoffs.empty()) throw ConfigError("finetune.cutoffs: need at least one N");
  for (auto n : cutoffs)
    if (n == 0) throw ConfigError("finetune.cutoffs: N must be >= 1");
}

// ---------------------------------------------------------------- soft indices

SoftIndexResult soft_indices(const RowVector<double>& z, const MatrixD& codebook, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("soft_indices: tau must be > 0");
  if (z.size() != codebook.cols()) throw ShapeError("soft_indices: latent/codebook dim mismatch");
  const double zn = z.norm();
  if (!(zn > 0.0)) throw NumericError("soft_indices: zero latent");
  SoftIndexResult r;
  r.tau = tau;
  const Eigen::Index k = codebook.rows();
  r.logits.resize(k);
  double best = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < k; ++j) {
    const double cn = codebook.row(j).norm();
    r.logits(j) = cn > 0.0 ? z.dot(codebook.row(j)) / (zn * cn) : 0.0;
    if (r.logits(j) > best) {
      best = r.logits(j);
      r.index = static_cast<std::uint32_t>(j);
    }
  }
  const RowVector<double> scaled = r.logits / tau;
  r.soft = (scaled.array() - scaled.maxCoeff()).exp().matrix();
  r.soft /= r.soft.sum();
  r.hard = RowVector<double>::Zero(k);
  r.hard(r.index) = 1.0;
  r.ind = r.hard;
  return r;
}

template <typename T>
SlotSoft<T> soft_slot(const Matrix<T>& latents, const Matrix<T>& codebook, T tau, bool cosine,
                      const std::vector<std::uint32_t>& hard, const Matrix<T>* ind_offset) {
  SlotSoft<T> s;
  if (cosine) {
    s.logits = cosine_matrix(latents, codebook);
  } else {
    s.logits = T(2) * latents * codebook.transpose();
    s.logits.colwise() -= latents.rowwise().squaredNorm();
    s.logits.rowwise() -= codebook.rowwise().squaredNorm().transpose();
  }
  s.soft = softmax_rows(Matrix<T>(s.logits / tau));
  s.hard = hard;
  if (ind_offset) {
    s.ind = s.soft + *ind_offset;
  } else {
    s.ind = Matrix<T>::Zero(s.soft.rows(), s.soft.cols());
    for (std::size_t i = 0; i < hard.size(); ++i) s.ind(static_cast<Eigen::Index>(i), hard[i]) = T(1);
  }
  return s;
}

template <typename T>
void soft_slot_backward(const Matrix<T>& latents, const Matrix<T>& codebook, const SlotSoft<T>& s, T tau, bool cosine,
                        const Matrix<T>& dind, Matrix<T>& dlatents, Matrix<T>& dcodebook) {
  const Matrix<T> dlogits = softmax_rows_backward(s.soft, dind) / tau;
  if (cosine) {
    cosine_matrix_backward(latents, codebook, dlogits, &dlatents, &dcodebook);
    return;
  }
  const Vector<T> row_sum = dlogits.rowwise().sum();
  const Vector<T> col_sum = dlogits.colwise().sum().transpose();
  dlatents += T(2) * (dlogits * codebook) - T(2) * (row_sum.asDiagonal() * latents);
  dcodebook += T(2) * (dlogits.transpose() * latents) - T(2) * (col_sum.asDiagonal() * codebook);
}

// ---------------------------------------------------------------- head

template <typename T>
RetrievalHead<T> RetrievalHead<T>::init(std::size_t slots, std::size_t k, std::size_t dim, std::size_t history,
                                        std::uint64_t seed) {
  if (slots == 0 || k == 0 || dim == 0) throw std::invalid_argument("retrieval head: slots, K and dim must be >= 1");
  RetrievalHead h;
  h.history = history;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.1);
  for (std::size_t s = 0; s < slots; ++s) {
    Matrix<T> t(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<T>(normal(rng));
    h.tables.emplace_back("head.table" + std::to_string(s), std::move(t));
  }
  return h;
}

template <typename T>
std::vector<Parameter<T>*> RetrievalHead<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& t : tables) out.push_back(&t);
  return out;
}

template <typename T>
Matrix<T> RetrievalHead<T>::item_repr(const std::vector<Matrix<T>>& ind) const {
  if (ind.size() != tables.size()) throw ShapeError("item_repr: expected one index matrix per slot");
  Matrix<T> out = Matrix<T>::Zero(ind.front().rows(), static_cast<Eigen::Index>(dim()));
  for (std::size_t s = 0; s < ind.size(); ++s) {
    if (ind[s].cols() != tables[s].value.rows()) throw ShapeError("item_repr: index width != table rows");
    out += ind[s] * tables[s].value;
  }
  return out;
}

template <typename T>
Matrix<T> RetrievalHead<T>::item_repr(const std::vector<SemanticId>& ids) const {
  Matrix<T> out = Matrix<T>::Zero(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(dim()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i].length() != tables.size()) throw ShapeError("item_repr: semantic id length != slot count");
    for (std::size_t s = 0; s < tables.size(); ++s) out.row(static_cast<Eigen::Index>(i)) += tables[s].value.row(ids[i].codes[s]);
  }
  return out;
}

template <typename T>
double retrieval_loss(const Matrix<T>& users, const Matrix<T>& items, Matrix<T>* dusers, Matrix<T>* ditems,
                      const std::vector<std::size_t>* keys, const std::vector<double>* column_offsets) {
  if (users.rows() != items.rows() || users.cols() != items.cols()) throw ShapeError("retrieval_loss: shape mismatch");
  const Eigen::Index b = users.rows();
  if (b < 2) throw std::invalid_argument("retrieval_loss: batch of " + std::to_string(b) + " has no in-batch negatives");
  if (keys && keys->size() != static_cast<std::size_t>(b)) throw ShapeError("retrieval_loss: one key per row required");
  Matrix<T> scores = users * items.transpose();
  if (column_offsets) {
    if (column_offsets->size() != static_cast<std::size_t>(b)) throw ShapeError("retrieval_loss: one offset per column required");
    for (Eigen::Index j = 0; j < b; ++j) scores.col(j).array() += static_cast<T>((*column_offsets)[static_cast<std::size_t>(j)]);
  }
  if (keys)
    for (Eigen::Index i = 0; i < b; ++i)
      for (Eigen::Index j = 0; j < b; ++j)
        if (i != j && (*keys)[static_cast<std::size_t>(i)] == (*keys)[static_cast<std::size_t>(j)])
          scores(i, j) = -std::numeric_limits<T>::infinity();
  const Matrix<T> probs = softmax_rows(scores);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const T mx = scores.row(i).maxCoeff();
    const double lse = static_cast<double>(mx) + std::log(static_cast<double>((scores.row(i).array() - mx).exp().sum()));
    loss += lse - static_cast<double>(scores(i, i));
  }
  loss /= static_cast<double>(b);
  if (dusers || ditems) {
    Matrix<T> ds = probs;
    ds.diagonal().array() -= T(1);
    ds /= static_cast<T>(b);
    if (dusers) *dusers = ds * items;
    if (ditems) *ditems = ds.transpose() * users;
  }
  return loss;
}

namespace {

/// User vectors (mean over history rows of `reprs`) and target vectors.
template <typename T>
void pool_batch(const FinetuneBatch& batch, const Matrix<T>& reprs, Matrix<T>& users, Matrix<T>& targets) {
  const auto b = static_cast<Eigen::Index>(batch.targets.size());
  users = Matrix<T>::Zero(b, reprs.cols());
  targets.resize(b, reprs.cols());
  for (Eigen::Index u = 0; u < b; ++u) {
    const auto& hist = batch.histories[static_cast<std::size_t>(u)];
    for (auto h : hist) users.row(u) += reprs.row(static_cast<Eigen::Index>(h));
    users.row(u) /= static_cast<T>(hist.size());
    targets.row(u) = reprs.row(static_cast<Eigen::Index>(batch.targets[static_cast<std::size_t>(u)]));
  }
}

template <typename T>
Matrix<T> unpool_grad(const FinetuneBatch& batch, Eigen::Index items, const Matrix<T>& dusers, const Matrix<T>& dtargets) {
  Matrix<T> dr = Matrix<T>::Zero(items, dusers.cols());
  for (std::size_t u = 0; u < batch.targets.size(); ++u) {
    const auto& hist = batch.histories[u];
    const T w = T(1) / static_cast<T>(hist.size());
    for (auto h : hist) dr.row(static_cast<Eigen::Index>(h)) += w * dusers.row(static_cast<Eigen::Index>(u));
    dr.row(static_cast<Eigen::Index>(batch.targets[u])) += dtargets.row(static_cast<Eigen::Index>(u));
  }
  return dr;
}

/// Downstream loss from per-slot soft results; fills dind per slot when backward.
template <typename T>
double downstream_through_slots(RetrievalHead<T>& head, const FinetuneBatch& batch, const std::vector<SlotSoft<T>>& slots,
                                bool exact_lookup, bool backward, std::vector<Matrix<T>>* dind) {
  const auto m = static_cast<Eigen::Index>(batch.item_rows.size());
  Matrix<T> reprs;
  if (exact_lookup) {
    reprs = Matrix<T>::Zero(m, static_cast<Eigen::Index>(head.dim()));
    for (std::size_t s = 0; s < slots.size(); ++s)
      for (Eigen::Index i = 0; i < m; ++i) reprs.row(i) += head.tables[s].value.row(slots[s].hard[static_cast<std::size_t>(i)]);
  } else {
    std::vector<Matrix<T>> ind;
    for (const auto& s : slots) ind.push_back(s.ind);
    reprs = head.item_repr(ind);
  }
  Matrix<T> users, targets, du, dt;
  pool_batch(batch, reprs, users, targets);
  const double loss = retrieval_loss(users, targets, backward ? &du : nullptr, backward ? &dt : nullptr, &batch.targets, batch.target_offsets.empty() ? nullptr : &batch.target_offsets);
  if (backward) {
    const Matrix<T> dr = unpool_grad(batch, m, du, dt);
    for (std::size_t s = 0; s < slots.size(); ++s) {
      head.tables[s].grad += slots[s].ind.transpose() * dr;
      if (dind) dind->push_back(dr * head.tables[s].value.transpose());
    }
  }
  return loss;
}

}  // namespace

template <typename T>
JointLoss mmq_joint_loss(TokenizerModel<T>& tok, RetrievalHead<T>& head, const Matrix<T>& text, const Matrix<T>& vision,
                         const FinetuneBatch& batch, const FinetuneConfig& cfg, const MmqJointFrozen<T>* frozen,
                         bool backward, MmqJointFrozen<T>* capture) {
  const auto& c = tok.config;
  if (head.tables.size() != c.id_length()) throw ShapeError("joint loss: head slots != tokenizer id length");
  const T tau = static_cast<T>(cfg.tau);
  auto b = forward(tok, text, vision);
  std::vector<SlotSoft<T>> slots;
  for (std::size_t j = 0; j < c.id_length(); ++j) {
    if (frozen == nullptr)
      for (Eigen::Index i = 0; i < b.latents[j].rows(); ++i)
        if (!(b.latents[j].row(i).squaredNorm() > T(0))) throw NumericError("soft indices: zero latent in slot " + std::to_string(j));
    slots.push_back(soft_slot(b.latents[j], tok.codebook(j).value, tau, c.use_cosine, b.codes[j],
                              frozen ? &frozen->ind_offsets[j] : nullptr));
  }
  if (capture) {
    capture->tokenizer = freeze(b);
    capture->ind_offsets.clear();
    for (const auto& s : slots) {
      Matrix<T> hard = Matrix<T>::Zero(s.soft.rows(), s.soft.cols());
      for (std::size_t i = 0; i < s.hard.size(); ++i) hard(static_cast<Eigen::Index>(i), s.hard[i]) = T(1);
      capture->ind_offsets.push_back(hard - s.soft);
    }
  }

  JointLoss out;
  std::vector<Matrix<T>> dind;
  out.downstream = downstream_through_slots(head, batch, slots, frozen == nullptr, backward, &dind);
  auto g = BundleGrad<T>::zeros(b);
  const TokenizerFrozen<T>* tf = frozen ? &frozen->tokenizer : nullptr;
  out.recon = recon_loss(tok, b, tf, backward ? &g : nullptr, static_cast<T>(cfg.alpha_prime));
  out.aux = aux_loss(tok, b, tf, backward ? &g : nullptr, static_cast<T>(cfg.beta_prime));
  out.total = out.downstream + cfg.alpha_prime * out.recon + cfg.beta_prime * out.aux;
  if (backward) {
    for (std::size_t j = 0; j < c.id_length(); ++j)
      soft_slot_backward(b.latents[j], tok.codebook(j).value, slots[j], tau, c.use_cosine, dind[j], g.dlatents[j],
                         tok.codebook(j).grad);
    tokenizer_backward(tok, b, std::move(g));
  }
  return out;
}

template <typename T>
JointLoss rqvae_joint_loss(std::vector<RqVaeNet<T>*> parts, RetrievalHead<T>& head, const std::vector<Matrix<T>>& inputs,
                           const FinetuneBatch& batch, const FinetuneConfig& cfg, const RqJointFrozen<T>* frozen,
                           bool backward, RqJointFrozen<T>* capture) {
  if (parts.size() != inputs.size()) throw ShapeError("rq joint loss: one input per part required");
  const T tau = static_cast<T>(cfg.tau);
  std::vector<RqVaeForward<T>> fwd;
  std::vector<SlotSoft<T>> slots;
  std::size_t slot = 0;
  for (std::size_t q = 0; q < parts.size(); ++q) {
    fwd.push_back(rqvae_forward(*parts[q], inputs[q], frozen ? &frozen->parts[q] : nullptr));
    for (std::size_t l = 0; l < parts[q]->levels(); ++l, ++slot)
      slots.push_back(soft_slot(fwd[q].residuals[l], parts[q]->codebooks[l].value, tau, true, fwd[q].codes[l],
                                frozen ? &frozen->ind_offsets[slot] : nullptr));
  }
  if (head.tables.size() != slots.size()) throw ShapeError("rq joint loss: head slots != total levels");
  if (capture) {
    capture->parts.clear();
    capture->ind_offsets.clear();
    for (const auto& f : fwd) capture->parts.push_back(f.freeze());
    for (const auto& s : slots) {
      Matrix<T> hard = Matrix<T>::Zero(s.soft.rows(), s.soft.cols());
      for (std::size_t i = 0; i < s.hard.size(); ++i) hard(static_cast<Eigen::Index>(i), s.hard[i]) = T(1);
      capture->ind_offsets.push_back(hard - s.soft);
    }
  }

  JointLoss out;
  std::vector<Matrix<T>> dind;
  out.downstream = downstream_through_slots(head, batch, slots, frozen == nullptr, backward, &dind);
  double total_size = 0.0;
  for (const auto& x : inputs) total_size += static_cast<double>(x.size());
  std::vector<Matrix<T>> drecon(parts.size());
  for (std::size_t q = 0; q < parts.size(); ++q) {
    const double w = static_cast<double>(inputs[q].size()) / total_size;
    out.recon += w * static_cast<double>(mse(fwd[q].recon, inputs[q], backward ? &drecon[q] : nullptr));
    if (backward) drecon[q] *= static_cast<T>(w * cfg.alpha_prime);
  }
  out.total = out.downstream + cfg.alpha_prime * out.recon;
  if (backward) {
    slot = 0;
    for (std::size_t q = 0; q < parts.size(); ++q) {
      auto& net = *parts[q];
      std::vector<Matrix<T>> dres;
      for (std::size_t l = 0; l < net.levels(); ++l, ++slot) {
        dres.push_back(Matrix<T>::Zero(fwd[q].residuals[l].rows(), fwd[q].residuals[l].cols()));
        soft_slot_backward(fwd[q].residuals[l], net.codebooks[l].value, slots[slot], tau, true, dind[slot], dres.back(),
                           net.codebooks[l].grad);
      }
      Matrix<T> dz = net.decoder.backward(fwd[q].dec_cache, drecon[q]);
      rqvae_latent_backward(net, fwd[q], dres, std::move(dz));
    }
  }
  return out;
}

// ---------------------------------------------------------------- evaluation

LeaveOneOut leave_one_out(const InteractionDataset& log, const EmbeddingDataset& catalog) {
  LeaveOneOut split;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> negatives;
  for (const auto& e : log.events) {
    const auto row = catalog.find(e.item_id);
    if (row < 0) throw std::invalid_argument("vocabulary mismatch: item " + std::to_string(e.item_id) + " is not in the catalog");
    if (e.label == 0) negatives[e.user_id].push_back(static_cast<std::size_t>(row));
  }
  for (const auto& [user, items] : log.positive_sequences()) {
    if (items.size() < 3) continue;
    std::vector<std::size_t> rows;
    rows.reserve(items.size());
    for (auto id : items) rows.push_back(static_cast<std::size_t>(catalog.find(id)));
    split.users.push_back(user);
    split.sequences.push_back(std::move(rows));
    auto it = negatives.find(user);
    split.negatives.push_back(it == negatives.end() ? std::vector<std::size_t>{} : it->second);
  }
  if (split.users.empty()) throw std::invalid_argument("leave-one-out: no user has at least 3 positive events");
  return split;
}

EvalResult evaluate_retrieval(const MatrixF& item_reprs, const LeaveOneOut& split, const EmbeddingDataset& catalog,
                              std::size_t history, const std::vector<std::size_t>& cutoffs) {
  EvalResult res;
  const std::size_t n_users = split.users.size();
  res.ranks.resize(n_users);
  res.target_items.resize(n_users);
  std::vector<double> all_scores;
  std::vector<int> all_labels;
  std::vector<UserScores> per_user;
  constexpr std::size_t chunk = 256;
  for (std::size_t start = 0; start < n_users; start += chunk) {
    const std::size_t end = std::min(n_users, start + chunk);
    MatrixF users = MatrixF::Zero(static_cast<Eigen::Index>(end - start), item_reprs.cols());
    for (std::size_t u = start; u < end; ++u) {
      const auto& seq = split.sequences[u];
      const std::size_t stop = seq.size() - 1;
      const std::size_t first = stop > history ? stop - history : 0;
      for (std::size_t h = first; h < stop; ++h) users.row(static_cast<Eigen::Index>(u - start)) += item_reprs.row(static_cast<Eigen::Index>(seq[h]));
      users.row(static_cast<Eigen::Index>(u - start)) /= static_cast<float>(stop - first);
    }
    const MatrixF scores = users * item_reprs.transpose();
    for (std::size_t u = start; u < end; ++u) {
      const auto row = static_cast<Eigen::Index>(u - start);
      const std::size_t target = split.sequences[u].back();
      const float ts = scores(row, static_cast<Eigen::Index>(target));
      std::size_t rank = 1;
      for (Eigen::Index j = 0; j < scores.cols(); ++j) {
        const float s = scores(row, j);
        if (s > ts || (s == ts && static_cast<std::size_t>(j) < target)) ++rank;
      }
      res.ranks[u] = rank;
      res.target_items[u] = catalog.ids()[target];
      if (!split.negatives[u].empty()) {
        UserScores us;
        us.scores.push_back(ts);
        us.labels.push_back(1);
        for (auto neg : split.negatives[u]) {
          us.scores.push_back(scores(row, static_cast<Eigen::Index>(neg)));
          us.labels.push_back(0);
        }
        all_scores.insert(all_scores.end(), us.scores.begin(), us.scores.end());
        all_labels.insert(all_labels.end(), us.labels.begin(), us.labels.end());
        per_user.push_back(std::move(us));
      }
    }
  }
  res.metrics = ranking_metrics(res.ranks, cutoffs);
  if (!per_user.empty()) {
    res.metrics.auc = auc(all_scores, all_labels);
    res.metrics.gauc = gauc(per_user);
  }
  return res;
}

// ---------------------------------------------------------------- training loop

namespace {

std::vector<FinetuneBatch> sample_epoch(const LeaveOneOut& split, std::size_t history, std::size_t batch_size,
                                        std::size_t samples_per_user, const std::vector<double>& neg_log_q,
                                        std::mt19937_64& rng) {
  std::vector<std::size_t> users;
  users.reserve(split.sequences.size() * samples_per_user);
  for (std::size_t r = 0; r < samples_per_user; ++r)
    for (std::size_t u = 0; u < split.sequences.size(); ++u) users.push_back(u);
  std::shuffle(users.begin(), users.end(), rng);
  std::vector<FinetuneBatch> out;
  for (std::size_t start = 0; start < users.size(); start += batch_size) {
    const std::size_t end = std::min(users.size(), start + batch_size);
    if (end - start < 2) break;
    FinetuneBatch b;
    std::unordered_map<std::size_t, std::size_t> local;
    auto index_of = [&](std::size_t row) {
      auto [it, inserted] = local.emplace(row, b.item_rows.size());
      if (inserted) b.item_rows.push_back(row);
      return it->second;
    };
    for (std::size_t k = start; k < end; ++k) {
      const auto& seq = split.sequences[users[k]];
      // Positions 1..n-2: the last item is reserved for evaluation.
      std::uniform_int_distribution<std::size_t> pos(1, seq.size() - 2);
      const std::size_t t = pos(rng);
      const std::size_t first = t > history ? t - history : 0;
      std::vector<std::size_t> hist;
      for (std::size_t h = first; h < t; ++h) hist.push_back(index_of(seq[h]));
      b.histories.push_back(std::move(hist));
      b.targets.push_back(index_of(seq[t]));
      if (!neg_log_q.empty()) b.target_offsets.push_back(neg_log_q[seq[t]]);
    }
    out.push_back(std::move(b));
  }
  return out;
}

/// -log frequency of each catalog row among the trainable target positions.
std::vector<double> target_neg_log_frequency(const LeaveOneOut& split, std::size_t catalog_size) {
  std::vector<double> counts(catalog_size, 0.0);
  double total = 0.0;
  for (const auto& seq : split.sequences)
    for (std::size_t t = 1; t + 1 < seq.size(); ++t) {
      counts[seq[t]] += 1.0;
      total += 1.0;
    }
  std::vector<double> out(catalog_size, 0.0);
  for (std::size_t i = 0; i < catalog_size; ++i)
    if (counts[i] > 0.0) out[i] = -std::log(counts[i] / total);
  return out;
}

void gather_rows(const EmbeddingDataset& ds, const std::vector<std::size_t>& rows, MatrixF& text, MatrixF& vision) {
  text.resize(static_cast<Eigen::Index>(rows.size()), ds.text().cols());
  vision.resize(static_cast<Eigen::Index>(rows.size()), ds.vision().cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    text.row(static_cast<Eigen::Index>(i)) = ds.text().row(static_cast<Eigen::Index>(rows[i]));
    vision.row(static_cast<Eigen::Index>(i)) = ds.vision().row(static_cast<Eigen::Index>(rows[i]));
  }
}

double head_only_step(RetrievalHead<float>& head, const std::vector<SemanticId>& ids, const FinetuneBatch& batch) {
  std::vector<SemanticId> local;
  local.reserve(batch.item_rows.size());
  for (auto r : batch.item_rows) local.push_back(ids[r]);
  const MatrixF reprs = head.item_repr(local);
  MatrixF users, targets, du, dt;
  pool_batch(batch, reprs, users, targets);
  const double loss = retrieval_loss(users, targets, &du, &dt, &batch.targets, batch.target_offsets.empty() ? nullptr : &batch.target_offsets);
  const MatrixF dr = unpool_grad(batch, reprs.rows(), du, dt);
  for (std::size_t i = 0; i < local.size(); ++i)
    for (std::size_t s = 0; s < head.tables.size(); ++s) head.tables[s].grad.row(local[i].codes[s]) += dr.row(static_cast<Eigen::Index>(i));
  return loss;
}

struct MmqAdapter {
  TokenizerModel<float>& tok;

  std::size_t slots() const { return tok.id_length(); }
  std::size_t k() const { return tok.config.codebook_size; }
  std::vector<SemanticId> ids(const EmbeddingDataset& ds) const { return tokenize_all(tok, ds); }
  double recon(const EmbeddingDataset& ds) const { return dataset_recon_loss(tok, ds); }
  JointLoss joint(RetrievalHead<float>& head, const EmbeddingDataset& ds, const FinetuneBatch& batch, const FinetuneConfig& cfg) {
    MatrixF t, v;
    gather_rows(ds, batch.item_rows, t, v);
    tok.zero_grad();
    return mmq_joint_loss<float>(tok, head, t, v, batch, cfg, nullptr, true);
  }
  std::vector<Parameter<float>*> trainable(const FinetuneConfig& cfg) {
    std::vector<Parameter<float>*> out;
    if (!cfg.freeze_encoders) out = tok.network_parameters();
    if (!cfg.freeze_codebooks)
      for (auto* p : tok.codebook_parameters()) out.push_back(p);
    return out;
  }
  void after_step() {
    if (tok.config.use_cosine)
      for (auto* p : tok.codebook_parameters()) normalize_rows(p->value);
    tok.zero_grad();
  }
};

struct RqAdapter {
  std::vector<RqVae*> vaes;
  Paradigm paradigm;

  std::vector<MatrixF> inputs(const MatrixF& text, const MatrixF& vision) const {
    if (paradigm == Paradigm::MS) return {text, vision};
    MatrixF cat(text.rows(), text.cols() + vision.cols());
    cat << text, vision;
    return {cat};
  }
  std::size_t slots() const {
    std::size_t n = 0;
    for (auto* v : vaes) n += v->levels();
    return n;
  }
  std::size_t k() const { return static_cast<std::size_t>(vaes.front()->net.codebooks.front().value.rows()); }
  std::vector<SemanticId> ids(const EmbeddingDataset& ds) const {
    const auto in = inputs(ds.text(), ds.vision());
    std::vector<SemanticId> out(ds.size());
    for (std::size_t q = 0; q < vaes.size(); ++q) {
      const auto part = vaes[q]->encode(in[q]);
      for (std::size_t i = 0; i < out.size(); ++i) out[i].codes.insert(out[i].codes.end(), part[i].codes.begin(), part[i].codes.end());
    }
    return out;
  }
  double recon(const EmbeddingDataset& ds) const {
    const auto in = inputs(ds.text(), ds.vision());
    double sq = 0.0, count = 0.0;
    for (std::size_t q = 0; q < vaes.size(); ++q) {
      sq += (vaes[q]->reconstruct(in[q]) - in[q]).cast<double>().squaredNorm();
      count += static_cast<double>(in[q].size());
    }
    return count > 0 ? sq / count : 0.0;
  }
  JointLoss joint(RetrievalHead<float>& head, const EmbeddingDataset& ds, const FinetuneBatch& batch, const FinetuneConfig& cfg) {
    MatrixF t, v;
    gather_rows(ds, batch.item_rows, t, v);
    std::vector<RqVaeNet<float>*> nets;
    for (auto* vae : vaes) {
      vae->net.zero_grad();
      nets.push_back(&vae->net);
    }
    return rqvae_joint_loss<float>(nets, head, inputs(t, v), batch, cfg, nullptr, true);
  }
  std::vector<Parameter<float>*> trainable(const FinetuneConfig& cfg) {
    std::vector<Parameter<float>*> out;
    for (auto* vae : vaes) {
      if (!cfg.freeze_encoders) {
        for (auto& p : vae->net.encoder.params()) out.push_back(&p);
        for (auto& p : vae->net.decoder.params()) out.push_back(&p);
      }
      if (!cfg.freeze_codebooks)
        for (auto& c : vae->net.codebooks) out.push_back(&c);
    }
    return out;
  }
  void after_step() {
    for (auto* vae : vaes) vae->net.zero_grad();
  }
};

template <typename Adapter>
FinetuneResult run_finetune(Adapter& ad, RetrievalHead<float>& head, const InteractionDataset& log,
                            const EmbeddingDataset& catalog, const FinetuneConfig& cfg, const EmbeddingDataset* recon_set,
                            const FinetuneLogger& logger) {
  cfg.validate();
  if (head.tables.size() != ad.slots()) throw ShapeError("finetune: head has " + std::to_string(head.tables.size()) +
                                                         " tables, tokenizer emits " + std::to_string(ad.slots()) + " codes");
  if (static_cast<std::size_t>(head.tables.front().value.rows()) != ad.k()) throw ShapeError("finetune: head table rows != K");
  const auto split = leave_one_out(log, catalog);
  const EmbeddingDataset& recon_ds = recon_set ? *recon_set : catalog;
  std::mt19937_64 rng(cfg.seed ^ 0xa0761d6478bd642fULL);
  std::vector<double> neg_log_q;
  if (cfg.logq_correction) neg_log_q = target_neg_log_frequency(split, catalog.size());

  FinetuneResult res;
  res.pre_recon = ad.recon(recon_ds);
  std::vector<SemanticId> ids = ad.ids(catalog);
  res.pre = evaluate_retrieval(head.item_repr(ids), split, catalog, cfg.history, cfg.cutoffs).metrics;

  Adam head_opt(AdamConfig{cfg.lr});
  Adam tok_opt(AdamConfig{cfg.tokenizer_lr});
  auto head_params = head.parameters();
  auto tok_params = ad.trainable(cfg);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool joint = epoch >= cfg.warmup_epochs && !tok_params.empty();
    const auto batches = sample_epoch(split, cfg.history, cfg.batch_size, cfg.samples_per_user, neg_log_q, rng);
    JointLoss mean;
    for (const auto& batch : batches) {
      JointLoss l;
      if (joint) {
        l = ad.joint(head, catalog, batch, cfg);
        if (!std::isfinite(l.total)) throw NumericError("stage-2 loss is not finite at epoch " + std::to_string(epoch));
        tok_opt.step(tok_params);
        ad.after_step();
      } else {
        l.downstream = l.total = head_only_step(head, ids, batch);
        if (!std::isfinite(l.total)) throw NumericError("head loss is not finite at epoch " + std::to_string(epoch));
      }
      head_opt.step(head_params);
      mean.downstream += l.downstream;
      mean.recon += l.recon;
      mean.aux += l.aux;
      mean.total += l.total;
    }
    const double nb = static_cast<double>(std::max<std::size_t>(1, batches.size()));
    mean.downstream /= nb;
    mean.recon /= nb;
    mean.aux /= nb;
    mean.total /= nb;
    if (joint) ids = ad.ids(catalog);
    if (logger) logger(epoch, mean);
    res.epoch_losses.push_back(mean);
  }
  res.post_eval = evaluate_retrieval(head.item_repr(ids), split, catalog, cfg.history, cfg.cutoffs);
  res.post = res.post_eval.metrics;
  res.post_recon = ad.recon(recon_ds);
  return res;
}

}  // namespace

FinetuneResult finetune(TokenizerModel<float>& tok, RetrievalHead<float>& head, const InteractionDataset& log,
                        const EmbeddingDataset& catalog, const FinetuneConfig& cfg, const EmbeddingDataset* recon_set,
                        const FinetuneLogger& logger) {
  MmqAdapter ad{tok};
  return run_finetune(ad, head, log, catalog, cfg, recon_set, logger);
}

FinetuneResult finetune_baseline_rqvae(BaselineTokenizer& tok, RetrievalHead<float>& head, const InteractionDataset& log,
                                       const EmbeddingDataset& catalog, const FinetuneConfig& cfg,
                                       const EmbeddingDataset* recon_set, const FinetuneLogger& logger) {
  if (tok.config.method != BaselineMethod::rq_vae)
    throw std::invalid_argument("finetune_baseline_rqvae: unsupported mode '" + to_string(tok.config.method) +
                                "' (needs a vae-mode residual quantizer)");
  std::vector<RqVae> copies;
  copies.reserve(tok.rq.size());
  for (const auto& m : tok.rq) {
    if (m.mode != RqMode::vae || !m.vae) throw std::invalid_argument("finetune_baseline_rqvae: kmeans-mode model is unsupported");
    copies.push_back(*m.vae);
  }
  RqAdapter ad{{}, tok.config.paradigm};
  for (auto& c : copies) ad.vaes.push_back(&c);
  auto res = run_finetune(ad, head, log, catalog, cfg, recon_set, logger);
  for (std::size_t q = 0; q < copies.size(); ++q) {
    for (std::size_t l = 0; l < copies[q].net.codebooks.size(); ++l) tok.rq[q].levels[l] = Codebook(copies[q].net.codebooks[l].value);
    tok.rq[q].vae = std::make_shared<const RqVae>(std::move(copies[q]));
  }
  return res;
}

FinetuneResult train_head_on_ids(const std::vector<SemanticId>& ids, RetrievalHead<float>& head,
                                 const InteractionDataset& log, const EmbeddingDataset& catalog, const FinetuneConfig& cfg,
                                 const FinetuneLogger& logger) {
  struct FixedIds {
    const std::vector<SemanticId>& fixed;
    std::size_t k_;
    std::size_t slots() const { return fixed.front().length(); }
    std::size_t k() const { return k_; }
    std::vector<SemanticId> ids(const EmbeddingDataset&) const { return fixed; }
    double recon(const EmbeddingDataset&) const { return 0.0; }
    JointLoss joint(RetrievalHead<float>&, const EmbeddingDataset&, const FinetuneBatch&, const FinetuneConfig&) { return {}; }
    std::vector<Parameter<float>*> trainable(const FinetuneConfig&) { return {}; }
    void after_step() {}
  };
  if (ids.size() != catalog.size()) throw std::invalid_argument("train_head_on_ids: one semantic id per catalog item required");
  FixedIds ad{ids, static_cast<std::size_t>(head.tables.front().value.rows())};
  return run_finetune(ad, head, log, catalog, cfg, nullptr, logger);
}

#define MMQ_INSTANTIATE_FINETUNE(T)                                                                                   \
  template struct RetrievalHead<T>;                                                                                   \
  template SlotSoft<T> soft_slot<T>(const Matrix<T>&, const Matrix<T>&, T, bool, const std::vector<std::uint32_t>&,   \
                                    const Matrix<T>*);                                                                \
  template void soft_slot_backward<T>(const Matrix<T>&, const Matrix<T>&, const SlotSoft<T>&, T, bool,               \
                                      const Matrix<T>&, Matrix<T>&, Matrix<T>&);                                      \
  template double retrieval_loss<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>*, Matrix<T>*,                        \
                                    const std::vector<std::size_t>*, const std::vector<double>*);                     \
  template JointLoss mmq_joint_loss<T>(TokenizerModel<T>&, RetrievalHead<T>&, const Matrix<T>&, const Matrix<T>&,     \
                                       const FinetuneBatch&, const FinetuneConfig&, const MmqJointFrozen<T>*, bool,   \
                                       MmqJointFrozen<T>*);                                                           \
  template JointLoss rqvae_joint_loss<T>(std::vector<RqVaeNet<T>*>, RetrievalHead<T>&, const std::vector<Matrix<T>>&, \
                                         const FinetuneBatch&, const FinetuneConfig&, const RqJointFrozen<T>*, bool,  \
                                         RqJointFrozen<T>*);

MMQ_INSTANTIATE_FINETUNE(float)
MMQ_INSTANTIATE_FINETUNE(double)

}  // namespace mmq
