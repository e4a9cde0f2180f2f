#include "mmq/rqvae.hpp"

#include "mmq/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

namespace mmq {

template <typename T>
std::vector<Parameter<T>*> RqVaeNet<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& p : encoder.params()) out.push_back(&p);
  for (auto& p : decoder.params()) out.push_back(&p);
  for (auto& c : codebooks) out.push_back(&c);
  return out;
}

template <typename T>
void RqVaeNet<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
std::vector<std::uint32_t> nearest_l2(const Matrix<T>& points, const Matrix<T>& codewords) {
  if (points.cols() != codewords.cols()) throw ShapeError("nearest_l2: dim mismatch");
  std::vector<std::uint32_t> out(static_cast<std::size_t>(points.rows()), 0);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    T best = std::numeric_limits<T>::infinity();
    for (Eigen::Index k = 0; k < codewords.rows(); ++k) {
      const T d = (points.row(i) - codewords.row(k)).squaredNorm();
      if (d < best) {
        best = d;
        out[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(k);
      }
    }
  }
  return out;
}

namespace {

template <typename T>
Matrix<T> gather_rows(const Matrix<T>& table, const std::vector<std::uint32_t>& idx) {
  Matrix<T> out(static_cast<Eigen::Index>(idx.size()), table.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = table.row(idx[i]);
  return out;
}

template <typename T>
void scatter_add_rows(Matrix<T>& table, const std::vector<std::uint32_t>& idx, const Matrix<T>& rows, T scale) {
  for (std::size_t i = 0; i < idx.size(); ++i) table.row(idx[i]) += scale * rows.row(static_cast<Eigen::Index>(i));
}

}  // namespace

template <typename T>
RqVaeFrozen<T> RqVaeForward<T>::freeze() const {
  return RqVaeFrozen<T>{codes, zq - z, residuals, quantized};
}

template <typename T>
RqVaeForward<T> rqvae_forward(const RqVaeNet<T>& net, const Matrix<T>& x, const RqVaeFrozen<T>* frozen) {
  RqVaeForward<T> f;
  f.z = net.encoder.forward(x, &f.enc_cache);
  Matrix<T> r = f.z;
  f.zq = Matrix<T>::Zero(f.z.rows(), f.z.cols());
  for (std::size_t l = 0; l < net.levels(); ++l) {
    const Matrix<T>& book = net.codebooks[l].value;
    f.residuals.push_back(r);
    f.codes.push_back(frozen ? frozen->codes.at(l) : nearest_l2(r, book));
    f.quantized.push_back(gather_rows(book, f.codes.back()));
    r -= f.quantized.back();
    f.zq += f.quantized.back();
  }
  f.decoder_input = f.z + (frozen ? frozen->decoder_offset : Matrix<T>(f.zq - f.z));
  f.recon = net.decoder.forward(f.decoder_input, &f.dec_cache);
  return f;
}

template <typename T>
void rqvae_latent_backward(RqVaeNet<T>& net, const RqVaeForward<T>& fwd, const std::vector<Matrix<T>>& dresiduals,
                           Matrix<T> dz) {
  const std::size_t levels = net.levels();
  if (dresiduals.size() != levels) throw ShapeError("rqvae backward: one residual gradient per level required");
  Matrix<T> g = Matrix<T>::Zero(fwd.z.rows(), fwd.z.cols());
  for (std::size_t l = levels; l-- > 0;) {
    g += dresiduals[l];
    if (l > 0) scatter_add_rows(net.codebooks[l - 1].grad, fwd.codes[l - 1], g, T(-1));
  }
  dz += g;
  net.encoder.backward_params_only(fwd.enc_cache, dz);
}

template <typename T>
RqVaeLoss rqvae_loss(RqVaeNet<T>& net, const Matrix<T>& x, const RqVaeForward<T>& fwd, double commitment,
                     const RqVaeFrozen<T>* frozen, bool backward) {
  RqVaeLoss out;
  Matrix<T> drecon;
  out.recon = static_cast<double>(mse(fwd.recon, x, backward ? &drecon : nullptr));
  std::vector<Matrix<T>> dres;
  const T n = static_cast<T>(fwd.z.size());
  for (std::size_t l = 0; l < net.levels(); ++l) {
    const Matrix<T>& r_sg = frozen ? frozen->residuals.at(l) : fwd.residuals[l];
    const Matrix<T>& q_sg = frozen ? frozen->quantized.at(l) : fwd.quantized[l];
    const Matrix<T> book_diff = fwd.quantized[l] - r_sg;
    const Matrix<T> commit_diff = fwd.residuals[l] - q_sg;
    out.codebook += static_cast<double>(book_diff.squaredNorm() / n);
    out.commitment += commitment * static_cast<double>(commit_diff.squaredNorm() / n);
    if (backward) {
      scatter_add_rows(net.codebooks[l].grad, fwd.codes[l], book_diff, T(2) / n);
      dres.push_back(static_cast<T>(2.0 * commitment) / n * commit_diff);
    }
  }
  out.total = out.recon + out.codebook + out.commitment;
  if (backward) {
    Matrix<T> dz = net.decoder.backward(fwd.dec_cache, drecon);
    rqvae_latent_backward(net, fwd, dres, std::move(dz));
  }
  return out;
}

RqVae RqVae::train(const MatrixF& x, std::size_t levels, std::size_t k, const RqVaeOptions& opts, std::uint64_t seed,
                   std::vector<double>* loss_history) {
  if (levels == 0) throw std::invalid_argument("rq-vae: levels must be >= 1");
  if (opts.batch_size == 0 || opts.latent_dim == 0 || opts.hidden == 0)
    throw std::invalid_argument("rq-vae: batch_size, latent_dim and hidden must be >= 1");
  const auto n = static_cast<std::size_t>(x.rows());
  const auto d = static_cast<std::size_t>(x.cols());
  std::mt19937_64 rng(seed);

  RqVae model;
  model.opts = opts;
  model.net.encoder = Mlp<float>({{d, opts.hidden, opts.latent_dim}, opts.activation}, "rqvae.encoder", rng);
  model.net.decoder = Mlp<float>({{opts.latent_dim, opts.hidden, d}, opts.activation}, "rqvae.decoder", rng);

  // Residual k-means on the initial latents seeds every level's codebook.
  MatrixF r = model.net.encoder.forward(x);
  for (std::size_t l = 0; l < levels; ++l) {
    auto km = kmeans(r, k, std::max<std::size_t>(1, opts.kmeans_iters), seed + 101 * (l + 1));
    model.net.codebooks.emplace_back("rqvae.codebook" + std::to_string(l), km.codebook.codewords);
    for (Eigen::Index i = 0; i < r.rows(); ++i) r.row(i) -= km.codebook.codewords.row(km.assignments[static_cast<std::size_t>(i)]);
  }

  Adam adam(AdamConfig{opts.lr});
  auto params = model.net.parameters();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += opts.batch_size) {
      const std::size_t end = std::min(n, start + opts.batch_size);
      MatrixF xb(static_cast<Eigen::Index>(end - start), x.cols());
      for (std::size_t i = start; i < end; ++i) xb.row(static_cast<Eigen::Index>(i - start)) = x.row(static_cast<Eigen::Index>(order[i]));
      const auto fwd = rqvae_forward(model.net, xb);
      const auto loss = rqvae_loss<float>(model.net, xb, fwd, opts.commitment, nullptr, true);
      if (!std::isfinite(loss.total))
        throw NumericError("rq-vae: non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches));
      adam.step(params);
      total += loss.total;
      ++batches;
    }
    if (loss_history) loss_history->push_back(batches ? total / static_cast<double>(batches) : 0.0);
  }
  return model;
}

std::vector<SemanticId> RqVae::encode(const MatrixF& x) const {
  const auto fwd = rqvae_forward(net, x);
  std::vector<SemanticId> out(static_cast<std::size_t>(x.rows()));
  for (auto& id : out) id.codes.reserve(levels());
  for (std::size_t l = 0; l < levels(); ++l)
    for (std::size_t i = 0; i < out.size(); ++i) out[i].codes.push_back(fwd.codes[l][i]);
  return out;
}

MatrixF RqVae::reconstruct(const MatrixF& x) const { return rqvae_forward(net, x).recon; }

#define MMQ_INSTANTIATE_RQVAE(T)                                                                                     \
  template struct RqVaeNet<T>;                                                                                       \
  template struct RqVaeForward<T>;                                                                                   \
  template std::vector<std::uint32_t> nearest_l2<T>(const Matrix<T>&, const Matrix<T>&);                             \
  template RqVaeForward<T> rqvae_forward<T>(const RqVaeNet<T>&, const Matrix<T>&, const RqVaeFrozen<T>*);            \
  template void rqvae_latent_backward<T>(RqVaeNet<T>&, const RqVaeForward<T>&, const std::vector<Matrix<T>>&,        \
                                         Matrix<T>);                                                                 \
  template RqVaeLoss rqvae_loss<T>(RqVaeNet<T>&, const Matrix<T>&, const RqVaeForward<T>&, double,                   \
                                   const RqVaeFrozen<T>*, bool);

MMQ_INSTANTIATE_RQVAE(float)
MMQ_INSTANTIATE_RQVAE(double)

}  // namespace mmq
