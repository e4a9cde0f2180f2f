#pragma once

#include "mmq/quantize.hpp"
#include "mmq/tensor.hpp"

#include <cstdint>
#include <vector>

namespace mmq {

struct RqVaeOptions {
  std::size_t latent_dim = 32;
  std::size_t hidden = 128;
  Activation activation = Activation::relu;
  std::size_t epochs = 20;
  std::size_t batch_size = 256;
  float lr = 1e-3f;
  /// Weight of ||z - sg(e_q)||^2; the codebook term ||sg(z) - e_q||^2 has weight 1.
  double commitment = 0.25;
  std::size_t kmeans_iters = 10;
};

template <typename T>
struct RqVaeNet {
  Mlp<T> encoder;
  Mlp<T> decoder;
  /// One K x latent_dim codebook per residual level.
  std::vector<Parameter<T>> codebooks;

  std::size_t levels() const { return codebooks.size(); }
  std::vector<Parameter<T>*> parameters();
  void zero_grad();

  template <typename U>
  RqVaeNet<U> cast() const {
    RqVaeNet<U> out{encoder.template cast<U>(), decoder.template cast<U>(), {}};
    for (const auto& c : codebooks) out.codebooks.push_back(c.template cast<U>());
    return out;
  }
};

/// Stop-gradient constants captured at a base point. Passing them back into
/// rqvae_forward() turns the loss into a smooth surrogate whose exact
/// gradient equals the straight-through gradient (used by gradient checks).
template <typename T>
struct RqVaeFrozen {
  std::vector<std::vector<std::uint32_t>> codes;
  Matrix<T> decoder_offset;             // zq - z
  std::vector<Matrix<T>> residuals;     // sg(r_l)
  std::vector<Matrix<T>> quantized;     // sg(e_q,l)
};

template <typename T>
struct RqVaeForward {
  typename Mlp<T>::Cache enc_cache;
  typename Mlp<T>::Cache dec_cache;
  Matrix<T> z;
  /// Input residual of each level (r_1 = z).
  std::vector<Matrix<T>> residuals;
  std::vector<std::vector<std::uint32_t>> codes;
  /// Selected codeword per level.
  std::vector<Matrix<T>> quantized;
  Matrix<T> zq;
  Matrix<T> decoder_input;
  Matrix<T> recon;

  RqVaeFrozen<T> freeze() const;
};

/// Encoder, residual nearest-codeword chain (L2), decoder on z + sg(zq - z).
template <typename T>
RqVaeForward<T> rqvae_forward(const RqVaeNet<T>& net, const Matrix<T>& x, const RqVaeFrozen<T>* frozen = nullptr);

struct RqVaeLoss {
  double recon = 0.0;
  double codebook = 0.0;
  double commitment = 0.0;
  double total = 0.0;
};

/// recon MSE + sum_l mean||sg(r_l) - e_l||^2 + commitment * mean||r_l - sg(e_l)||^2.
/// With `backward` set, accumulates gradients into `net`.
template <typename T>
RqVaeLoss rqvae_loss(RqVaeNet<T>& net, const Matrix<T>& x, const RqVaeForward<T>& fwd, double commitment,
                     const RqVaeFrozen<T>* frozen, bool backward);

/// Backpropagates gradients w.r.t. each level's input residual, plus a direct
/// gradient `dz` w.r.t. the latent, into the codebooks of earlier levels
/// (r_{l+1} = r_l - C_l[c_l]) and the encoder.
template <typename T>
void rqvae_latent_backward(RqVaeNet<T>& net, const RqVaeForward<T>& fwd, const std::vector<Matrix<T>>& dresiduals,
                           Matrix<T> dz);

/// Nearest codeword per row by squared L2 distance, lowest index on ties.
template <typename T>
std::vector<std::uint32_t> nearest_l2(const Matrix<T>& points, const Matrix<T>& codewords);

class RqVae {
 public:
  RqVaeNet<float> net;
  RqVaeOptions opts;

  static RqVae train(const MatrixF& x, std::size_t levels, std::size_t k, const RqVaeOptions& opts, std::uint64_t seed,
                     std::vector<double>* loss_history = nullptr);

  std::size_t input_dim() const { return net.encoder.spec().input_dim(); }
  std::size_t levels() const { return net.levels(); }
  std::vector<SemanticId> encode(const MatrixF& x) const;
  MatrixF reconstruct(const MatrixF& x) const;
};

}  // namespace mmq
