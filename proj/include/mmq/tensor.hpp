#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmq {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A named trainable tensor with a gradient buffer of identical shape.
/// Vectors are stored as 1 x n matrices.
template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;

  Parameter() = default;
  Parameter(std::string n, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), value(Matrix<T>::Zero(rows, cols)), grad(Matrix<T>::Zero(rows, cols)) {}
  Parameter(std::string n, Matrix<T> v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix<T>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(); }
  Eigen::Index size() const { return value.size(); }

  template <typename U>
  Parameter<U> cast() const {
    Parameter<U> out;
    out.name = name;
    out.value = value.template cast<U>();
    out.grad = grad.template cast<U>();
    return out;
  }
};

enum class Activation { relu, tanh, identity };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);

/// Layer widths from input to output. The activation applies to every
/// non-final layer; the final layer is always linear.
struct MlpSpec {
  std::vector<std::size_t> layer_dims;
  Activation activation = Activation::relu;

  void validate() const;
  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t output_dim() const { return layer_dims.back(); }
  std::size_t num_layers() const { return layer_dims.size() - 1; }
  std::size_t parameter_count() const;

  bool operator==(const MlpSpec&) const = default;
};

template <typename T>
class Mlp {
 public:
  /// Per-layer inputs and pre-activations recorded by forward() for backward().
  struct Cache {
    std::vector<Matrix<T>> inputs;
    std::vector<Matrix<T>> pre;
  };

  Mlp() = default;
  /// Glorot-uniform weights, zero biases.
  Mlp(MlpSpec spec, std::string name, std::mt19937_64& rng);
  /// All-zero weights and biases.
  static Mlp zeros(MlpSpec spec, std::string name);

  const MlpSpec& spec() const { return spec_; }
  const std::string& name() const { return name_; }

  /// Batched forward over rows of `x` (batch x input_dim).
  Matrix<T> forward(const Matrix<T>& x, Cache* cache = nullptr) const;
  /// Single-vector forward (mlp_apply).
  Vector<T> apply(const Vector<T>& x) const;
  /// Accumulates parameter gradients for upstream `dy`; returns d(loss)/d(input).
  Matrix<T> backward(const Cache& cache, const Matrix<T>& dy);
  /// Like backward(), but skips computing the input gradient.
  void backward_params_only(const Cache& cache, const Matrix<T>& dy);

  Parameter<T>& weight(std::size_t layer) { return params_[2 * layer]; }
  Parameter<T>& bias(std::size_t layer) { return params_[2 * layer + 1]; }
  const Parameter<T>& weight(std::size_t layer) const { return params_[2 * layer]; }
  const Parameter<T>& bias(std::size_t layer) const { return params_[2 * layer + 1]; }

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }
  std::size_t parameter_count() const { return spec_.parameter_count(); }

  /// Concatenation of every weight and bias, layer by layer, row-major.
  Vector<T> flatten() const;
  /// Adds `g` (laid out as flatten()) into the parameter gradients.
  void accumulate_flat_grad(const Vector<T>& g);
  void zero_grad();

  template <typename U>
  Mlp<U> cast() const {
    Mlp<U> out;
    out.spec_ = spec_;
    out.name_ = name_;
    for (const auto& p : params_) out.params_.push_back(p.template cast<U>());
    return out;
  }

 private:
  template <typename U>
  friend class Mlp;

  Matrix<T> backward_impl(const Cache& cache, const Matrix<T>& dy, bool need_input_grad);

  MlpSpec spec_;
  std::string name_;
  std::vector<Parameter<T>> params_;
};

extern template class Mlp<float>;
extern template class Mlp<double>;

template <typename T>
Vector<T> mlp_apply(const Mlp<T>& mlp, const Vector<T>& x) {
  return mlp.apply(x);
}

// Differentiable building blocks shared by the loss functions.

/// Row-wise softmax.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits);
/// Backward of row-wise softmax given its output `probs` and upstream `dprobs`.
template <typename T>
Matrix<T> softmax_rows_backward(const Matrix<T>& probs, const Matrix<T>& dprobs);

/// Mean over all entries of (pred - target)^2; writes d/d(pred) if `dpred` is set.
template <typename T>
T mse(const Matrix<T>& pred, const Matrix<T>& target, Matrix<T>* dpred = nullptr);

/// Cosine similarity of each row of `rows` against every row of `others`
/// (out: rows.rows() x others.rows()). Zero-norm rows yield zero similarity.
template <typename T>
Matrix<T> cosine_matrix(const Matrix<T>& rows, const Matrix<T>& others);

/// Backward of cosine_matrix: accumulates into `drows` and/or `dothers`.
template <typename T>
void cosine_matrix_backward(const Matrix<T>& rows, const Matrix<T>& others, const Matrix<T>& dcos,
                            Matrix<T>* drows, Matrix<T>* dothers);

/// ||normalize_rows(V) normalize_rows(V)^T - I||_F^2 over the rows of V.
/// Writes d/dV into `dv` if set. Throws NumericError on a zero-norm row.
template <typename T>
T gram_penalty(const Matrix<T>& v, Matrix<T>* dv = nullptr);

/// Normalizes rows to unit L2 norm in place; zero rows are left untouched.
template <typename T>
void normalize_rows(Matrix<T>& m);

bool all_finite(const MatrixF& m);

}  // namespace mmq
