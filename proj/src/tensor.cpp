#include "mmq/tensor.hpp"

#include <cmath>
#include <sstream>

namespace mmq {

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "identity") return Activation::identity;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "identity";
}

void MlpSpec::validate() const {
  if (layer_dims.size() < 2) throw ShapeError("MlpSpec needs at least 2 layer dims");
  for (std::size_t d : layer_dims) {
    if (d == 0) throw ShapeError("MlpSpec layer dims must be >= 1");
  }
}

std::size_t MlpSpec::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) n += layer_dims[l] * layer_dims[l + 1] + layer_dims[l + 1];
  return n;
}

template <typename T>
Mlp<T>::Mlp(MlpSpec spec, std::string name, std::mt19937_64& rng) : spec_(std::move(spec)), name_(std::move(name)) {
  spec_.validate();
  for (std::size_t l = 0; l < spec_.num_layers(); ++l) {
    const auto fan_in = spec_.layer_dims[l];
    const auto fan_out = spec_.layer_dims[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Parameter<T> w(name_ + ".w" + std::to_string(l), fan_in, fan_out);
    for (Eigen::Index i = 0; i < w.value.size(); ++i) w.value.data()[i] = static_cast<T>(dist(rng));
    params_.push_back(std::move(w));
    params_.emplace_back(name_ + ".b" + std::to_string(l), 1, fan_out);
  }
}

template <typename T>
Mlp<T> Mlp<T>::zeros(MlpSpec spec, std::string name) {
  spec.validate();
  Mlp out;
  out.spec_ = std::move(spec);
  out.name_ = std::move(name);
  for (std::size_t l = 0; l < out.spec_.num_layers(); ++l) {
    out.params_.emplace_back(out.name_ + ".w" + std::to_string(l), out.spec_.layer_dims[l], out.spec_.layer_dims[l + 1]);
    out.params_.emplace_back(out.name_ + ".b" + std::to_string(l), 1, out.spec_.layer_dims[l + 1]);
  }
  return out;
}

namespace {

template <typename T>
void activate(Matrix<T>& m, Activation a) {
  switch (a) {
    case Activation::relu: m = m.cwiseMax(T(0)); break;
    case Activation::tanh: m = m.array().tanh().matrix(); break;
    case Activation::identity: break;
  }
}

template <typename T>
void activation_backward(Matrix<T>& grad, const Matrix<T>& pre, Activation a) {
  switch (a) {
    case Activation::relu: grad.array() *= (pre.array() > T(0)).template cast<T>(); break;
    case Activation::tanh: grad.array() *= (T(1) - pre.array().tanh().square()); break;
    case Activation::identity: break;
  }
}

}  // namespace

template <typename T>
Matrix<T> Mlp<T>::forward(const Matrix<T>& x, Cache* cache) const {
  if (static_cast<std::size_t>(x.cols()) != spec_.input_dim()) {
    std::ostringstream msg;
    msg << "mlp '" << name_ << "' layer 0: expected input dim " << spec_.input_dim() << ", got " << x.cols();
    throw ShapeError(msg.str());
  }
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Matrix<T> h = x;
  const std::size_t layers = spec_.num_layers();
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& w = weight(l).value;
    if (w.rows() != h.cols()) {
      std::ostringstream msg;
      msg << "mlp '" << name_ << "' layer " << l << ": weight has " << w.rows() << " rows, input has " << h.cols();
      throw ShapeError(msg.str());
    }
    Matrix<T> pre = h * w;
    pre.rowwise() += bias(l).value.row(0);
    if (cache) {
      cache->inputs.push_back(std::move(h));
      cache->pre.push_back(pre);
    }
    h = std::move(pre);
    if (l + 1 < layers) activate(h, spec_.activation);
  }
  return h;
}

template <typename T>
Vector<T> Mlp<T>::apply(const Vector<T>& x) const {
  Matrix<T> row = x.transpose();
  Matrix<T> out = forward(row);
  return out.row(0).transpose();
}

template <typename T>
Matrix<T> Mlp<T>::backward_impl(const Cache& cache, const Matrix<T>& dy, bool need_input_grad) {
  const std::size_t layers = spec_.num_layers();
  if (cache.inputs.size() != layers) throw ShapeError("mlp '" + name_ + "': backward without a matching forward cache");
  Matrix<T> g = dy;
  for (std::size_t l = layers; l-- > 0;) {
    if (l + 1 < layers) activation_backward(g, cache.pre[l], spec_.activation);
    weight(l).grad.noalias() += cache.inputs[l].transpose() * g;
    bias(l).grad.row(0) += g.colwise().sum();
    if (l > 0 || need_input_grad) {
      Matrix<T> next = g * weight(l).value.transpose();
      g = std::move(next);
    }
  }
  return need_input_grad ? g : Matrix<T>();
}

template <typename T>
Matrix<T> Mlp<T>::backward(const Cache& cache, const Matrix<T>& dy) {
  return backward_impl(cache, dy, true);
}

template <typename T>
void Mlp<T>::backward_params_only(const Cache& cache, const Matrix<T>& dy) {
  backward_impl(cache, dy, false);
}

template <typename T>
Vector<T> Mlp<T>::flatten() const {
  Vector<T> out(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index off = 0;
  for (const auto& p : params_) {
    out.segment(off, p.size()) = Eigen::Map<const Vector<T>>(p.value.data(), p.size());
    off += p.size();
  }
  return out;
}

template <typename T>
void Mlp<T>::accumulate_flat_grad(const Vector<T>& g) {
  Eigen::Index off = 0;
  for (auto& p : params_) {
    Eigen::Map<Vector<T>>(p.grad.data(), p.size()) += g.segment(off, p.size());
    off += p.size();
  }
}

template <typename T>
void Mlp<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template class Mlp<float>;
template class Mlp<double>;

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
  Matrix<T> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const T mx = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename T>
Matrix<T> softmax_rows_backward(const Matrix<T>& probs, const Matrix<T>& dprobs) {
  Matrix<T> out(probs.rows(), probs.cols());
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    const T dot = probs.row(r).dot(dprobs.row(r));
    out.row(r) = probs.row(r).array() * (dprobs.row(r).array() - dot);
  }
  return out;
}

template <typename T>
T mse(const Matrix<T>& pred, const Matrix<T>& target, Matrix<T>* dpred) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw ShapeError("mse: shape mismatch");
  const auto n = static_cast<T>(pred.size());
  if (pred.size() == 0) {
    if (dpred) dpred->resize(pred.rows(), pred.cols());
    return T(0);
  }
  Matrix<T> diff = pred - target;
  if (dpred) *dpred = diff * (T(2) / n);
  return diff.squaredNorm() / n;
}

namespace {

template <typename T>
Vector<T> safe_inverse_norms(const Matrix<T>& m) {
  Vector<T> inv(m.rows());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const T n = m.row(r).norm();
    inv(r) = n > T(0) ? T(1) / n : T(0);
  }
  return inv;
}

}  // namespace

template <typename T>
Matrix<T> cosine_matrix(const Matrix<T>& rows, const Matrix<T>& others) {
  if (rows.cols() != others.cols()) throw ShapeError("cosine_matrix: dim mismatch");
  const Vector<T> ia = safe_inverse_norms(rows);
  const Vector<T> ib = safe_inverse_norms(others);
  Matrix<T> dots = rows * others.transpose();
  return ia.asDiagonal() * dots * ib.asDiagonal();
}

template <typename T>
void cosine_matrix_backward(const Matrix<T>& rows, const Matrix<T>& others, const Matrix<T>& dcos, Matrix<T>* drows,
                            Matrix<T>* dothers) {
  const Vector<T> ia = safe_inverse_norms(rows);
  const Vector<T> ib = safe_inverse_norms(others);
  const Matrix<T> a_hat = ia.asDiagonal() * rows;
  const Matrix<T> b_hat = ib.asDiagonal() * others;
  const Matrix<T> cos = a_hat * b_hat.transpose();
  const Matrix<T> weighted = dcos.cwiseProduct(cos);
  if (drows) {
    const Vector<T> s = weighted.rowwise().sum();
    Matrix<T> g = dcos * b_hat;
    g -= s.asDiagonal() * a_hat;
    *drows += ia.asDiagonal() * g;
  }
  if (dothers) {
    const Vector<T> s = weighted.colwise().sum().transpose();
    Matrix<T> g = dcos.transpose() * a_hat;
    g -= s.asDiagonal() * b_hat;
    *dothers += ib.asDiagonal() * g;
  }
}

template <typename T>
T gram_penalty(const Matrix<T>& v, Matrix<T>* dv) {
  const Eigen::Index n = v.rows();
  Vector<T> norms(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    norms(i) = v.row(i).norm();
    if (!(norms(i) > T(0))) throw NumericError("gram_penalty: zero-norm row " + std::to_string(i));
  }
  const Matrix<T> u = norms.cwiseInverse().asDiagonal() * v;
  Matrix<T> resid = u * u.transpose();
  resid -= Matrix<T>::Identity(n, n);
  const T loss = resid.squaredNorm();
  if (dv) {
    const Matrix<T> du = T(4) * resid * u;
    Matrix<T> g(n, v.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const T radial = du.row(i).dot(u.row(i));
      g.row(i) = (du.row(i) - radial * u.row(i)) / norms(i);
    }
    *dv = std::move(g);
  }
  return loss;
}

template <typename T>
void normalize_rows(Matrix<T>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const T n = m.row(r).norm();
    if (n > T(0)) m.row(r) /= n;
  }
}

bool all_finite(const MatrixF& m) { return m.allFinite(); }

#define MMQ_INSTANTIATE(T)                                                                                  \
  template Matrix<T> softmax_rows<T>(const Matrix<T>&);                                                     \
  template Matrix<T> softmax_rows_backward<T>(const Matrix<T>&, const Matrix<T>&);                          \
  template T mse<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>*);                                        \
  template Matrix<T> cosine_matrix<T>(const Matrix<T>&, const Matrix<T>&);                                  \
  template void cosine_matrix_backward<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, Matrix<T>*, \
                                          Matrix<T>*);                                                      \
  template T gram_penalty<T>(const Matrix<T>&, Matrix<T>*);                                                 \
  template void normalize_rows<T>(Matrix<T>&);

MMQ_INSTANTIATE(float)
MMQ_INSTANTIATE(double)
#undef MMQ_INSTANTIATE

}  // namespace mmq
