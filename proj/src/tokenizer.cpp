#include "mmq/tokenizer.hpp"

#include "mmq/metrics.hpp"
#include "mmq/optim.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mmq {

using nlohmann::json;

// ---------------------------------------------------------------- config

void TokenizerConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("tokenizer." + m); };
  if (text_dim == 0 || vision_dim == 0) fail("text_dim/vision_dim: must be >= 1");
  if (id_length() == 0) fail("n_shared + n_text + n_vision: must be >= 1");
  if (latent_dim == 0) fail("latent_dim: must be >= 1");
  if (codebook_size < 2) fail("codebook_size: must be >= 2");
  for (auto h : expert_hidden)
    if (h == 0) fail("expert_hidden: widths must be >= 1");
  for (auto h : specific_hidden)
    if (h == 0) fail("specific_hidden: widths must be >= 1");
  for (auto h : decoder_hidden)
    if (h == 0) fail("decoder_hidden: widths must be >= 1");
  if (alpha < 0 || beta < 0 || gamma < 0) fail("alpha/beta/gamma: must be >= 0");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) fail("ema_decay: must lie in [0, 1)");
  if (dead_code_steps == 0) fail("dead_code_steps: must be >= 1");
}

ExpertGroup TokenizerConfig::group_of(std::size_t slot) const {
  if (slot < n_shared) return ExpertGroup::shared;
  if (slot < n_shared + n_text) return ExpertGroup::text;
  return ExpertGroup::vision;
}

namespace {

std::size_t modality_dim(const TokenizerConfig& c, ExpertGroup g) {
  switch (g) {
    case ExpertGroup::shared: return c.input_dim();
    case ExpertGroup::text: return c.text_dim;
    case ExpertGroup::vision: return c.vision_dim;
  }
  return 0;
}

MlpSpec make_spec(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out, Activation a) {
  MlpSpec s;
  s.layer_dims.push_back(in);
  s.layer_dims.insert(s.layer_dims.end(), hidden.begin(), hidden.end());
  s.layer_dims.push_back(out);
  s.activation = a;
  return s;
}

const char* group_name(ExpertGroup g) {
  switch (g) {
    case ExpertGroup::shared: return "shared";
    case ExpertGroup::text: return "text";
    case ExpertGroup::vision: return "vision";
  }
  return "?";
}

}  // namespace

MlpSpec TokenizerConfig::expert_spec(ExpertGroup g) const {
  const auto& hidden = g != ExpertGroup::shared && !specific_hidden.empty() ? specific_hidden : expert_hidden;
  return make_spec(modality_dim(*this, g), hidden, latent_dim, activation);
}

MlpSpec TokenizerConfig::gate_spec(ExpertGroup g) const {
  const std::size_t n = g == ExpertGroup::text ? n_text : n_vision;
  std::vector<std::size_t> hidden;
  if (gate_hidden > 0) hidden.push_back(gate_hidden);
  return make_spec(modality_dim(*this, g), hidden, n, activation);
}

MlpSpec TokenizerConfig::decoder_spec() const { return make_spec(latent_dim, decoder_hidden, input_dim(), activation); }

MlpSpec TokenizerConfig::aux_decoder_spec(ExpertGroup g) const {
  return make_spec(latent_dim, decoder_hidden, modality_dim(*this, g), activation);
}

std::string TokenizerConfig::to_json() const {
  json j = {{"text_dim", text_dim},
            {"vision_dim", vision_dim},
            {"n_shared", n_shared},
            {"n_text", n_text},
            {"n_vision", n_vision},
            {"latent_dim", latent_dim},
            {"codebook_size", codebook_size},
            {"expert_hidden", expert_hidden},
            {"specific_hidden", specific_hidden},
            {"gate_hidden", gate_hidden},
            {"decoder_hidden", decoder_hidden},
            {"activation", to_string(activation)},
            {"alpha", alpha},
            {"beta", beta},
            {"gamma", gamma},
            {"ema_decay", ema_decay},
            {"dead_code_steps", dead_code_steps},
            {"use_cosine", use_cosine},
            {"shared_codebook", shared_codebook},
            {"seed", seed}};
  return j.dump();
}

TokenizerConfig TokenizerConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("tokenizer: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("tokenizer: expected an object");
  TokenizerConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "text_dim") c.text_dim = v.get<std::size_t>();
      else if (key == "vision_dim") c.vision_dim = v.get<std::size_t>();
      else if (key == "n_shared") c.n_shared = v.get<std::size_t>();
      else if (key == "n_text") c.n_text = v.get<std::size_t>();
      else if (key == "n_vision") c.n_vision = v.get<std::size_t>();
      else if (key == "latent_dim") c.latent_dim = v.get<std::size_t>();
      else if (key == "codebook_size") c.codebook_size = v.get<std::size_t>();
      else if (key == "expert_hidden") c.expert_hidden = v.get<std::vector<std::size_t>>();
      else if (key == "specific_hidden") c.specific_hidden = v.get<std::vector<std::size_t>>();
      else if (key == "gate_hidden") c.gate_hidden = v.get<std::size_t>();
      else if (key == "decoder_hidden") c.decoder_hidden = v.get<std::vector<std::size_t>>();
      else if (key == "activation") c.activation = parse_activation(v.get<std::string>());
      else if (key == "alpha") c.alpha = v.get<double>();
      else if (key == "beta") c.beta = v.get<double>();
      else if (key == "gamma") c.gamma = v.get<double>();
      else if (key == "ema_decay") c.ema_decay = v.get<double>();
      else if (key == "dead_code_steps") c.dead_code_steps = v.get<std::size_t>();
      else if (key == "use_cosine") c.use_cosine = v.get<bool>();
      else if (key == "shared_codebook") c.shared_codebook = v.get<bool>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw ConfigError("tokenizer: unknown key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("tokenizer." + key + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError("tokenizer." + key + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- model

template <typename T>
TokenizerModel<T> TokenizerModel<T>::init(const TokenizerConfig& cfg) {
  cfg.validate();
  TokenizerModel m;
  m.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  std::size_t per_group[3] = {0, 0, 0};
  for (std::size_t j = 0; j < cfg.id_length(); ++j) {
    const auto g = cfg.group_of(j);
    const auto idx = per_group[static_cast<int>(g)]++;
    m.experts.emplace_back(cfg.expert_spec(g), std::string(group_name(g)) + std::to_string(idx), rng);
  }
  if (cfg.n_text > 0) {
    m.gate_text = Mlp<T>(cfg.gate_spec(ExpertGroup::text), "gate_text", rng);
    m.gate_text_bias = Parameter<T>("gate_text.extra_bias", 1, static_cast<Eigen::Index>(cfg.n_text));
    m.decoder_text = Mlp<T>(cfg.aux_decoder_spec(ExpertGroup::text), "decoder_text", rng);
  }
  if (cfg.n_vision > 0) {
    m.gate_vision = Mlp<T>(cfg.gate_spec(ExpertGroup::vision), "gate_vision", rng);
    m.gate_vision_bias = Parameter<T>("gate_vision.extra_bias", 1, static_cast<Eigen::Index>(cfg.n_vision));
    m.decoder_vision = Mlp<T>(cfg.aux_decoder_spec(ExpertGroup::vision), "decoder_vision", rng);
  }
  m.decoder = Mlp<T>(cfg.decoder_spec(), "decoder", rng);
  const std::size_t books = cfg.shared_codebook ? 1 : cfg.id_length();
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t t = 0; t < books; ++t) {
    Matrix<T> c(static_cast<Eigen::Index>(cfg.codebook_size), static_cast<Eigen::Index>(cfg.latent_dim));
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = static_cast<T>(normal(rng));
    normalize_rows(c);
    m.codebooks.emplace_back("codebook" + std::to_string(t), std::move(c));
  }
  return m;
}

template <typename T>
std::vector<Parameter<T>*> TokenizerModel<T>::network_parameters() {
  std::vector<Parameter<T>*> out;
  auto add = [&](Mlp<T>& mlp) {
    for (auto& p : mlp.params()) out.push_back(&p);
  };
  for (auto& e : experts) add(e);
  if (config.n_text > 0) {
    add(gate_text);
    out.push_back(&gate_text_bias);
  }
  if (config.n_vision > 0) {
    add(gate_vision);
    out.push_back(&gate_vision_bias);
  }
  add(decoder);
  if (config.n_text > 0) add(decoder_text);
  if (config.n_vision > 0) add(decoder_vision);
  return out;
}

template <typename T>
std::vector<Parameter<T>*> TokenizerModel<T>::codebook_parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& c : codebooks) out.push_back(&c);
  return out;
}

template <typename T>
std::size_t TokenizerModel<T>::parameter_count() const {
  auto* self = const_cast<TokenizerModel*>(this);
  std::size_t n = 0;
  for (auto* p : self->network_parameters()) n += static_cast<std::size_t>(p->size());
  for (auto* p : self->codebook_parameters()) n += static_cast<std::size_t>(p->size());
  return n;
}

template <typename T>
void TokenizerModel<T>::zero_grad() {
  for (auto* p : network_parameters()) p->zero_grad();
  for (auto* p : codebook_parameters()) p->zero_grad();
}

template <typename T>
template <typename U>
TokenizerModel<U> TokenizerModel<T>::cast() const {
  TokenizerModel<U> m;
  m.config = config;
  for (const auto& e : experts) m.experts.push_back(e.template cast<U>());
  m.gate_text = gate_text.template cast<U>();
  m.gate_vision = gate_vision.template cast<U>();
  m.gate_text_bias = gate_text_bias.template cast<U>();
  m.gate_vision_bias = gate_vision_bias.template cast<U>();
  m.decoder = decoder.template cast<U>();
  m.decoder_text = decoder_text.template cast<U>();
  m.decoder_vision = decoder_vision.template cast<U>();
  for (const auto& c : codebooks) m.codebooks.push_back(c.template cast<U>());
  return m;
}

template <typename T>
Checkpoint TokenizerModel<T>::to_checkpoint(const std::string& stage) const {
  Checkpoint ck;
  auto* self = const_cast<TokenizerModel*>(this);
  for (auto* p : self->network_parameters()) ck.tensors.push_back({p->name, p->value.template cast<float>()});
  for (auto* p : self->codebook_parameters()) ck.tensors.push_back({p->name, p->value.template cast<float>()});
  json meta = {{"type", "mmq_tokenizer"}, {"stage", stage}, {"config", json::parse(config.to_json())}};
  ck.metadata_json = meta.dump();
  return ck;
}

template <typename T>
TokenizerModel<T> TokenizerModel<T>::from_checkpoint(const Checkpoint& ck) {
  json meta;
  try {
    meta = json::parse(ck.metadata_json);
  } catch (const json::exception& e) {
    throw FormatError(std::string("tokenizer checkpoint: bad metadata: ") + e.what(), 0);
  }
  if (meta.value("type", "") != "mmq_tokenizer") throw FormatError("checkpoint is not an MMQ tokenizer", 0);
  TokenizerModel m = init(TokenizerConfig::from_json(meta.at("config").dump()));
  auto load = [&](Parameter<T>* p) {
    const MatrixF& src = ck.at(p->name);
    if (src.rows() != p->value.rows() || src.cols() != p->value.cols())
      throw FormatError("tokenizer checkpoint: shape mismatch for " + p->name, 0);
    p->value = src.template cast<T>();
  };
  for (auto* p : m.network_parameters()) load(p);
  for (auto* p : m.codebook_parameters()) load(p);
  return m;
}

// ---------------------------------------------------------------- forward

template <typename T>
SemanticId LatentBundle<T>::id(std::size_t i) const {
  SemanticId out;
  for (const auto& c : codes) out.codes.push_back(c[i]);
  return out;
}

template <typename T>
TokenizerFrozen<T> freeze(const LatentBundle<T>& b) {
  TokenizerFrozen<T> f;
  f.decoder_offset = b.zq - b.z;
  for (std::size_t j = 0; j < b.latents.size(); ++j) f.slot_offsets.push_back(b.quantized[j] - b.latents[j]);
  return f;
}

template <typename T>
LatentBundle<T> encode_experts(const TokenizerModel<T>& model, const Matrix<T>& text, const Matrix<T>& vision) {
  const auto& c = model.config;
  if (static_cast<std::size_t>(text.cols()) != c.text_dim || static_cast<std::size_t>(vision.cols()) != c.vision_dim)
    throw ShapeError("tokenizer: expected input dims (" + std::to_string(c.text_dim) + ", " + std::to_string(c.vision_dim) +
                     "), got (" + std::to_string(text.cols()) + ", " + std::to_string(vision.cols()) + ")");
  if (text.rows() != vision.rows()) throw ShapeError("tokenizer: text/vision batch sizes differ");
  LatentBundle<T> b;
  b.text = text;
  b.vision = vision;
  b.joint.resize(text.rows(), text.cols() + vision.cols());
  b.joint << text, vision;
  b.expert_caches.resize(c.id_length());
  for (std::size_t j = 0; j < c.id_length(); ++j) {
    const auto g = c.group_of(j);
    const Matrix<T>& in = g == ExpertGroup::shared ? b.joint : g == ExpertGroup::text ? b.text : b.vision;
    b.latents.push_back(model.experts[j].forward(in, &b.expert_caches[j]));
  }
  return b;
}

template <typename T>
void gate_weights(const TokenizerModel<T>& model, LatentBundle<T>& b) {
  const auto& c = model.config;
  const Eigen::Index n = b.text.rows();
  b.gates_text.resize(n, static_cast<Eigen::Index>(c.n_text));
  b.gates_vision.resize(n, static_cast<Eigen::Index>(c.n_vision));
  if (c.n_text > 0) {
    Matrix<T> logits = model.gate_text.forward(b.text, &b.gate_text_cache);
    logits.rowwise() += model.gate_text_bias.value.row(0);
    b.gates_text = softmax_rows(logits);
  }
  if (c.n_vision > 0) {
    Matrix<T> logits = model.gate_vision.forward(b.vision, &b.gate_vision_cache);
    logits.rowwise() += model.gate_vision_bias.value.row(0);
    b.gates_vision = softmax_rows(logits);
  }
}

template <typename T>
Matrix<T> fuse_slots(const TokenizerConfig& c, const LatentBundle<T>& b, const std::vector<Matrix<T>>& per_slot) {
  Matrix<T> out = Matrix<T>::Zero(per_slot.front().rows(), per_slot.front().cols());
  for (std::size_t j = 0; j < c.id_length(); ++j) {
    switch (c.group_of(j)) {
      case ExpertGroup::shared: out += per_slot[j]; break;
      case ExpertGroup::text: out += b.gates_text.col(static_cast<Eigen::Index>(j - c.n_shared)).asDiagonal() * per_slot[j]; break;
      case ExpertGroup::vision:
        out += b.gates_vision.col(static_cast<Eigen::Index>(j - c.n_shared - c.n_text)).asDiagonal() * per_slot[j];
        break;
    }
  }
  return out;
}

template <typename T>
void fuse(const TokenizerModel<T>& model, LatentBundle<T>& b) {
  b.z = fuse_slots(model.config, b, b.latents);
}

template <typename T>
std::vector<std::uint32_t> lookup_rows(const Matrix<T>& latents, const Matrix<T>& codewords, bool cosine,
                                       std::size_t* zero_rows) {
  if (latents.cols() != codewords.cols()) throw ShapeError("lookup: latent/codeword dim mismatch");
  const MatrixD u = latents.template cast<double>();
  const MatrixD c = codewords.template cast<double>();
  std::vector<std::uint32_t> out(static_cast<std::size_t>(u.rows()), 0);
  if (cosine) {
    const Vector<double> cn = c.rowwise().norm();
    const MatrixD dots = u * c.transpose();
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
      const double un = u.row(i).norm();
      if (!(un > 0.0)) {
        if (zero_rows) ++*zero_rows;
        continue;
      }
      double best = -std::numeric_limits<double>::infinity();
      for (Eigen::Index k = 0; k < c.rows(); ++k) {
        const double cs = cn(k) > 0.0 ? dots(i, k) / (un * cn(k)) : 0.0;
        if (cs > best) {
          best = cs;
          out[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(k);
        }
      }
    }
    return out;
  }
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < c.rows(); ++k) {
      const double d = (u.row(i) - c.row(k)).squaredNorm();
      if (d < best) {
        best = d;
        out[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(k);
      }
    }
  }
  return out;
}

LookupResult cosine_lookup(const float* z, Codebook& book) {
  const MatrixF row = Eigen::Map<const MatrixF>(z, 1, book.codewords.cols());
  std::size_t zeros = 0;
  LookupResult r;
  r.index = lookup_rows(row, book.codewords, true, &zeros).front();
  r.zero_latent = zeros > 0;
  ++book.usage_counts[r.index];
  return r;
}

template <typename T>
void quantize_bundle(const TokenizerModel<T>& model, LatentBundle<T>& b) {
  const auto& c = model.config;
  b.codes.clear();
  b.quantized.clear();
  b.zero_latents = 0;
  for (std::size_t j = 0; j < c.id_length(); ++j) {
    const Matrix<T>& book = model.codebook(j).value;
    b.codes.push_back(lookup_rows(b.latents[j], book, c.use_cosine, &b.zero_latents));
    Matrix<T> q(b.latents[j].rows(), b.latents[j].cols());
    for (std::size_t i = 0; i < b.codes.back().size(); ++i) q.row(static_cast<Eigen::Index>(i)) = book.row(b.codes.back()[i]);
    b.quantized.push_back(std::move(q));
  }
  b.zq = fuse_slots(c, b, b.quantized);
}

template <typename T>
LatentBundle<T> forward(const TokenizerModel<T>& model, const Matrix<T>& text, const Matrix<T>& vision) {
  auto b = encode_experts(model, text, vision);
  gate_weights(model, b);
  fuse(model, b);
  quantize_bundle(model, b);
  return b;
}

// ---------------------------------------------------------------- backward

template <typename T>
BundleGrad<T> BundleGrad<T>::zeros(const LatentBundle<T>& b) {
  BundleGrad g;
  g.dz = Matrix<T>::Zero(b.z.rows(), b.z.cols());
  for (const auto& l : b.latents) g.dlatents.push_back(Matrix<T>::Zero(l.rows(), l.cols()));
  g.dgates_text = Matrix<T>::Zero(b.gates_text.rows(), b.gates_text.cols());
  g.dgates_vision = Matrix<T>::Zero(b.gates_vision.rows(), b.gates_vision.cols());
  return g;
}

template <typename T>
void tokenizer_backward(TokenizerModel<T>& model, const LatentBundle<T>& b, BundleGrad<T> g) {
  const auto& c = model.config;
  for (std::size_t j = 0; j < c.id_length(); ++j) {
    switch (c.group_of(j)) {
      case ExpertGroup::shared: g.dlatents[j] += g.dz; break;
      case ExpertGroup::text: {
        const auto col = static_cast<Eigen::Index>(j - c.n_shared);
        g.dlatents[j] += b.gates_text.col(col).asDiagonal() * g.dz;
        g.dgates_text.col(col) += g.dz.cwiseProduct(b.latents[j]).rowwise().sum();
        break;
      }
      case ExpertGroup::vision: {
        const auto col = static_cast<Eigen::Index>(j - c.n_shared - c.n_text);
        g.dlatents[j] += b.gates_vision.col(col).asDiagonal() * g.dz;
        g.dgates_vision.col(col) += g.dz.cwiseProduct(b.latents[j]).rowwise().sum();
        break;
      }
    }
  }
  if (c.n_text > 0) {
    const Matrix<T> dlogits = softmax_rows_backward(b.gates_text, g.dgates_text);
    model.gate_text_bias.grad += dlogits.colwise().sum();
    model.gate_text.backward_params_only(b.gate_text_cache, dlogits);
  }
  if (c.n_vision > 0) {
    const Matrix<T> dlogits = softmax_rows_backward(b.gates_vision, g.dgates_vision);
    model.gate_vision_bias.grad += dlogits.colwise().sum();
    model.gate_vision.backward_params_only(b.gate_vision_cache, dlogits);
  }
  for (std::size_t j = 0; j < c.id_length(); ++j) model.experts[j].backward_params_only(b.expert_caches[j], g.dlatents[j]);
}

// ---------------------------------------------------------------- losses

template <typename T>
double recon_loss(TokenizerModel<T>& model, const LatentBundle<T>& b, const TokenizerFrozen<T>* frozen,
                  BundleGrad<T>* grad, T weight) {
  const Matrix<T> in = b.z + (frozen ? frozen->decoder_offset : Matrix<T>(b.zq - b.z));
  typename Mlp<T>::Cache cache;
  const Matrix<T> out = model.decoder.forward(in, grad ? &cache : nullptr);
  Matrix<T> d;
  const T loss = mse(out, b.joint, grad ? &d : nullptr);
  if (grad) grad->dz += model.decoder.backward(cache, weight * d);
  return static_cast<double>(loss);
}

template <typename T>
double aux_loss(TokenizerModel<T>& model, const LatentBundle<T>& b, const TokenizerFrozen<T>* frozen,
                BundleGrad<T>* grad, T weight) {
  const auto& c = model.config;
  double total = 0.0;
  auto term = [&](std::size_t first, std::size_t count, Mlp<T>& dec, const Matrix<T>& target) {
    if (count == 0) return;
    Matrix<T> in = Matrix<T>::Zero(b.z.rows(), b.z.cols());
    for (std::size_t j = first; j < first + count; ++j)
      in += b.latents[j] + (frozen ? frozen->slot_offsets[j] : Matrix<T>(b.quantized[j] - b.latents[j]));
    typename Mlp<T>::Cache cache;
    const Matrix<T> out = dec.forward(in, grad ? &cache : nullptr);
    Matrix<T> d;
    total += static_cast<double>(mse(out, target, grad ? &d : nullptr));
    if (grad) {
      const Matrix<T> din = dec.backward(cache, weight * d);
      for (std::size_t j = first; j < first + count; ++j) grad->dlatents[j] += din;
    }
  };
  term(c.n_shared, c.n_text, model.decoder_text, b.text);
  term(c.n_shared + c.n_text, c.n_vision, model.decoder_vision, b.vision);
  return total;
}

namespace {

std::vector<std::size_t> group_slots(const TokenizerConfig& c, ExpertGroup g) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < c.id_length(); ++j)
    if (c.group_of(j) == g) out.push_back(j);
  return out;
}

template <typename T>
Matrix<T> stacked_experts(const TokenizerModel<T>& model, const std::vector<std::size_t>& slots) {
  Matrix<T> v(static_cast<Eigen::Index>(slots.size()), static_cast<Eigen::Index>(model.experts[slots[0]].parameter_count()));
  for (std::size_t i = 0; i < slots.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = model.experts[slots[i]].flatten().transpose();
  return v;
}

}  // namespace

template <typename T>
double ortho_group_loss(const TokenizerModel<T>& model, ExpertGroup g) {
  const auto slots = group_slots(model.config, g);
  if (slots.size() < 2) return 0.0;
  return static_cast<double>(gram_penalty(stacked_experts(model, slots)));
}

template <typename T>
double ortho_loss(TokenizerModel<T>& model, bool backward, T weight) {
  double total = 0.0;
  for (auto g : {ExpertGroup::shared, ExpertGroup::text, ExpertGroup::vision}) {
    const auto slots = group_slots(model.config, g);
    if (slots.size() < 2) continue;
    Matrix<T> dv;
    total += static_cast<double>(gram_penalty(stacked_experts(model, slots), backward ? &dv : nullptr));
    if (backward)
      for (std::size_t i = 0; i < slots.size(); ++i)
        model.experts[slots[i]].accumulate_flat_grad(weight * dv.row(static_cast<Eigen::Index>(i)).transpose());
  }
  return total;
}

template <typename T>
Stage1Loss total_loss(TokenizerModel<T>& model, const Matrix<T>& text, const Matrix<T>& vision,
                      const TokenizerFrozen<T>* frozen, bool backward, LatentBundle<T>* bundle_out) {
  const auto& c = model.config;
  auto b = forward(model, text, vision);
  auto g = BundleGrad<T>::zeros(b);
  BundleGrad<T>* gp = backward ? &g : nullptr;
  Stage1Loss out;
  out.recon = recon_loss(model, b, frozen, gp, static_cast<T>(c.alpha));
  out.aux = aux_loss(model, b, frozen, c.beta > 0 ? gp : nullptr, static_cast<T>(c.beta));
  out.ortho = ortho_loss(model, backward && c.gamma > 0, static_cast<T>(c.gamma));
  out.total = c.alpha * out.recon + c.beta * out.aux + c.gamma * out.ortho;
  if (backward) tokenizer_backward(model, b, std::move(g));
  if (bundle_out) *bundle_out = std::move(b);
  return out;
}

// ---------------------------------------------------------------- codebooks

namespace {

/// Codebook index -> slots that read from it.
std::vector<std::vector<std::size_t>> slots_per_book(const TokenizerConfig& c) {
  std::vector<std::vector<std::size_t>> out(c.shared_codebook ? 1 : c.id_length());
  for (std::size_t j = 0; j < c.id_length(); ++j) out[c.shared_codebook ? 0 : j].push_back(j);
  return out;
}

}  // namespace

EmaState EmaState::init(const TokenizerModel<float>& model) {
  EmaState s;
  for (const auto& c : model.codebooks) {
    s.sums.push_back(c.value);
    s.sizes.emplace_back(static_cast<std::size_t>(c.value.rows()), 1.0);
    s.idle_steps.emplace_back(static_cast<std::size_t>(c.value.rows()), 0);
  }
  return s;
}

std::size_t ema_codebook_update(TokenizerModel<float>& model, EmaState& state, const LatentBundle<float>& b,
                                std::mt19937_64& rng) {
  const auto& cfg = model.config;
  const double decay = cfg.ema_decay;
  const auto books = slots_per_book(cfg);
  std::size_t restarts = 0;
  for (std::size_t t = 0; t < books.size(); ++t) {
    MatrixF& words = model.codebooks[t].value;
    const Eigen::Index k = words.rows();
    MatrixD batch_sum = MatrixD::Zero(k, words.cols());
    std::vector<double> batch_count(static_cast<std::size_t>(k), 0.0);
    for (std::size_t j : books[t]) {
      for (std::size_t i = 0; i < b.codes[j].size(); ++i) {
        RowVector<double> u = b.latents[j].row(static_cast<Eigen::Index>(i)).cast<double>();
        if (cfg.use_cosine) {
          const double n = u.norm();
          if (!(n > 0.0)) continue;
          u /= n;
        }
        batch_sum.row(b.codes[j][i]) += u;
        batch_count[b.codes[j][i]] += 1.0;
      }
    }
    auto& sums = state.sums[t];
    auto& sizes = state.sizes[t];
    auto& idle = state.idle_steps[t];
    const double total_size = [&] {
      double s = 0.0;
      for (std::size_t q = 0; q < sizes.size(); ++q) s += decay * sizes[q] + (1.0 - decay) * batch_count[q];
      return s;
    }();
    for (Eigen::Index q = 0; q < k; ++q) {
      const auto qi = static_cast<std::size_t>(q);
      sizes[qi] = decay * sizes[qi] + (1.0 - decay) * batch_count[qi];
      sums.row(q) = (decay * sums.row(q).cast<double>() + (1.0 - decay) * batch_sum.row(q)).cast<float>();
      idle[qi] = batch_count[qi] > 0 ? 0 : idle[qi] + 1;
      if (cfg.use_cosine) {
        const float n = sums.row(q).norm();
        if (n > 0.0f) words.row(q) = sums.row(q) / n;
      } else {
        // Laplace-smoothed cluster size keeps rarely used codes finite.
        const double eps = 1e-5;
        const double smoothed = (sizes[qi] + eps) / (total_size + static_cast<double>(k) * eps) * total_size;
        words.row(q) = (sums.row(q).cast<double>() / smoothed).cast<float>();
      }
    }
    for (Eigen::Index q = 0; q < k; ++q) {
      const auto qi = static_cast<std::size_t>(q);
      if (idle[qi] < cfg.dead_code_steps) continue;
      std::uniform_int_distribution<std::size_t> pick_slot(0, books[t].size() - 1);
      const std::size_t j = books[t][pick_slot(rng)];
      std::uniform_int_distribution<Eigen::Index> pick_row(0, b.latents[j].rows() - 1);
      RowVector<float> u = b.latents[j].row(pick_row(rng));
      if (cfg.use_cosine) {
        const float n = u.norm();
        if (!(n > 0.0f)) continue;
        u /= n;
      }
      words.row(q) = u;
      sums.row(q) = u;
      sizes[qi] = 1.0;
      idle[qi] = 0;
      ++restarts;
    }
  }
  return restarts;
}

void init_codebooks_kmeans(TokenizerModel<float>& model, const LatentBundle<float>& b, std::uint64_t seed) {
  const auto& cfg = model.config;
  const auto books = slots_per_book(cfg);
  for (std::size_t t = 0; t < books.size(); ++t) {
    const Eigen::Index rows = static_cast<Eigen::Index>(books[t].size()) * b.latents[books[t][0]].rows();
    MatrixF pts(rows, static_cast<Eigen::Index>(cfg.latent_dim));
    Eigen::Index r = 0;
    for (std::size_t j : books[t]) {
      pts.middleRows(r, b.latents[j].rows()) = b.latents[j];
      r += b.latents[j].rows();
    }
    if (cfg.use_cosine) normalize_rows(pts);
    if (static_cast<std::size_t>(pts.rows()) < cfg.codebook_size)
      throw std::invalid_argument("codebook init: first batch holds " + std::to_string(pts.rows()) +
                                  " latents, need at least codebook_size=" + std::to_string(cfg.codebook_size));
    auto km = kmeans(pts, cfg.codebook_size, 20, seed + t);
    if (cfg.use_cosine) normalize_rows(km.codebook.codewords);
    model.codebooks[t].value = km.codebook.codewords;
  }
}

// ---------------------------------------------------------------- training

std::string EpochReport::to_json() const {
  json j = {{"epoch", epoch},           {"loss", loss},         {"recon_loss", recon_loss},
            {"aux_loss", aux_loss},     {"ortho_loss", ortho_loss}, {"utilization", utilization},
            {"entropy", entropy},       {"restarts", restarts}, {"zero_latents", zero_latents}};
  return j.dump();
}

std::vector<EpochReport> train_stage1(TokenizerModel<float>& model, const EmbeddingDataset& ds, const Stage1Options& opts) {
  const auto& cfg = model.config;
  if (ds.text_dim() != cfg.text_dim || ds.vision_dim() != cfg.vision_dim)
    throw ShapeError("train_stage1: dataset dims do not match the tokenizer config");
  if (ds.empty()) throw std::invalid_argument("train_stage1: empty dataset");
  if (opts.batch_size == 0) throw std::invalid_argument("train_stage1: batch_size must be >= 1");
  std::mt19937_64 rng(cfg.seed ^ 0x5deece66dULL);
  const std::size_t n = ds.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  Adam adam(AdamConfig{opts.lr});
  auto params = model.network_parameters();
  EmaState ema;
  bool initialized = false;
  std::vector<EpochReport> reports;

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochReport rep;
    rep.epoch = epoch;
    SlotCounts counts(cfg.id_length(), std::vector<std::uint64_t>(cfg.codebook_size, 0));
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += opts.batch_size) {
      const std::size_t end = std::min(n, start + opts.batch_size);
      MatrixF xt(static_cast<Eigen::Index>(end - start), ds.text().cols());
      MatrixF xv(static_cast<Eigen::Index>(end - start), ds.vision().cols());
      for (std::size_t i = start; i < end; ++i) {
        xt.row(static_cast<Eigen::Index>(i - start)) = ds.text().row(static_cast<Eigen::Index>(order[i]));
        xv.row(static_cast<Eigen::Index>(i - start)) = ds.vision().row(static_cast<Eigen::Index>(order[i]));
      }
      if (!initialized) {
        const auto first = encode_experts(model, xt, xv);
        init_codebooks_kmeans(model, first, cfg.seed);
        ema = EmaState::init(model);
        initialized = true;
      }
      LatentBundle<float> b;
      const auto loss = total_loss<float>(model, xt, xv, nullptr, true, &b);
      if (!std::isfinite(loss.total)) {
        std::ostringstream msg;
        msg << "stage-1 loss is not finite at epoch " << epoch << ", batch " << batches << " (recon=" << loss.recon
            << ", aux=" << loss.aux << ", ortho=" << loss.ortho << ")";
        throw NumericError(msg.str());
      }
      adam.step(params);
      rep.restarts += ema_codebook_update(model, ema, b, rng);
      for (std::size_t j = 0; j < b.codes.size(); ++j)
        for (auto code : b.codes[j]) ++counts[j][code];
      rep.loss += loss.total;
      rep.recon_loss += loss.recon;
      rep.aux_loss += loss.aux;
      rep.ortho_loss += loss.ortho;
      rep.zero_latents += b.zero_latents;
      ++batches;
    }
    const double nb = static_cast<double>(std::max<std::size_t>(1, batches));
    rep.loss /= nb;
    rep.recon_loss /= nb;
    rep.aux_loss /= nb;
    rep.ortho_loss /= nb;
    rep.utilization = codebook_utilization(counts);
    rep.entropy = token_entropy(counts);
    if (opts.on_epoch) opts.on_epoch(rep);
    reports.push_back(rep);
  }
  return reports;
}

namespace {

constexpr std::size_t kEvalChunk = 1024;

template <typename F>
void for_chunks(const EmbeddingDataset& ds, F&& f) {
  for (std::size_t start = 0; start < ds.size(); start += kEvalChunk) {
    const auto len = static_cast<Eigen::Index>(std::min(kEvalChunk, ds.size() - start));
    const auto s = static_cast<Eigen::Index>(start);
    f(start, MatrixF(ds.text().middleRows(s, len)), MatrixF(ds.vision().middleRows(s, len)));
  }
}

}  // namespace

SemanticId tokenize(const TokenizerModel<float>& model, const MultimodalEmbedding& e) {
  const MatrixF t = Eigen::Map<const MatrixF>(e.text.data(), 1, static_cast<Eigen::Index>(e.text.size()));
  const MatrixF v = Eigen::Map<const MatrixF>(e.vision.data(), 1, static_cast<Eigen::Index>(e.vision.size()));
  return forward(model, t, v).id(0);
}

std::vector<SemanticId> tokenize_all(const TokenizerModel<float>& model, const EmbeddingDataset& ds) {
  std::vector<SemanticId> out(ds.size());
  for_chunks(ds, [&](std::size_t start, const MatrixF& t, const MatrixF& v) {
    const auto b = forward(model, t, v);
    for (std::size_t i = 0; i < b.batch(); ++i) out[start + i] = b.id(i);
  });
  return out;
}

double dataset_recon_loss(const TokenizerModel<float>& model, const EmbeddingDataset& ds) {
  if (ds.empty()) return 0.0;
  double sq = 0.0;
  for_chunks(ds, [&](std::size_t, const MatrixF& t, const MatrixF& v) {
    const auto b = forward(model, t, v);
    const MatrixF out = model.decoder.forward(b.z + (b.zq - b.z));
    sq += (out - b.joint).cast<double>().squaredNorm();
  });
  return sq / static_cast<double>(ds.size() * (ds.text_dim() + ds.vision_dim()));
}

double expert_gram_offdiag(const TokenizerModel<float>& model) {
  double sum = 0.0;
  std::size_t pairs = 0;
  for (auto g : {ExpertGroup::shared, ExpertGroup::text, ExpertGroup::vision}) {
    const auto slots = group_slots(model.config, g);
    if (slots.size() < 2) continue;
    MatrixD v = stacked_experts(model, slots).cast<double>();
    normalize_rows(v);
    const MatrixD gram = v * v.transpose();
    for (Eigen::Index i = 0; i < gram.rows(); ++i)
      for (Eigen::Index j = i + 1; j < gram.cols(); ++j) {
        sum += std::abs(gram(i, j));
        ++pairs;
      }
  }
  return pairs ? sum / static_cast<double>(pairs) : 0.0;
}

#define MMQ_INSTANTIATE_TOKENIZER(T)                                                                                  \
  template struct TokenizerModel<T>;                                                                                  \
  template struct LatentBundle<T>;                                                                                    \
  template struct BundleGrad<T>;                                                                                      \
  template TokenizerFrozen<T> freeze<T>(const LatentBundle<T>&);                                                      \
  template LatentBundle<T> encode_experts<T>(const TokenizerModel<T>&, const Matrix<T>&, const Matrix<T>&);           \
  template void gate_weights<T>(const TokenizerModel<T>&, LatentBundle<T>&);                                          \
  template void fuse<T>(const TokenizerModel<T>&, LatentBundle<T>&);                                                  \
  template void quantize_bundle<T>(const TokenizerModel<T>&, LatentBundle<T>&);                                       \
  template LatentBundle<T> forward<T>(const TokenizerModel<T>&, const Matrix<T>&, const Matrix<T>&);                  \
  template Matrix<T> fuse_slots<T>(const TokenizerConfig&, const LatentBundle<T>&, const std::vector<Matrix<T>>&);    \
  template std::vector<std::uint32_t> lookup_rows<T>(const Matrix<T>&, const Matrix<T>&, bool, std::size_t*);         \
  template void tokenizer_backward<T>(TokenizerModel<T>&, const LatentBundle<T>&, BundleGrad<T>);                     \
  template double recon_loss<T>(TokenizerModel<T>&, const LatentBundle<T>&, const TokenizerFrozen<T>*,               \
                                BundleGrad<T>*, T);                                                                   \
  template double aux_loss<T>(TokenizerModel<T>&, const LatentBundle<T>&, const TokenizerFrozen<T>*, BundleGrad<T>*,  \
                              T);                                                                                     \
  template double ortho_loss<T>(TokenizerModel<T>&, bool, T);                                                         \
  template double ortho_group_loss<T>(const TokenizerModel<T>&, ExpertGroup);                                         \
  template Stage1Loss total_loss<T>(TokenizerModel<T>&, const Matrix<T>&, const Matrix<T>&, const TokenizerFrozen<T>*, \
                                    bool, LatentBundle<T>*);

MMQ_INSTANTIATE_TOKENIZER(float)
MMQ_INSTANTIATE_TOKENIZER(double)

template TokenizerModel<double> TokenizerModel<float>::cast<double>() const;
template TokenizerModel<float> TokenizerModel<double>::cast<float>() const;
template TokenizerModel<float> TokenizerModel<float>::cast<float>() const;

}  // namespace mmq
