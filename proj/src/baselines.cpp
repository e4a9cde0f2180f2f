#include "mmq/quantize.hpp"
#include "mmq/rqvae.hpp"

#include <json.hpp>

#include <Eigen/SVD>

#include <stdexcept>

namespace mmq {

namespace {

MatrixF residual_after(const MatrixF& points, const Codebook& book, const std::vector<std::uint32_t>& codes) {
  MatrixF r = points;
  for (Eigen::Index i = 0; i < r.rows(); ++i) r.row(i) -= book.codewords.row(codes[static_cast<std::size_t>(i)]);
  return r;
}

MatrixF pad_columns(const MatrixF& x, std::size_t dim) {
  if (static_cast<std::size_t>(x.cols()) == dim) return x;
  MatrixF out = MatrixF::Zero(x.rows(), static_cast<Eigen::Index>(dim));
  out.leftCols(x.cols()) = x;
  return out;
}

}  // namespace

// ---------------------------------------------------------------- RQ

std::size_t RqModel::dim() const {
  if (mode == RqMode::vae) return vae->input_dim();
  return levels.empty() ? 0 : levels.front().dim();
}

SemanticId RqModel::encode(const float* x) const {
  const MatrixF row = Eigen::Map<const MatrixF>(x, 1, static_cast<Eigen::Index>(dim()));
  return encode_rows(row).front();
}

std::vector<SemanticId> RqModel::encode_rows(const MatrixF& points) const {
  if (static_cast<std::size_t>(points.cols()) != dim())
    throw ShapeError("rq encode: expected dim " + std::to_string(dim()) + ", got " + std::to_string(points.cols()));
  if (mode == RqMode::vae) return vae->encode(points);
  std::vector<SemanticId> out(static_cast<std::size_t>(points.rows()));
  MatrixF r = points;
  for (const auto& book : levels) {
    const auto codes = book.nearest_rows(r);
    for (std::size_t i = 0; i < out.size(); ++i) out[i].codes.push_back(codes[i]);
    r = residual_after(r, book, codes);
  }
  return out;
}

MatrixF RqModel::reconstruct(const MatrixF& points) const {
  if (mode == RqMode::vae) return vae->reconstruct(points);
  const auto ids = encode_rows(points);
  MatrixF out = MatrixF::Zero(points.rows(), points.cols());
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t l = 0; l < levels.size(); ++l)
      out.row(static_cast<Eigen::Index>(i)) += levels[l].codewords.row(ids[i].codes[l]);
  return out;
}

RqModel rq_fit(const MatrixF& points, std::size_t levels, std::size_t k, RqMode mode, std::uint64_t seed,
               std::size_t kmeans_iters) {
  return rq_fit(points, levels, k, mode, seed, RqVaeOptions{}, kmeans_iters);
}

RqModel rq_fit(const MatrixF& points, std::size_t levels, std::size_t k, RqMode mode, std::uint64_t seed,
               const RqVaeOptions& vae_opts, std::size_t kmeans_iters) {
  if (!all_finite(points)) throw NumericError("rq_fit: non-finite input");
  if (levels == 0) throw std::invalid_argument("rq_fit: levels must be >= 1");
  RqModel model;
  model.mode = mode;
  if (mode == RqMode::vae) {
    auto vae = std::make_shared<RqVae>(RqVae::train(points, levels, k, vae_opts, seed));
    for (const auto& c : vae->net.codebooks) model.levels.emplace_back(c.value);
    const MatrixF recon = vae->reconstruct(points);
    model.level_distortion.push_back(mean_squared_distance(points, recon));
    model.vae = std::move(vae);
    return model;
  }
  MatrixF r = points;
  for (std::size_t l = 0; l < levels; ++l) {
    auto km = kmeans(r, k, kmeans_iters, seed + l);
    r = residual_after(r, km.codebook, km.assignments);
    model.level_distortion.push_back(r.cast<double>().rowwise().squaredNorm().mean());
    model.levels.push_back(std::move(km.codebook));
  }
  return model;
}

// ---------------------------------------------------------------- OPQ

SemanticId OpqModel::encode(const float* x) const {
  const MatrixF row = Eigen::Map<const MatrixF>(x, 1, static_cast<Eigen::Index>(dim()));
  return encode_rows(row).front();
}

std::vector<SemanticId> OpqModel::encode_rows(const MatrixF& points) const {
  if (static_cast<std::size_t>(points.cols()) != dim())
    throw ShapeError("opq encode: expected dim " + std::to_string(dim()) + ", got " + std::to_string(points.cols()));
  const MatrixF y = points * rotation;
  const auto sub = static_cast<Eigen::Index>(dim() / m);
  std::vector<SemanticId> out(static_cast<std::size_t>(points.rows()));
  for (std::size_t b = 0; b < m; ++b) {
    const MatrixF block = y.middleCols(static_cast<Eigen::Index>(b) * sub, sub);
    const auto codes = books[b].nearest_rows(block);
    for (std::size_t i = 0; i < out.size(); ++i) out[i].codes.push_back(codes[i]);
  }
  return out;
}

MatrixF OpqModel::reconstruct(const MatrixF& points) const {
  const auto ids = encode_rows(points);
  const auto sub = static_cast<Eigen::Index>(dim() / m);
  MatrixF y(points.rows(), points.cols());
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t b = 0; b < m; ++b)
      y.row(static_cast<Eigen::Index>(i)).segment(static_cast<Eigen::Index>(b) * sub, sub) = books[b].codewords.row(ids[i].codes[b]);
  return y * rotation.transpose();
}

double OpqModel::orthogonality_error() const {
  const MatrixD r = rotation.cast<double>();
  return (r.transpose() * r - MatrixD::Identity(r.rows(), r.cols())).norm();
}

OpqModel opq_fit(const MatrixF& points, std::size_t m, std::size_t k, bool rotate, std::size_t iters,
                 std::uint64_t seed, std::size_t kmeans_iters) {
  const auto d = static_cast<std::size_t>(points.cols());
  if (m == 0 || d % m != 0)
    throw std::invalid_argument("opq_fit: dim " + std::to_string(d) + " not divisible by M=" + std::to_string(m));
  const auto sub = static_cast<Eigen::Index>(d / m);
  const MatrixD x = points.cast<double>();

  OpqModel model;
  model.m = m;
  MatrixD rot = MatrixD::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  MatrixD y_hat(x.rows(), x.cols());

  auto quantize_blocks = [&](bool warm) {
    const MatrixF y = (x * rot).cast<float>();
    for (std::size_t b = 0; b < m; ++b) {
      const MatrixF block = y.middleCols(static_cast<Eigen::Index>(b) * sub, sub);
      auto km = warm ? kmeans_from(block, model.books[b].codewords, kmeans_iters) : kmeans(block, k, kmeans_iters, seed + b);
      for (Eigen::Index i = 0; i < block.rows(); ++i)
        y_hat.row(i).segment(static_cast<Eigen::Index>(b) * sub, sub) =
            km.codebook.codewords.row(km.assignments[static_cast<std::size_t>(i)]).cast<double>();
      if (warm)
        model.books[b] = std::move(km.codebook);
      else
        model.books.push_back(std::move(km.codebook));
    }
    model.distortion_history.push_back((x * rot - y_hat).rowwise().squaredNorm().mean());
  };

  quantize_blocks(false);
  if (rotate) {
    for (std::size_t it = 0; it < iters; ++it) {
      // Orthogonal Procrustes: argmin_R ||X R - Y_hat||_F over orthogonal R.
      Eigen::BDCSVD<MatrixD> svd(x.transpose() * y_hat, Eigen::ComputeFullU | Eigen::ComputeFullV);
      rot = svd.matrixU() * svd.matrixV().transpose();
      quantize_blocks(true);
    }
  }
  model.rotation = rot.cast<float>();
  return model;
}

// ---------------------------------------------------------------- naming

std::string to_string(Paradigm p) { return p == Paradigm::MA ? "MA" : "MS"; }

std::string to_string(BaselineMethod m) {
  switch (m) {
    case BaselineMethod::rq_vae: return "rq_vae";
    case BaselineMethod::rq_kmeans: return "rq_kmeans";
    case BaselineMethod::opq: return "opq";
  }
  return "?";
}

Paradigm parse_paradigm(const std::string& s) {
  if (s == "MA") return Paradigm::MA;
  if (s == "MS") return Paradigm::MS;
  throw std::invalid_argument("unknown paradigm '" + s + "' (expected MA or MS)");
}

BaselineMethod parse_baseline_method(const std::string& s) {
  if (s == "rq_vae") return BaselineMethod::rq_vae;
  if (s == "rq_kmeans") return BaselineMethod::rq_kmeans;
  if (s == "opq") return BaselineMethod::opq;
  throw std::invalid_argument("unknown baseline method '" + s + "' (expected rq_vae, rq_kmeans or opq)");
}

// ---------------------------------------------------------------- tokenizer

namespace {

std::vector<std::size_t> split_lengths(const BaselineConfig& cfg) {
  if (cfg.id_length == 0) throw std::invalid_argument("baseline: id_length must be >= 1");
  if (cfg.paradigm == Paradigm::MA) return {cfg.id_length};
  if (cfg.id_length % 2 != 0) throw std::invalid_argument("baseline: MS paradigm needs an even id_length");
  return {cfg.id_length / 2, cfg.id_length / 2};
}

std::vector<MatrixF> paradigm_inputs(const BaselineConfig& cfg, const MatrixF& text, const MatrixF& vision) {
  if (cfg.paradigm == Paradigm::MS) return {text, vision};
  MatrixF cat(text.rows(), text.cols() + vision.cols());
  cat << text, vision;
  return {cat};
}

std::size_t padded_dim(std::size_t d, std::size_t m) { return (d + m - 1) / m * m; }

}  // namespace

std::size_t BaselineTokenizer::id_length() const { return config.id_length; }

static std::vector<SemanticId> tokenize_rows(const BaselineTokenizer& t, const MatrixF& text, const MatrixF& vision) {
  if (static_cast<std::size_t>(text.cols()) != t.text_dim || static_cast<std::size_t>(vision.cols()) != t.vision_dim)
    throw ShapeError("baseline tokenize: expected dims (" + std::to_string(t.text_dim) + ", " + std::to_string(t.vision_dim) +
                     "), got (" + std::to_string(text.cols()) + ", " + std::to_string(vision.cols()) + ")");
  const auto inputs = paradigm_inputs(t.config, text, vision);
  std::vector<SemanticId> out(static_cast<std::size_t>(text.rows()));
  for (std::size_t q = 0; q < inputs.size(); ++q) {
    const auto part = t.config.method == BaselineMethod::opq ? t.opq[q].encode_rows(pad_columns(inputs[q], t.opq[q].dim()))
                                                             : t.rq[q].encode_rows(inputs[q]);
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i].codes.insert(out[i].codes.end(), part[i].codes.begin(), part[i].codes.end());
  }
  return out;
}

SemanticId BaselineTokenizer::tokenize(const MultimodalEmbedding& e) const {
  const MatrixF text = Eigen::Map<const MatrixF>(e.text.data(), 1, static_cast<Eigen::Index>(e.text.size()));
  const MatrixF vision = Eigen::Map<const MatrixF>(e.vision.data(), 1, static_cast<Eigen::Index>(e.vision.size()));
  return tokenize_rows(*this, text, vision).front();
}

std::vector<SemanticId> BaselineTokenizer::tokenize_all(const EmbeddingDataset& ds) const {
  return tokenize_rows(*this, ds.text(), ds.vision());
}

double BaselineTokenizer::recon_loss(const EmbeddingDataset& ds) const {
  if (ds.empty()) return 0.0;
  const auto inputs = paradigm_inputs(config, ds.text(), ds.vision());
  double sq = 0.0;
  double count = 0.0;
  for (std::size_t q = 0; q < inputs.size(); ++q) {
    MatrixF recon;
    if (config.method == BaselineMethod::opq)
      recon = opq[q].reconstruct(pad_columns(inputs[q], opq[q].dim())).leftCols(inputs[q].cols());
    else
      recon = rq[q].reconstruct(inputs[q]);
    sq += (recon.cast<double>() - inputs[q].cast<double>()).squaredNorm();
    count += static_cast<double>(inputs[q].size());
  }
  return sq / count;
}

SemanticId baseline_tokenize(const BaselineTokenizer& model, Paradigm paradigm, const MultimodalEmbedding& e) {
  if (paradigm != model.config.paradigm)
    throw std::invalid_argument("baseline_tokenize: model was fitted under " + to_string(model.config.paradigm) +
                                ", requested " + to_string(paradigm));
  return model.tokenize(e);
}

BaselineTokenizer fit_baseline(const EmbeddingDataset& ds, const BaselineConfig& cfg, const RqVaeOptions* vae_opts) {
  if (ds.empty()) throw std::invalid_argument("fit_baseline: empty dataset");
  BaselineTokenizer tok;
  tok.config = cfg;
  tok.text_dim = ds.text_dim();
  tok.vision_dim = ds.vision_dim();
  const auto lengths = split_lengths(cfg);
  const auto inputs = paradigm_inputs(cfg, ds.text(), ds.vision());
  const RqVaeOptions vae = vae_opts ? *vae_opts : RqVaeOptions{};
  for (std::size_t q = 0; q < inputs.size(); ++q) {
    const std::uint64_t seed = cfg.seed + 7919 * q;
    switch (cfg.method) {
      case BaselineMethod::rq_kmeans:
        tok.rq.push_back(rq_fit(inputs[q], lengths[q], cfg.k, RqMode::kmeans, seed, cfg.kmeans_iters));
        break;
      case BaselineMethod::rq_vae:
        tok.rq.push_back(rq_fit(inputs[q], lengths[q], cfg.k, RqMode::vae, seed, vae, cfg.kmeans_iters));
        break;
      case BaselineMethod::opq: {
        const auto d = padded_dim(static_cast<std::size_t>(inputs[q].cols()), lengths[q]);
        tok.opq.push_back(opq_fit(pad_columns(inputs[q], d), lengths[q], cfg.k, cfg.opq_rotate,
                                  cfg.opq_rotate ? cfg.opq_iters : 0, seed, cfg.kmeans_iters));
        break;
      }
    }
  }
  return tok;
}

// ---------------------------------------------------------------- serialization

Checkpoint BaselineTokenizer::to_checkpoint() const {
  Checkpoint ck;
  nlohmann::json meta = {{"type", "baseline"},
                         {"method", to_string(config.method)},
                         {"paradigm", to_string(config.paradigm)},
                         {"id_length", config.id_length},
                         {"k", config.k},
                         {"kmeans_iters", config.kmeans_iters},
                         {"opq_iters", config.opq_iters},
                         {"opq_rotate", config.opq_rotate},
                         {"seed", config.seed},
                         {"text_dim", text_dim},
                         {"vision_dim", vision_dim}};
  const std::size_t parts = config.method == BaselineMethod::opq ? opq.size() : rq.size();
  for (std::size_t q = 0; q < parts; ++q) {
    const std::string p = "q" + std::to_string(q) + ".";
    if (config.method == BaselineMethod::opq) {
      ck.tensors.push_back({p + "rotation", opq[q].rotation});
      for (std::size_t b = 0; b < opq[q].books.size(); ++b)
        ck.tensors.push_back({p + "block" + std::to_string(b), opq[q].books[b].codewords});
    } else if (rq[q].mode == RqMode::kmeans) {
      for (std::size_t l = 0; l < rq[q].levels.size(); ++l)
        ck.tensors.push_back({p + "level" + std::to_string(l), rq[q].levels[l].codewords});
    } else {
      const auto& net = rq[q].vae->net;
      const auto& o = rq[q].vae->opts;
      meta["vae"] = {{"latent_dim", o.latent_dim}, {"hidden", o.hidden}, {"activation", to_string(o.activation)},
                     {"epochs", o.epochs},         {"batch_size", o.batch_size}, {"lr", o.lr},
                     {"commitment", o.commitment}, {"kmeans_iters", o.kmeans_iters}};
      for (const auto& prm : net.encoder.params()) ck.tensors.push_back({p + prm.name, prm.value});
      for (const auto& prm : net.decoder.params()) ck.tensors.push_back({p + prm.name, prm.value});
      for (std::size_t l = 0; l < net.codebooks.size(); ++l)
        ck.tensors.push_back({p + "level" + std::to_string(l), net.codebooks[l].value});
    }
  }
  ck.metadata_json = meta.dump();
  return ck;
}

BaselineTokenizer baseline_from_checkpoint(const Checkpoint& ck) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ck.metadata_json);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("baseline checkpoint: bad metadata: ") + e.what(), 0);
  }
  if (meta.value("type", "") != "baseline") throw FormatError("checkpoint is not a baseline tokenizer", 0);
  BaselineTokenizer tok;
  auto& cfg = tok.config;
  cfg.method = parse_baseline_method(meta.at("method"));
  cfg.paradigm = parse_paradigm(meta.at("paradigm"));
  cfg.id_length = meta.at("id_length");
  cfg.k = meta.at("k");
  cfg.kmeans_iters = meta.at("kmeans_iters");
  cfg.opq_iters = meta.at("opq_iters");
  cfg.opq_rotate = meta.at("opq_rotate");
  cfg.seed = meta.at("seed");
  tok.text_dim = meta.at("text_dim");
  tok.vision_dim = meta.at("vision_dim");
  const auto lengths = split_lengths(cfg);
  for (std::size_t q = 0; q < lengths.size(); ++q) {
    const std::string p = "q" + std::to_string(q) + ".";
    if (cfg.method == BaselineMethod::opq) {
      OpqModel m;
      m.m = lengths[q];
      m.rotation = ck.at(p + "rotation");
      for (std::size_t b = 0; b < m.m; ++b) m.books.emplace_back(ck.at(p + "block" + std::to_string(b)));
      tok.opq.push_back(std::move(m));
      continue;
    }
    RqModel m;
    m.mode = cfg.method == BaselineMethod::rq_vae ? RqMode::vae : RqMode::kmeans;
    for (std::size_t l = 0; l < lengths[q]; ++l) m.levels.emplace_back(ck.at(p + "level" + std::to_string(l)));
    if (m.mode == RqMode::vae) {
      const auto& v = meta.at("vae");
      auto vae = std::make_shared<RqVae>();
      vae->opts.latent_dim = v.at("latent_dim");
      vae->opts.hidden = v.at("hidden");
      vae->opts.activation = parse_activation(v.at("activation"));
      vae->opts.epochs = v.at("epochs");
      vae->opts.batch_size = v.at("batch_size");
      vae->opts.lr = v.at("lr");
      vae->opts.commitment = v.at("commitment");
      vae->opts.kmeans_iters = v.at("kmeans_iters");
      const std::size_t in = q == 0 && cfg.paradigm == Paradigm::MS ? tok.text_dim
                             : cfg.paradigm == Paradigm::MS       ? tok.vision_dim
                                                                  : tok.text_dim + tok.vision_dim;
      const auto& o = vae->opts;
      vae->net.encoder = Mlp<float>::zeros({{in, o.hidden, o.latent_dim}, o.activation}, "rqvae.encoder");
      vae->net.decoder = Mlp<float>::zeros({{o.latent_dim, o.hidden, in}, o.activation}, "rqvae.decoder");
      for (auto* mlp : {&vae->net.encoder, &vae->net.decoder})
        for (auto& prm : mlp->params()) {
          const MatrixF& src = ck.at(p + prm.name);
          if (src.rows() != prm.value.rows() || src.cols() != prm.value.cols())
            throw FormatError("baseline checkpoint: shape mismatch for " + p + prm.name, 0);
          prm.value = src;
        }
      for (std::size_t l = 0; l < lengths[q]; ++l)
        vae->net.codebooks.emplace_back("rqvae.codebook" + std::to_string(l), ck.at(p + "level" + std::to_string(l)));
      m.vae = std::move(vae);
    }
    tok.rq.push_back(std::move(m));
  }
  return tok;
}

}  // namespace mmq
