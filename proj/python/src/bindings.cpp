#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mmq/checkpoint.hpp"
#include "mmq/datasets.hpp"
#include "mmq/experiment.hpp"
#include "mmq/finetune.hpp"
#include "mmq/metrics.hpp"
#include "mmq/quantize.hpp"
#include "mmq/semantic_id.hpp"
#include "mmq/tokenizer.hpp"

namespace py = pybind11;
using namespace mmq;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using CodeArray = py::array_t<std::uint32_t>;

MatrixF to_matrix(const FloatArray& a, const char* name) {
  if (a.ndim() != 2) throw ShapeError(std::string(name) + ": expected a 2-D array");
  MatrixF m(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), m.data());
  return m;
}

CodeArray to_array(const std::vector<SemanticId>& ids) {
  const std::size_t len = ids.empty() ? 0 : ids.front().length();
  CodeArray out({ids.size(), len});
  auto view = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i].length() != len) throw ShapeError("semantic ids of mixed length");
    for (std::size_t j = 0; j < len; ++j) view(i, j) = ids[i].codes[j];
  }
  return out;
}

std::vector<SemanticId> from_array(const py::array_t<std::uint32_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw ShapeError("codes: expected a 2-D array");
  std::vector<SemanticId> ids(a.shape(0));
  auto view = a.unchecked<2>();
  for (py::ssize_t i = 0; i < a.shape(0); ++i)
    for (py::ssize_t j = 0; j < a.shape(1); ++j) ids[i].codes.push_back(view(i, j));
  return ids;
}

EmbeddingDataset make_dataset(std::vector<std::uint64_t> ids, const FloatArray& text, const FloatArray& vision) {
  EmbeddingDataset ds(std::move(ids), to_matrix(text, "text"), to_matrix(vision, "vision"));
  ds.validate();
  return ds;
}

py::tuple dataset_tuple(const EmbeddingDataset& ds) {
  return py::make_tuple(ds.ids(), MatrixF(ds.text()), MatrixF(ds.vision()));
}

py::dict epoch_dict(const EpochReport& r) {
  py::dict d;
  d["epoch"] = r.epoch;
  d["loss"] = r.loss;
  d["recon_loss"] = r.recon_loss;
  d["aux_loss"] = r.aux_loss;
  d["ortho_loss"] = r.ortho_loss;
  d["utilization"] = r.utilization;
  d["entropy"] = r.entropy;
  d["restarts"] = r.restarts;
  return d;
}

class PyTokenizer {
 public:
  explicit PyTokenizer(const std::string& config_json)
      : model_(TokenizerModel<float>::init(TokenizerConfig::from_json(config_json))) {}
  explicit PyTokenizer(TokenizerModel<float> m) : model_(std::move(m)) {}

  py::list train(const std::vector<std::uint64_t>& ids, const FloatArray& text, const FloatArray& vision,
                 std::size_t epochs, std::size_t batch_size, float lr) {
    const EmbeddingDataset ds = make_dataset(ids, text, vision);
    Stage1Options opts;
    opts.epochs = epochs;
    opts.batch_size = batch_size;
    opts.lr = lr;
    std::vector<EpochReport> reports;
    {
      py::gil_scoped_release release;
      reports = train_stage1(model_, ds, opts);
    }
    py::list out;
    for (const auto& r : reports) out.append(epoch_dict(r));
    return out;
  }

  CodeArray tokenize(const FloatArray& text, const FloatArray& vision) const {
    const MatrixF t = to_matrix(text, "text");
    const MatrixF v = to_matrix(vision, "vision");
    std::vector<std::uint64_t> ids(t.rows());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    const EmbeddingDataset ds(std::move(ids), t, v);
    return to_array(tokenize_all(model_, ds));
  }

  double recon_loss(const FloatArray& text, const FloatArray& vision) const {
    const MatrixF t = to_matrix(text, "text");
    std::vector<std::uint64_t> ids(t.rows());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    return dataset_recon_loss(model_, EmbeddingDataset(std::move(ids), t, to_matrix(vision, "vision")));
  }

  MatrixF codebook(std::size_t slot) const {
    if (slot >= model_.id_length()) throw py::index_error("codebook slot out of range");
    return model_.codebook(slot).value;
  }

  void save(const std::filesystem::path& path) const { write_checkpoint(model_.to_checkpoint(), path); }
  static PyTokenizer load(const std::filesystem::path& path) {
    return PyTokenizer(TokenizerModel<float>::from_checkpoint(read_checkpoint(path)));
  }

  std::string config_json() const { return model_.config.to_json(); }
  std::size_t id_length() const { return model_.config.id_length(); }
  std::size_t parameter_count() const { return model_.parameter_count(); }

 private:
  TokenizerModel<float> model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multimodal semantic-ID tokenizers";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("default_tokenizer_config", [] { return TokenizerConfig{}.to_json(); },
        "Default tokenizer configuration as a JSON string.");
  m.def("validate_tokenizer_config", [](const std::string& json) { return TokenizerConfig::from_json(json).to_json(); },
        py::arg("config_json"), "Parses and validates a tokenizer config; returns its canonical JSON.");

  py::class_<PyTokenizer>(m, "Tokenizer")
      .def(py::init<const std::string&>(), py::arg("config_json"))
      .def("train", &PyTokenizer::train, py::arg("ids"), py::arg("text"), py::arg("vision"), py::arg("epochs") = 20,
           py::arg("batch_size") = 256, py::arg("lr") = 1e-3f,
           "Stage-1 training; returns one dict per epoch.")
      .def("tokenize", &PyTokenizer::tokenize, py::arg("text"), py::arg("vision"),
           "Semantic ids as an (N, id_length) uint32 array.")
      .def("recon_loss", &PyTokenizer::recon_loss, py::arg("text"), py::arg("vision"))
      .def("codebook", &PyTokenizer::codebook, py::arg("slot"))
      .def("save", &PyTokenizer::save, py::arg("path"))
      .def_static("load", &PyTokenizer::load, py::arg("path"))
      .def_property_readonly("config_json", &PyTokenizer::config_json)
      .def_property_readonly("id_length", &PyTokenizer::id_length)
      .def_property_readonly("parameter_count", &PyTokenizer::parameter_count);

  m.def(
      "gen_synthetic",
      [](std::size_t n_items, std::size_t n_users, std::size_t n_clusters, std::size_t text_dim, std::size_t vision_dim,
         std::size_t latent_dim, double p_gap, std::size_t seq_len, std::uint64_t seed) {
        SyntheticConfig cfg;
        cfg.n_items = n_items;
        cfg.n_users = n_users;
        cfg.n_clusters = n_clusters;
        cfg.text_dim = text_dim;
        cfg.vision_dim = vision_dim;
        cfg.latent_dim = latent_dim;
        cfg.p_gap = p_gap;
        cfg.seq_len = seq_len;
        cfg.seed = seed;
        cfg.validate();
        const SyntheticItems items = gen_synthetic_items(cfg);
        const SyntheticInteractions inter = gen_synthetic_interactions(items, cfg);
        py::array_t<std::uint64_t> events({inter.log.events.size(), std::size_t{4}});
        auto view = events.mutable_unchecked<2>();
        for (std::size_t i = 0; i < inter.log.events.size(); ++i) {
          const Interaction& e = inter.log.events[i];
          view(i, 0) = e.user_id;
          view(i, 1) = e.item_id;
          view(i, 2) = e.timestamp;
          view(i, 3) = e.label;
        }
        py::dict d;
        d["ids"] = items.items.ids();
        d["text"] = MatrixF(items.items.text());
        d["vision"] = MatrixF(items.items.vision());
        d["content_cluster"] = items.content_cluster;
        d["behavior_cluster"] = inter.behavior_cluster;
        d["events"] = events;
        return d;
      },
      py::arg("n_items") = 5000, py::arg("n_users") = 2000, py::arg("n_clusters") = 20, py::arg("text_dim") = 256,
      py::arg("vision_dim") = 256, py::arg("latent_dim") = 32, py::arg("p_gap") = 0.0, py::arg("seq_len") = 30,
      py::arg("seed") = 1,
      "Synthetic catalog and interaction log; events columns are user, item, timestamp, label.");

  m.def(
      "write_embeddings",
      [](const std::filesystem::path& path, std::vector<std::uint64_t> ids, const FloatArray& text,
         const FloatArray& vision) { write_embeddings(make_dataset(std::move(ids), text, vision), path); },
      py::arg("path"), py::arg("ids"), py::arg("text"), py::arg("vision"));
  m.def(
      "read_embeddings", [](const std::filesystem::path& path) { return dataset_tuple(read_embeddings(path)); },
      py::arg("path"), "Returns (ids, text, vision).");

  m.def(
      "kmeans",
      [](const FloatArray& points, std::size_t k, std::size_t iters, std::uint64_t seed) {
        const KMeansResult r = kmeans(to_matrix(points, "points"), k, iters, seed);
        py::dict d;
        d["centroids"] = r.codebook.codewords;
        d["assignments"] = r.assignments;
        d["distortion"] = r.distortion;
        d["distortion_history"] = r.distortion_history;
        return d;
      },
      py::arg("points"), py::arg("k"), py::arg("iters") = 25, py::arg("seed") = 1);

  m.def(
      "baseline_ids",
      [](const std::string& method, const std::string& paradigm, std::vector<std::uint64_t> ids,
         const FloatArray& text, const FloatArray& vision, std::size_t id_length, std::size_t k, std::uint64_t seed) {
        const EmbeddingDataset ds = make_dataset(std::move(ids), text, vision);
        BaselineConfig cfg;
        cfg.method = parse_baseline_method(method);
        cfg.paradigm = parse_paradigm(paradigm);
        cfg.id_length = id_length;
        cfg.k = k;
        cfg.seed = seed;
        const BaselineTokenizer model = fit_baseline(ds, cfg);
        std::vector<SemanticId> out;
        for (std::size_t i = 0; i < ds.size(); ++i) out.push_back(baseline_tokenize(model, cfg.paradigm, ds.item(i)));
        return to_array(out);
      },
      py::arg("method"), py::arg("paradigm"), py::arg("ids"), py::arg("text"), py::arg("vision"),
      py::arg("id_length") = 6, py::arg("k") = 100, py::arg("seed") = 1,
      "Fits a baseline quantizer (rq_kmeans, rq_vae, opq) and returns the ids of every item.");

  m.def(
      "soft_indices",
      [](const Eigen::Matrix<double, 1, Eigen::Dynamic>& z, const MatrixD& codebook, double tau) {
        return soft_indices(RowVector<double>(z), codebook, tau).soft;
      },
      py::arg("z"), py::arg("codebook"), py::arg("tau"));

  m.def(
      "codebook_utilization", [](const CodeArray& codes, std::size_t k) {
        return codebook_utilization(code_counts(from_array(codes), k));
      },
      py::arg("codes"), py::arg("codebook_size"));
  m.def(
      "token_entropy", [](const CodeArray& codes, std::size_t k) {
        return token_entropy(code_counts(from_array(codes), k));
      },
      py::arg("codes"), py::arg("codebook_size"), "Mean per-slot entropy in nats.");
  m.def("recall_at_n", &recall_at_n, py::arg("ranks"), py::arg("n"), "Ranks are 1-based.");
  m.def("ndcg_at_n", &ndcg_at_n, py::arg("ranks"), py::arg("n"));
  m.def("auc", &auc, py::arg("scores"), py::arg("labels"));
  m.def(
      "gauc",
      [](const std::vector<std::pair<std::vector<double>, std::vector<int>>>& users) {
        std::vector<UserScores> us;
        for (const auto& [s, l] : users) us.push_back({s, l});
        return gauc(us);
      },
      py::arg("users"), "Takes a list of (scores, labels) pairs, one per user.");

  m.def(
      "run_experiment",
      [](const std::string& config_json, const std::optional<std::filesystem::path>& output_dir) {
        ExperimentConfig cfg = ExperimentConfig::from_json(config_json);
        if (output_dir) cfg.output_dir = output_dir->string();
        std::vector<RunResult> runs;
        {
          py::gil_scoped_release release;
          runs = run_experiment(cfg);
          write_experiment(cfg.output_dir, runs, cfg);
        }
        std::vector<std::string> reports;
        for (const auto& r : runs) reports.push_back(r.report.to_json());
        return reports;
      },
      py::arg("config_json"), py::arg("output_dir") = std::nullopt,
      "Runs an experiment config and writes its artifacts; returns each run's metrics JSON.");
  m.def(
      "config_hash", [](const std::string& config_json) { return ExperimentConfig::from_json(config_json).hash(); },
      py::arg("config_json"));
}
