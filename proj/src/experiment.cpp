#include "mmq/experiment.hpp"

#include <json.hpp>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <sstream>

namespace mmq {

using nlohmann::json;

std::string to_string(Command c) {
  switch (c) {
    case Command::mmq: return "mmq";
    case Command::baselines: return "baselines";
    case Command::ablations: return "ablations";
    case Command::sweep: return "sweep";
  }
  return "?";
}

// ---------------------------------------------------------------- config parsing

namespace {

using Handler = std::function<void(const json&)>;

/// Dispatches each key of `j` to its handler; anything else is a typo.
void read_section(const json& j, const std::string& section, const std::map<std::string, Handler>& handlers) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [key, v] : j.items()) {
    auto it = handlers.find(key);
    if (it == handlers.end()) throw ConfigError(section + ": unknown key '" + key + "'");
    try {
      it->second(v);
    } catch (const json::exception& e) {
      throw ConfigError(section + "." + key + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(section + "." + key + ": " + e.what());
    }
  }
}

template <typename T>
Handler set(T& field) {
  return [&field](const json& v) { field = v.get<T>(); };
}

Handler set_float(float& field) {
  return [&field](const json& v) { field = static_cast<float>(v.get<double>()); };
}

json synthetic_json(const SyntheticConfig& s) {
  return {{"n_items", s.n_items},
          {"n_users", s.n_users},
          {"n_clusters", s.n_clusters},
          {"text_dim", s.text_dim},
          {"vision_dim", s.vision_dim},
          {"latent_dim", s.latent_dim},
          {"content_noise", s.content_noise},
          {"modality_unique_frac", s.modality_unique_frac},
          {"p_gap", s.p_gap},
          {"seq_len", s.seq_len},
          {"zipf_exponent", s.zipf_exponent},
          {"dirichlet_alpha", s.dirichlet_alpha},
          {"negatives_per_positive", s.negatives_per_positive}};
}

void parse_synthetic(const json& j, SyntheticConfig& s) {
  read_section(j, "data.synthetic",
               {{"n_items", set(s.n_items)},
                {"n_users", set(s.n_users)},
                {"n_clusters", set(s.n_clusters)},
                {"text_dim", set(s.text_dim)},
                {"vision_dim", set(s.vision_dim)},
                {"latent_dim", set(s.latent_dim)},
                {"content_noise", set(s.content_noise)},
                {"modality_unique_frac", set(s.modality_unique_frac)},
                {"p_gap", set(s.p_gap)},
                {"seq_len", set(s.seq_len)},
                {"zipf_exponent", set(s.zipf_exponent)},
                {"dirichlet_alpha", set(s.dirichlet_alpha)},
                {"negatives_per_positive", set(s.negatives_per_positive)}});
}

json finetune_json(const FinetuneConfig& f) {
  return {{"alpha_prime", f.alpha_prime}, {"beta_prime", f.beta_prime},   {"tau", f.tau},
          {"lr", f.lr},                   {"tokenizer_lr", f.tokenizer_lr}, {"epochs", f.epochs},
          {"warmup_epochs", f.warmup_epochs}, {"batch_size", f.batch_size}, {"history", f.history},
          {"samples_per_user", f.samples_per_user},
          {"logq_correction", f.logq_correction},
          {"embed_dim", f.embed_dim},     {"freeze_encoders", f.freeze_encoders},
          {"freeze_codebooks", f.freeze_codebooks}, {"cutoffs", f.cutoffs}};
}

void parse_finetune(const json& j, FinetuneConfig& f) {
  read_section(j, "finetune",
               {{"alpha_prime", set(f.alpha_prime)},
                {"beta_prime", set(f.beta_prime)},
                {"tau", set(f.tau)},
                {"lr", set_float(f.lr)},
                {"tokenizer_lr", set_float(f.tokenizer_lr)},
                {"epochs", set(f.epochs)},
                {"warmup_epochs", set(f.warmup_epochs)},
                {"batch_size", set(f.batch_size)},
                {"history", set(f.history)},
                {"samples_per_user", set(f.samples_per_user)},
                {"logq_correction", set(f.logq_correction)},
                {"embed_dim", set(f.embed_dim)},
                {"freeze_encoders", set(f.freeze_encoders)},
                {"freeze_codebooks", set(f.freeze_codebooks)},
                {"cutoffs", set(f.cutoffs)}});
}

json vae_json(const RqVaeOptions& o) {
  return {{"latent_dim", o.latent_dim}, {"hidden", o.hidden},         {"activation", to_string(o.activation)},
          {"epochs", o.epochs},         {"batch_size", o.batch_size}, {"lr", o.lr},
          {"commitment", o.commitment}, {"kmeans_iters", o.kmeans_iters}};
}

void parse_vae(const json& j, RqVaeOptions& o) {
  read_section(j, "baselines.vae",
               {{"latent_dim", set(o.latent_dim)},
                {"hidden", set(o.hidden)},
                {"activation", [&o](const json& v) { o.activation = parse_activation(v.get<std::string>()); }},
                {"epochs", set(o.epochs)},
                {"batch_size", set(o.batch_size)},
                {"lr", set_float(o.lr)},
                {"commitment", set(o.commitment)},
                {"kmeans_iters", set(o.kmeans_iters)}});
}

json expert_count_json(const ExpertCount& e) {
  return {{"shared", e.shared}, {"specific", e.specific}, {"expert_hidden", e.expert_hidden},
          {"specific_hidden", e.specific_hidden}};
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  if (!j.contains("seed")) throw ConfigError("seed: missing (a seed is mandatory)");

  ExperimentConfig c;
  std::vector<std::string> commands;
  std::map<std::string, Handler> top{
      {"seed", set(c.seed)},
      {"output_dir", set(c.output_dir)},
      {"data",
       [&c](const json& v) {
         read_section(v, "data",
                      {{"synthetic", [&c](const json& s) { parse_synthetic(s, c.data.synthetic); }},
                       {"items", set(c.data.items_path)},
                       {"interactions", set(c.data.interactions_path)}});
       }},
      {"tokenizer",
       [&c](const json& v) {
         if (v.is_object() && v.contains("seed")) throw ConfigError("tokenizer.seed: set the top-level seed instead");
         c.tokenizer = TokenizerConfig::from_json(v.dump());
       }},
      {"stage1",
       [&c](const json& v) {
         read_section(v, "stage1",
                      {{"epochs", set(c.stage1.epochs)},
                       {"batch_size", set(c.stage1.batch_size)},
                       {"lr", set_float(c.stage1.lr)}});
       }},
      {"finetune", [&c](const json& v) { parse_finetune(v, c.finetune); }},
      {"eval",
       [&c](const json& v) {
         read_section(v, "eval", {{"cutoffs", set(c.eval.cutoffs)}, {"strata", set(c.eval.strata)}});
       }},
      {"mmq",
       [&c, &commands](const json& v) {
         commands.push_back("mmq");
         c.command = Command::mmq;
         bool use_l2 = false;
         read_section(v, "mmq",
                      {{"use_cosine", set(c.flags.use_cosine)},
                       {"use_l2", set(use_l2)},
                       {"aux_on", set(c.flags.aux_on)},
                       {"ortho_on", set(c.flags.ortho_on)},
                       {"baf_on", set(c.flags.baf_on)}});
         if (use_l2) c.flags.use_cosine = false;
       }},
      {"baselines",
       [&c, &commands](const json& v) {
         commands.push_back("baselines");
         c.command = Command::baselines;
         auto& b = c.baselines;
         read_section(v, "baselines",
                      {{"runs",
                        [&b](const json& runs) {
                          if (!runs.is_array()) throw ConfigError("baselines.runs: expected an array");
                          for (const auto& r : runs) {
                            BaselineSpec s;
                            read_section(r, "baselines.runs[]",
                                         {{"method", [&s](const json& m) { s.method = parse_baseline_method(m.get<std::string>()); }},
                                          {"paradigm", [&s](const json& p) { s.paradigm = parse_paradigm(p.get<std::string>()); }}});
                            b.runs.push_back(s);
                          }
                        }},
                       {"finetune_rqvae", set(b.finetune_rqvae)},
                       {"kmeans_iters", set(b.kmeans_iters)},
                       {"opq_iters", set(b.opq_iters)},
                       {"vae", [&b](const json& o) { parse_vae(o, b.vae); }}});
       }},
      {"ablations",
       [&c, &commands](const json& v) {
         commands.push_back("ablations");
         c.command = Command::ablations;
         c.ablation_rows = ablation_row_names();
         read_section(v, "ablations", {{"rows", set(c.ablation_rows)}});
       }},
      {"sweep",
       [&c, &commands](const json& v) {
         commands.push_back("sweep");
         c.command = Command::sweep;
         read_section(v, "sweep",
                      {{"lengths", set(c.sweep.lengths)},
                       {"experts", [&c](const json& arr) {
                          if (!arr.is_array()) throw ConfigError("sweep.experts: expected an array");
                          for (const auto& e : arr) {
                            ExpertCount ec;
                            read_section(e, "sweep.experts[]",
                                         {{"shared", set(ec.shared)},
                                          {"specific", set(ec.specific)},
                                          {"expert_hidden", set(ec.expert_hidden)},
                                          {"specific_hidden", set(ec.specific_hidden)}});
                            c.sweep.experts.push_back(ec);
                          }
                        }}});
       }},
  };
  read_section(j, "config", top);
  if (commands.size() != 1)
    throw ConfigError("command: exactly one of mmq/baselines/ablations/sweep is required, found " +
                      std::to_string(commands.size()));
  c.apply_seed(c.seed);
  c.validate();
  return c;
}

void ExperimentConfig::apply_seed(std::uint64_t s) {
  seed = s;
  data.synthetic.seed = s;
  tokenizer.seed = s;
  finetune.seed = s;
}

void ExperimentConfig::validate() const {
  if (data.from_files() && data.interactions_path.empty())
    throw ConfigError("data.interactions: required together with data.items");
  if (!data.from_files() && !data.interactions_path.empty())
    throw ConfigError("data.items: required together with data.interactions");
  try {
    data.synthetic.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("data.") + e.what());
  }
  tokenizer.validate();
  if (stage1.batch_size == 0) throw ConfigError("stage1.batch_size: must be >= 1");
  if (!(stage1.lr > 0)) throw ConfigError("stage1.lr: must be > 0");
  finetune.validate();
  if (eval.cutoffs.empty()) throw ConfigError("eval.cutoffs: need at least one N");
  for (auto n : eval.cutoffs)
    if (n == 0) throw ConfigError("eval.cutoffs: N must be >= 1");
  switch (command) {
    case Command::mmq: break;
    case Command::baselines:
      if (baselines.runs.empty()) throw ConfigError("baselines.runs: need at least one method");
      for (const auto& r : baselines.runs)
        if (r.paradigm == Paradigm::MS && tokenizer.id_length() % 2 != 0)
          throw ConfigError("baselines.runs: MS needs an even semantic-ID length");
      break;
    case Command::ablations:
      if (ablation_rows.empty()) throw ConfigError("ablations.rows: need at least one row");
      for (const auto& r : ablation_rows) {
        try {
          ablation_flags(r);
        } catch (const std::invalid_argument& e) {
          throw ConfigError(std::string("ablations.rows: ") + e.what());
        }
      }
      break;
    case Command::sweep:
      if (sweep.lengths.empty() == sweep.experts.empty())
        throw ConfigError("sweep: give exactly one of lengths/experts");
      for (auto l : sweep.lengths)
        if (l == 0 || l % 3 != 0) throw ConfigError("sweep.lengths: " + std::to_string(l) + " is not a positive multiple of 3");
      for (const auto& e : sweep.experts)
        if (e.specific % 2 != 0 || e.shared + e.specific == 0)
          throw ConfigError("sweep.experts: specific count must be even and the total positive");
      break;
  }
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["output_dir"] = output_dir;
  json d = json::object();
  if (data.from_files()) {
    d["items"] = data.items_path;
    d["interactions"] = data.interactions_path;
  } else {
    d["synthetic"] = synthetic_json(data.synthetic);
  }
  j["data"] = d;
  json tok = json::parse(tokenizer.to_json());
  tok.erase("seed");
  j["tokenizer"] = tok;
  j["stage1"] = {{"epochs", stage1.epochs}, {"batch_size", stage1.batch_size}, {"lr", stage1.lr}};
  j["finetune"] = finetune_json(finetune);
  j["eval"] = {{"cutoffs", eval.cutoffs}, {"strata", eval.strata}};
  switch (command) {
    case Command::mmq:
      j["mmq"] = {{"use_cosine", flags.use_cosine}, {"aux_on", flags.aux_on}, {"ortho_on", flags.ortho_on},
                  {"baf_on", flags.baf_on}};
      break;
    case Command::baselines: {
      json runs = json::array();
      for (const auto& r : baselines.runs) runs.push_back({{"method", to_string(r.method)}, {"paradigm", to_string(r.paradigm)}});
      j["baselines"] = {{"runs", runs},
                        {"finetune_rqvae", baselines.finetune_rqvae},
                        {"kmeans_iters", baselines.kmeans_iters},
                        {"opq_iters", baselines.opq_iters},
                        {"vae", vae_json(baselines.vae)}};
      break;
    }
    case Command::ablations: j["ablations"] = {{"rows", ablation_rows}}; break;
    case Command::sweep: {
      json s = json::object();
      if (!sweep.lengths.empty()) s["lengths"] = sweep.lengths;
      if (!sweep.experts.empty()) {
        json arr = json::array();
        for (const auto& e : sweep.experts) arr.push_back(expert_count_json(e));
        s["experts"] = arr;
      }
      j["sweep"] = s;
      break;
    }
  }
  return j.dump(2) + "\n";
}

std::string ExperimentConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------- pipelines

Workload load_workload(const DataSection& data) {
  Workload w;
  if (data.from_files()) {
    w.catalog = read_embeddings(data.items_path).normalized();
    w.log = read_interactions(data.interactions_path);
    w.log.validate(w.catalog);
  } else {
    auto items = gen_synthetic_items(data.synthetic);
    w.log = gen_synthetic_interactions(items, data.synthetic).log;
    w.catalog = items.items.normalized();
  }
  w.strata = popularity_strata(w.log, {0.25, 0.75}, w.catalog.ids());
  return w;
}

namespace {

void emit(const LogSink& log, const json& j) {
  if (log) log(j.dump());
}

FinetuneLogger finetune_logger(const LogSink& log, const std::string& label) {
  if (!log) return {};
  return [log, label](std::size_t epoch, const JointLoss& l) {
    emit(log, {{"stage", "finetune"}, {"run", label}, {"epoch", epoch}, {"loss", l.total},
               {"downstream", l.downstream}, {"recon_loss", l.recon}, {"aux_loss", l.aux}});
  };
}

QuantMetrics quant_metrics(const std::vector<SemanticId>& ids, std::size_t k, double recon) {
  const auto counts = code_counts(ids, k);
  QuantMetrics q;
  q.recon_loss = recon;
  q.utilization = codebook_utilization(counts);
  q.entropy = token_entropy(counts);
  q.pooled_entropy = pooled_token_entropy(counts);
  return q;
}

void fill_ranking(MetricsReport& rep, const FinetuneResult& res, const Workload& w, const EvalSection& eval) {
  rep.ranking = res.post;
  if (eval.strata) rep.stratified = stratified_report(res.post_eval.ranks, res.post_eval.target_items, w.strata, eval.cutoffs);
  for (const auto& [n, v] : res.pre.recall_at) rep.extra["pre_recall@" + std::to_string(n)] = v;
  for (const auto& [n, v] : res.pre.ndcg_at) rep.extra["pre_ndcg@" + std::to_string(n)] = v;
  rep.extra["pre_recon_loss"] = res.pre_recon;
  if (!res.epoch_losses.empty()) rep.extra["final_train_loss"] = res.epoch_losses.back().total;
}

FinetuneConfig with_cutoffs(FinetuneConfig ft, const EvalSection& eval) {
  ft.cutoffs = eval.cutoffs;
  return ft;
}

constexpr std::uint64_t kHeadSeedSalt = 0x9e3779b97f4a7c15ULL;

}  // namespace

RunResult run_mmq(const Workload& w, TokenizerConfig tok_cfg, const Stage1Options& s1, const FinetuneConfig& ft,
                  const EvalSection& eval, const AblationFlags& flags, const std::string& label, const LogSink& log) {
  tok_cfg.text_dim = w.catalog.text_dim();
  tok_cfg.vision_dim = w.catalog.vision_dim();
  tok_cfg.use_cosine = flags.use_cosine;
  if (!flags.aux_on) tok_cfg.beta = 0.0;
  if (!flags.ortho_on) tok_cfg.gamma = 0.0;

  auto model = TokenizerModel<float>::init(tok_cfg);
  Stage1Options opts = s1;
  if (log)
    opts.on_epoch = [&](const EpochReport& r) {
      json j = json::parse(r.to_json());
      j["stage"] = "stage1";
      j["run"] = label;
      emit(log, j);
    };
  train_stage1(model, w.catalog, opts);

  FinetuneConfig cfg = with_cutoffs(ft, eval);
  if (!flags.baf_on) cfg.freeze_encoders = cfg.freeze_codebooks = true;
  auto head = RetrievalHead<float>::init(tok_cfg.id_length(), tok_cfg.codebook_size, cfg.embed_dim, cfg.history,
                                         cfg.seed ^ kHeadSeedSalt);
  const auto res = finetune(model, head, w.log, w.catalog, cfg, nullptr, finetune_logger(log, label));

  RunResult out;
  out.label = label;
  out.ids.item_ids = w.catalog.ids();
  out.ids.ids = tokenize_all(model, w.catalog);
  out.report.label = label;
  out.report.quant = quant_metrics(out.ids.ids, tok_cfg.codebook_size, res.post_recon);
  fill_ranking(out.report, res, w, eval);
  out.parameter_count = model.parameter_count();
  out.report.extra["parameter_count"] = static_cast<double>(out.parameter_count);
  out.checkpoint = model.to_checkpoint(flags.baf_on ? "stage2" : "stage1");
  return out;
}

RunResult run_baseline(const Workload& w, const BaselineConfig& cfg, const RqVaeOptions& vae, bool finetune_vae,
                       const FinetuneConfig& ft, const EvalSection& eval, const std::string& label, const LogSink& log) {
  auto tok = fit_baseline(w.catalog, cfg, &vae);
  const FinetuneConfig fcfg = with_cutoffs(ft, eval);
  auto head = RetrievalHead<float>::init(tok.id_length(), tok.codebook_size(), fcfg.embed_dim, fcfg.history,
                                         fcfg.seed ^ kHeadSeedSalt);
  FinetuneResult res;
  if (finetune_vae && cfg.method == BaselineMethod::rq_vae) {
    res = finetune_baseline_rqvae(tok, head, w.log, w.catalog, fcfg, nullptr, finetune_logger(log, label));
  } else {
    res = train_head_on_ids(tok.tokenize_all(w.catalog), head, w.log, w.catalog, fcfg, finetune_logger(log, label));
    res.pre_recon = res.post_recon = tok.recon_loss(w.catalog);
  }
  RunResult out;
  out.label = label;
  out.ids.item_ids = w.catalog.ids();
  out.ids.ids = tok.tokenize_all(w.catalog);
  out.report.label = label;
  out.report.quant = quant_metrics(out.ids.ids, tok.codebook_size(), tok.recon_loss(w.catalog));
  fill_ranking(out.report, res, w, eval);
  out.checkpoint = tok.to_checkpoint();
  return out;
}

const std::vector<std::string>& ablation_row_names() {
  static const std::vector<std::string> rows{"MMQ", "w/o Cosine Quantizer", "w/o Auxiliary Reconstruction Loss",
                                             "w/o Orthogonal Regularization", "w/o Behavior-Aware Fine-tuning"};
  return rows;
}

AblationFlags ablation_flags(const std::string& row) {
  AblationFlags f;
  const auto& rows = ablation_row_names();
  if (row == rows[0]) return f;
  if (row == rows[1]) f.use_cosine = false;
  else if (row == rows[2]) f.aux_on = false;
  else if (row == rows[3]) f.ortho_on = false;
  else if (row == rows[4]) f.baf_on = false;
  else throw std::invalid_argument("unknown ablation row '" + row + "'");
  return f;
}

TokenizerConfig config_for_length(TokenizerConfig base, std::size_t length) {
  if (length == 0 || length % 3 != 0) throw ConfigError("semantic-ID length " + std::to_string(length) + " is not a multiple of 3");
  base.n_shared = base.n_text = base.n_vision = length / 3;
  return base;
}

TokenizerConfig config_for_experts(TokenizerConfig base, const ExpertCount& e) {
  if (e.specific % 2 != 0) throw ConfigError("specific expert count must be even");
  base.n_shared = e.shared;
  base.n_text = base.n_vision = e.specific / 2;
  if (!e.expert_hidden.empty()) base.expert_hidden = e.expert_hidden;
  if (!e.specific_hidden.empty()) base.specific_hidden = e.specific_hidden;
  return base;
}

std::vector<RunResult> run_experiment(const ExperimentConfig& cfg, const LogSink& log) {
  cfg.validate();
  const Workload w = load_workload(cfg.data);
  std::vector<RunResult> runs;
  switch (cfg.command) {
    case Command::mmq:
      runs.push_back(run_mmq(w, cfg.tokenizer, cfg.stage1, cfg.finetune, cfg.eval, cfg.flags, "MMQ", log));
      break;
    case Command::baselines:
      for (const auto& r : cfg.baselines.runs) {
        BaselineConfig b;
        b.method = r.method;
        b.paradigm = r.paradigm;
        b.id_length = cfg.tokenizer.id_length();
        b.k = cfg.tokenizer.codebook_size;
        b.kmeans_iters = cfg.baselines.kmeans_iters;
        b.opq_iters = cfg.baselines.opq_iters;
        b.seed = cfg.seed;
        const bool ft = cfg.baselines.finetune_rqvae && r.method == BaselineMethod::rq_vae;
        const std::string label = to_string(r.paradigm) + "-" + to_string(r.method) + (ft ? " +BAF" : "");
        runs.push_back(run_baseline(w, b, cfg.baselines.vae, ft, cfg.finetune, cfg.eval, label, log));
      }
      break;
    case Command::ablations:
      for (const auto& row : cfg.ablation_rows)
        runs.push_back(run_mmq(w, cfg.tokenizer, cfg.stage1, cfg.finetune, cfg.eval, ablation_flags(row), row, log));
      break;
    case Command::sweep:
      for (auto l : cfg.sweep.lengths)
        runs.push_back(run_mmq(w, config_for_length(cfg.tokenizer, l), cfg.stage1, cfg.finetune, cfg.eval, cfg.flags,
                               "MMQ l=" + std::to_string(l), log));
      for (const auto& e : cfg.sweep.experts)
        runs.push_back(run_mmq(w, config_for_experts(cfg.tokenizer, e), cfg.stage1, cfg.finetune, cfg.eval, cfg.flags,
                               "MMQ shared=" + std::to_string(e.shared) + " specific=" + std::to_string(e.specific), log));
      break;
  }
  return runs;
}

// ---------------------------------------------------------------- artifacts

std::string label_slug(const std::string& label) {
  std::string out;
  for (char ch : label) {
    if (std::isalnum(static_cast<unsigned char>(ch)))
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    else if (ch == '=' || ch == '+')
      out += ch == '=' ? "" : "plus";
    else if (!out.empty() && out.back() != '_')
      out += '_';
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out.empty() ? "run" : out;
}

void write_run(const std::filesystem::path& dir, const RunResult& run, const std::string& config_hash) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  MetricsReport rep = run.report;
  rep.config_hash = config_hash;
  binio::write_file(dir / "metrics.json", rep.to_json());
  if (!run.ids.ids.empty()) write_semantic_ids(run.ids, dir / "semantic_ids.tsv");
  if (run.checkpoint) write_checkpoint(*run.checkpoint, dir / "tokenizer.ckpt");
}

void write_experiment(const std::filesystem::path& out, const std::vector<RunResult>& runs, const ExperimentConfig& cfg) {
  const std::string hash = cfg.hash();
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  binio::write_file(out / "config.json", cfg.to_json());
  if (runs.size() == 1) {
    write_run(out, runs.front(), hash);
    return;
  }
  json index = json::array();
  for (const auto& r : runs) {
    const std::string slug = label_slug(r.label);
    write_run(out / slug, r, hash);
    index.push_back({{"label", r.label}, {"dir", slug}});
  }
  binio::write_file(out / "index.json", json({{"config_hash", hash}, {"runs", index}}).dump(2) + "\n");
}

// ---------------------------------------------------------------- compare

bool lower_is_better(const std::string& metric) { return metric == "recon_loss" || metric == "pre_recon_loss"; }

CompareTable compare_reports(const std::vector<MetricsReport>& reports) {
  if (reports.size() < 2) throw ConfigError("compare: need at least two runs");
  CompareTable t;
  std::set<std::string> names;
  std::vector<std::map<std::string, double>> flats;
  for (const auto& r : reports) {
    t.labels.push_back(r.label);
    flats.push_back(r.flat());
    for (const auto& [k, v] : flats.back()) names.insert(k);
  }
  t.metrics.assign(names.begin(), names.end());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& f : flats) {
    std::vector<double> row;
    for (const auto& m : t.metrics) {
      auto it = f.find(m);
      row.push_back(it == f.end() ? nan : it->second);
    }
    t.values.push_back(std::move(row));
  }
  const std::size_t last = reports.size() - 1;
  for (std::size_t m = 0; m < t.metrics.size(); ++m) {
    const bool lower = lower_is_better(t.metrics[m]);
    double best = nan;
    for (std::size_t r = 0; r < last; ++r) {
      const double v = t.values[r][m];
      if (std::isnan(v)) continue;
      if (std::isnan(best) || (lower ? v < best : v > best)) best = v;
    }
    const double cand = t.values[last][m];
    if (std::isnan(best) || std::isnan(cand) || best == 0.0)
      t.improvement.push_back(cand == best ? 0.0 : nan);
    else
      t.improvement.push_back((lower ? best - cand : cand - best) / std::fabs(best) * 100.0);
  }
  return t;
}

CompareTable compare_runs(const std::vector<std::filesystem::path>& dirs) {
  std::vector<MetricsReport> reports;
  for (const auto& d : dirs) {
    const auto path = d / "metrics.json";
    if (!std::filesystem::exists(path)) throw IoError("compare: run '" + d.string() + "' has no metrics.json");
    MetricsReport r;
    try {
      r = MetricsReport::from_json(binio::read_file(path));
    } catch (const json::exception& e) {
      throw IoError("compare: run '" + d.string() + "': malformed metrics.json: " + e.what());
    }
    if (r.label.empty()) r.label = d.filename().string();
    reports.push_back(std::move(r));
  }
  return compare_reports(reports);
}

std::string CompareTable::to_text() const {
  std::size_t label_w = 8;
  for (const auto& l : labels) label_w = std::max(label_w, l.size());
  std::size_t col_w = 10;
  for (const auto& m : metrics) col_w = std::max(col_w, m.size() + 2);
  std::ostringstream os;
  auto cell = [&](const std::string& s, std::size_t w) {
    os << s;
    for (std::size_t i = s.size(); i < w; ++i) os << ' ';
  };
  cell("run", label_w + 2);
  for (const auto& m : metrics) cell(m, col_w);
  os << "\n";
  char buf[64];
  for (std::size_t r = 0; r < labels.size(); ++r) {
    cell(labels[r], label_w + 2);
    for (double v : values[r]) {
      if (std::isnan(v))
        cell("-", col_w);
      else {
        std::snprintf(buf, sizeof(buf), "%.4f", v);
        cell(buf, col_w);
      }
    }
    os << "\n";
  }
  cell("Improv.", label_w + 2);
  for (double v : improvement) {
    if (std::isnan(v))
      cell("-", col_w);
    else {
      std::snprintf(buf, sizeof(buf), "%+.2f%%", v);
      cell(buf, col_w);
    }
  }
  os << "\n";
  return os.str();
}

std::string CompareTable::to_json() const {
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json runs = json::array();
  for (std::size_t r = 0; r < labels.size(); ++r) {
    json m = json::object();
    for (std::size_t k = 0; k < metrics.size(); ++k) m[metrics[k]] = num(values[r][k]);
    runs.push_back({{"label", labels[r]}, {"metrics", m}});
  }
  json imp = json::object();
  for (std::size_t k = 0; k < metrics.size(); ++k) imp[metrics[k]] = num(improvement[k]);
  return json({{"runs", runs}, {"improvement_percent", imp}, {"candidate", labels.back()}}).dump(2) + "\n";
}

}  // namespace mmq
