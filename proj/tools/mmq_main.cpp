#include "mmq/checkpoint.hpp"
#include "mmq/experiment.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

enum Exit { kOk = 0, kConfig = 2, kNumeric = 3, kIo = 4 };

mmq::ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed, const std::string& out) {
  std::string text;
  try {
    text = mmq::binio::read_file(path);
  } catch (const std::exception& e) {
    throw mmq::IoError(std::string("cannot read config: ") + e.what());
  }
  auto cfg = mmq::ExperimentConfig::from_json(text);
  if (seed) cfg.apply_seed(*seed);
  if (!out.empty()) cfg.output_dir = out;
  return cfg;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const mmq::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const mmq::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kNumeric;
  } catch (const mmq::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const mmq::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kConfig;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal semantic-ID tokenizers: training, fine-tuning, baselines and evaluation"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  bool quiet = false;

  auto* run = app.add_subcommand("run", "Run the experiment described by a config file");
  run->add_option("config_file", config_path, "Experiment config (JSON)");
  run->add_option("--config", config_path, "Experiment config (JSON)");
  run->add_option("--seed", seed, "Override the config seed");
  run->add_option("--out", out_dir, "Override the output directory");
  run->add_flag("--quiet", quiet, "Suppress per-epoch logs on stderr");

  std::vector<std::string> run_dirs;
  std::string compare_json;
  auto* compare = app.add_subcommand("compare", "Tabulate metrics of finished runs (last run is the candidate)");
  compare->add_option("runs", run_dirs, "Run directories containing metrics.json")->required();
  compare->add_option("--json", compare_json, "Also write the table as JSON to this path");

  auto* validate = app.add_subcommand("validate-config", "Parse and validate a config without running it");
  validate->add_option("config_file", config_path, "Experiment config (JSON)");
  validate->add_option("--config", config_path, "Experiment config (JSON)");
  validate->add_option("--seed", seed, "Override the config seed");

  std::string ckpt_path;
  auto* inspect = app.add_subcommand("inspect-checkpoint", "Print the tensors and metadata of a checkpoint");
  inspect->add_option("checkpoint", ckpt_path, "Checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  if (*run) {
    return guarded([&] {
      if (config_path.empty()) throw mmq::ConfigError("run: a config file is required (--config PATH)");
      const auto cfg = load_config(config_path, seed, out_dir);
      mmq::LogSink log;
      if (!quiet) log = [](const std::string& line) { std::cerr << line << "\n"; };
      const auto runs = mmq::run_experiment(cfg, log);
      mmq::write_experiment(cfg.output_dir, runs, cfg);
      if (!quiet) std::cerr << nlohmann::json({{"event", "done"}, {"runs", runs.size()}, {"out", cfg.output_dir}}).dump() << "\n";
      return static_cast<int>(kOk);
    });
  }
  if (*compare) {
    return guarded([&] {
      std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
      const auto table = mmq::compare_runs(dirs);
      std::cout << table.to_text();
      if (!compare_json.empty()) mmq::binio::write_file(compare_json, table.to_json());
      return static_cast<int>(kOk);
    });
  }
  if (*validate) {
    return guarded([&] {
      if (config_path.empty()) throw mmq::ConfigError("validate-config: a config file is required");
      const auto cfg = load_config(config_path, seed, "");
      std::cout << "ok: command=" << mmq::to_string(cfg.command) << " hash=" << cfg.hash() << "\n";
      return static_cast<int>(kOk);
    });
  }
  if (*inspect) {
    return guarded([&] {
      const auto ck = mmq::read_checkpoint(ckpt_path);
      std::size_t scalars = 0;
      for (const auto& t : ck.tensors) {
        std::cout << t.name << "\t" << t.value.rows() << "x" << t.value.cols() << "\n";
        scalars += static_cast<std::size_t>(t.value.size());
      }
      std::cout << "tensors: " << ck.tensors.size() << "  scalars: " << scalars << "\n";
      if (!ck.metadata_json.empty()) std::cout << "metadata: " << ck.metadata_json << "\n";
      return static_cast<int>(kOk);
    });
  }
  return kOk;
}
