// hydra: synthetic data generation, training, evaluation and self-checks.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hydra/checkpoint.hpp"
#include "hydra/config_io.hpp"
#include "hydra/data.hpp"
#include "hydra/engine.hpp"
#include "hydra/error.hpp"
#include "hydra/model.hpp"
#include "hydra/selftest.hpp"

namespace fs = std::filesystem;
using namespace hydra;
using nlohmann::json;

namespace {

enum Exit : int {
  kOk = 0,
  kFailure = 1,  // selftest failure or an unexpected error
  kUsage = 2,
  kConfig = 3,
  kData = 4,
  kNumerical = 5,
  kIo = 6,
};

constexpr const char* kExitHelp =
    "Exit codes: 0 ok, 1 selftest failure, 2 usage, 3 config error, 4 data error,\n"
    "5 numerical error, 6 I/O error.\n"
    "Config precedence: built-in defaults < --config file < command-line flags.";

struct Flags {
  std::string config;
  std::string manifest;
  std::string out;
  std::string run;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> model_kind;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> dim;
  bool force = false;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

// Creates `dir` and refuses to reuse it when `marker` shows a finished run.
void prepare_out_dir(const fs::path& dir, const fs::path& marker, bool force) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
  if (fs::exists(dir / marker) && !force) {
    throw UsageError(dir.string() + " already holds a completed run (" + marker.string() +
                     "); pass --force to overwrite");
  }
}

bool num_check_requested() {
  const char* v = std::getenv("HYDRA_NUM_CHECK");
  return v && std::string_view(v) == "1";
}

engine::TrainConfig resolve_train_config(const Flags& f) {
  engine::TrainConfig cfg;
  if (!f.config.empty()) config::apply(config::read_file(f.config), cfg, f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.model_kind) cfg.model_kind = model::parse_model_kind(*f.model_kind);
  if (f.epochs) cfg.epochs = *f.epochs;
  if (num_check_requested()) cfg.check_containment = true;
  cfg.validate();
  return cfg;
}

data::SynthConfig resolve_synth_config(const Flags& f) {
  data::SynthConfig cfg;
  if (!f.config.empty()) config::apply(config::read_file(f.config), cfg, f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.dim) cfg.dim = *f.dim;
  cfg.validate();
  return cfg;
}

std::string grid_label(const data::GridTriple& g) {
  return std::to_string(static_cast<long>(data::kSynthSampleRates[g[0]])) + "/" +
         std::to_string(static_cast<long>(data::kSynthBitrates[g[1]])) + "/" +
         std::to_string(static_cast<long>(data::kSynthQuantizers[g[2]]));
}

int cmd_gen_synth(const Flags& f) {
  const data::SynthConfig cfg = resolve_synth_config(f);
  const fs::path out = f.out;
  prepare_out_dir(out, "manifest.jsonl", f.force);
  write_text(out / "synth_config.json", config::to_json(cfg));

  const data::SynthDataset synth = data::gen_synth(cfg);
  data::write_dataset(synth.dataset, out);

  json prov;
  prov["generator"] = "hydra gen-synth";
  prov["config"] = json::parse(config::to_json(cfg));
  prov["families"] = json::array();
  for (const data::SynthFamily& fam : synth.families) {
    prov["families"].push_back({{"sr_hz/bps/q", grid_label(fam.base)}, {"open", fam.open},
                                {"reachable", fam.reachable.size()}});
  }
  const data::Counts c = synth.dataset.counts();
  prov["counts"] = {{"train", c.train}, {"val", c.val},           {"test", c.test},
                    {"test_closed", c.test_closed}, {"test_open", c.test_open}};
  write_text(out / "provenance.json", prov.dump(2) + "\n");
  std::cout << "wrote " << c.total() << " records (d=" << cfg.dim << ") to " << out.string() << "\n";
  return kOk;
}

int cmd_train(const Flags& f) {
  const engine::TrainConfig cfg = resolve_train_config(f);
  const data::Dataset ds = data::load_manifest(f.manifest);
  const fs::path out = f.out;
  prepare_out_dir(out, "metrics.json", f.force);
  write_text(out / "config.json", config::to_json(cfg));
  json run{{"manifest", fs::absolute(f.manifest).lexically_normal().string()}, {"input_dim", ds.dim}};
  write_text(out / "run.json", run.dump(2) + "\n");

  const fs::path log_path = out / "train_log.jsonl";
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  if (!log) throw IoError("cannot write " + log_path.string());
  const engine::TrainResult result = engine::train(ds, cfg, [&](const engine::EpochLog& e) {
    log << engine::epoch_log_line(e) << "\n";
    log.flush();
    std::cerr << "epoch " << e.epoch << " train " << e.train.total << " val " << e.val.total
              << (e.best ? " *" : "") << "\n";
  });
  if (!log) throw IoError("write failed for " + log_path.string());

  checkpoint::save(out / "checkpoint.hydc", checkpoint::pack(result.model, result.scaler));
  const std::span<const engine::MetricsReport> reports(&result.report, 1);
  write_text(out / "metrics.txt", engine::metrics_table(reports));
  write_text(out / "metrics.json", engine::metrics_json(reports));
  std::cout << engine::metrics_table(reports);
  return kOk;
}

struct LoadedRun {
  engine::TrainConfig cfg;
  model::Model model;
  data::LabelScaler scaler;
};

LoadedRun load_run(const fs::path& dir) {
  if (dir.empty()) throw UsageError("--run is required");
  engine::TrainConfig cfg;
  config::apply(config::read_file(dir / "config.json"), cfg, (dir / "config.json").string());
  json run;
  try {
    run = json::parse(config::read_file(dir / "run.json"));
  } catch (const json::exception& e) {
    throw ConfigError((dir / "run.json").string() + ": " + e.what());
  }
  if (!run.contains("input_dim") || !run["input_dim"].is_number_unsigned())
    throw ConfigError((dir / "run.json").string() + ": missing input_dim");
  model::Model m(engine::model_config_for(cfg, run["input_dim"].get<std::size_t>()), 0);
  data::LabelScaler scaler = checkpoint::unpack(checkpoint::load(dir / "checkpoint.hydc"), m);
  return {cfg, std::move(m), scaler};
}

int cmd_eval(const Flags& f) {
  LoadedRun run = load_run(f.run);
  const data::Dataset ds = data::load_manifest(f.manifest);
  const fs::path out = f.out.empty() ? fs::path(f.run) : fs::path(f.out);
  prepare_out_dir(out, "eval_metrics.json", f.force);
  engine::MetricsReport report = engine::evaluate(run.model, run.scaler, ds);
  report.seed = run.cfg.seed;
  const std::span<const engine::MetricsReport> reports(&report, 1);
  write_text(out / "eval_metrics.txt", engine::metrics_table(reports));
  write_text(out / "eval_metrics.json", engine::metrics_json(reports));
  std::cout << engine::metrics_table(reports);
  return kOk;
}

int cmd_predict(const Flags& f) {
  LoadedRun run = load_run(f.run);
  const data::Dataset ds = data::load_manifest(f.manifest);
  const fs::path out = f.out.empty() ? fs::path(f.run) : fs::path(f.out);
  prepare_out_dir(out, "predictions.csv", f.force);
  std::vector<std::size_t> all(ds.records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto preds = engine::predict(run.model, run.scaler, ds, all);
  std::ostringstream os;
  os.precision(17);
  os << "id,split,set_type,sr_hz,bps,q\n";
  for (std::size_t i = 0; i < all.size(); ++i) {
    const data::EmbeddingRecord& r = ds.records[i];
    os << r.id << "," << data::to_string(r.split) << "," << data::to_string(r.set_type) << "," << preds[i][0] << ","
       << preds[i][1] << "," << preds[i][2] << "\n";
  }
  write_text(out / "predictions.csv", os.str());
  std::cout << "wrote " << all.size() << " predictions to " << (out / "predictions.csv").string() << "\n";
  return kOk;
}

int cmd_selftest(const Flags& f) {
  selftest::Options opt;
  if (f.seed) opt.seed = *f.seed;
  bool ok = true;
  for (const selftest::SuiteResult& s : selftest::run_all(opt)) {
    std::cout << selftest::format(s);
    ok = ok && s.passed();
  }
  std::cout << (ok ? "selftest passed" : "selftest FAILED") << "\n";
  return ok ? kOk : kFailure;
}

int cmd_param_count(const Flags& f) {
  engine::TrainConfig cfg;
  if (!f.config.empty()) config::apply(config::read_file(f.config), cfg, f.config);
  const std::size_t dim = f.dim.value_or(768);
  std::vector<model::ModelKind> kinds{model::ModelKind::euclidean, model::ModelKind::hyperbolic_single,
                                      model::ModelKind::hydra};
  if (f.model_kind) kinds = {model::parse_model_kind(*f.model_kind)};
  for (model::ModelKind kind : kinds) {
    cfg.model_kind = kind;
    const model::ModelConfig mc = engine::model_config_for(cfg, dim);
    mc.validate();
    std::cout << model::to_string(kind) << " d=" << dim << " d_h=" << mc.hidden_dim << " params "
              << model::count_parameters(mc) << "\n";
  }
  return kOk;
}

int run_guarded(int (*fn)(const Flags&), const Flags& f) {
  try {
    return fn(f);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const DomainError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Codec parameter regression from speech embeddings (SR, BPS, Q)."};
  app.footer(kExitHelp);
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic hierarchical dataset");
  gen->add_option("--config", f.config, "JSON file with SynthConfig fields");
  gen->add_option("--out", f.out, "Output directory")->required();
  gen->add_option("--seed", f.seed, "Generator seed");
  gen->add_option("--dim", f.dim, "Embedding dimension (>= 32)");
  gen->add_flag("--force", f.force, "Overwrite an existing dataset");

  auto* train = app.add_subcommand("train", "Train one model and evaluate it on the test split");
  train->add_option("--config", f.config, "JSON file with TrainConfig fields");
  train->add_option("--manifest", f.manifest, "Dataset manifest (JSONL)")->required();
  train->add_option("--out", f.out, "Run directory")->required();
  train->add_option("--seed", f.seed, "Training seed");
  train->add_option("--model-kind", f.model_kind, "euclidean | hyperbolic_single | hydra");
  train->add_option("--epochs", f.epochs, "Maximum epochs");
  train->add_flag("--force", f.force, "Overwrite a completed run");

  auto* eval = app.add_subcommand("eval", "Closed/open-set metrics of a trained run");
  eval->add_option("--run", f.run, "Run directory written by train")->required();
  eval->add_option("--manifest", f.manifest, "Dataset manifest (JSONL)")->required();
  eval->add_option("--out", f.out, "Output directory (default: the run directory)");
  eval->add_flag("--force", f.force, "Overwrite existing metrics");

  auto* predict = app.add_subcommand("predict", "Native-unit predictions for every record");
  predict->add_option("--run", f.run, "Run directory written by train")->required();
  predict->add_option("--manifest", f.manifest, "Dataset manifest (JSONL)")->required();
  predict->add_option("--out", f.out, "Output directory (default: the run directory)");
  predict->add_flag("--force", f.force, "Overwrite existing predictions");

  auto* self = app.add_subcommand("selftest", "Geometry, gradient and objective property suites");
  self->add_option("--seed", f.seed, "Seed for the randomized checks");

  auto* count = app.add_subcommand("param-count", "Learnable parameter counts");
  count->add_option("--config", f.config, "JSON file with TrainConfig fields (hidden_dim)");
  count->add_option("--dim", f.dim, "Embedding dimension (default 768)");
  count->add_option("--model-kind", f.model_kind, "Restrict to one model kind");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  if (*gen) return run_guarded(cmd_gen_synth, f);
  if (*train) return run_guarded(cmd_train, f);
  if (*eval) return run_guarded(cmd_eval, f);
  if (*predict) return run_guarded(cmd_predict, f);
  if (*self) return run_guarded(cmd_selftest, f);
  return run_guarded(cmd_param_count, f);
}
