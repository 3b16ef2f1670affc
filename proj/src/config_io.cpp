#include "hydra/config_io.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "hydra/error.hpp"

namespace hydra::config {

using nlohmann::json;

namespace {

json parse_object(std::string_view text, std::string_view origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string(origin) + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(std::string(origin) + ": expected a JSON object");
  return j;
}

// Reads one key into `field` with a type check.
class Reader {
 public:
  Reader(const json& j, std::string_view origin) : j_(j), origin_(origin) {}

  template <typename T>
  void operator()(const char* key, T& field) {
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    ++used_;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("expected true or false");
        field = it->get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_unsigned()) throw ConfigError("expected a non-negative integer");
        field = it->get<T>();
      } else {
        if (!it->is_number()) throw ConfigError("expected a number");
        field = it->get<T>();
      }
    } catch (const ConfigError& e) {
      throw ConfigError(origin_ + ": field '" + key + "': " + e.what());
    }
  }

  std::string string(const char* key) {
    const auto it = j_.find(key);
    if (it == j_.end()) return {};
    ++used_;
    if (!it->is_string()) throw ConfigError(origin_ + ": field '" + key + "': expected a string");
    return it->get<std::string>();
  }

  void reject_unknown(std::initializer_list<const char*> known) const {
    if (used_ == j_.size()) return;
    for (const auto& [key, value] : j_.items()) {
      bool found = false;
      for (const char* k : known) found = found || key == k;
      if (!found) throw ConfigError(origin_ + ": unknown field '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::string origin_;
  std::size_t used_ = 0;
};

}  // namespace

void apply(std::string_view text, engine::TrainConfig& cfg, std::string_view origin) {
  const json j = parse_object(text, origin);
  Reader r(j, origin);
  r("epochs", cfg.epochs);
  r("batch_size", cfg.batch_size);
  r("learning_rate", cfg.learning_rate);
  r("adam_beta1", cfg.adam_beta1);
  r("adam_beta2", cfg.adam_beta2);
  r("adam_eps", cfg.adam_eps);
  r("dropout", cfg.dropout);
  r("early_stop_patience", cfg.early_stop_patience);
  r("early_stop_min_delta", cfg.early_stop_min_delta);
  r("htc_weight", cfg.htc_weight);
  r("seed", cfg.seed);
  const std::string kind = r.string("model_kind");
  if (!kind.empty()) cfg.model_kind = model::parse_model_kind(kind);
  r("hidden_dim", cfg.hidden_dim);
  r("log_space_labels", cfg.log_space_labels);
  r("check_containment", cfg.check_containment);
  r.reject_unknown({"epochs", "batch_size", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps", "dropout",
                    "early_stop_patience", "early_stop_min_delta", "htc_weight", "seed", "model_kind", "hidden_dim",
                    "log_space_labels", "check_containment"});
}

void apply(std::string_view text, data::SynthConfig& cfg, std::string_view origin) {
  const json j = parse_object(text, origin);
  Reader r(j, origin);
  r("n_train", cfg.n_train);
  r("n_val", cfg.n_val);
  r("n_test", cfg.n_test);
  r("dim", cfg.dim);
  r("family_count", cfg.family_count);
  r("noise_sigma", cfg.noise_sigma);
  r("open_fraction", cfg.open_fraction);
  r("seed", cfg.seed);
  r.reject_unknown({"n_train", "n_val", "n_test", "dim", "family_count", "noise_sigma", "open_fraction", "seed"});
}

std::string to_json(const engine::TrainConfig& cfg) {
  json j = json::object();
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["learning_rate"] = cfg.learning_rate;
  j["adam_beta1"] = cfg.adam_beta1;
  j["adam_beta2"] = cfg.adam_beta2;
  j["adam_eps"] = cfg.adam_eps;
  j["dropout"] = cfg.dropout;
  j["early_stop_patience"] = cfg.early_stop_patience;
  j["early_stop_min_delta"] = cfg.early_stop_min_delta;
  j["htc_weight"] = cfg.htc_weight;
  j["seed"] = cfg.seed;
  j["model_kind"] = std::string(model::to_string(cfg.model_kind));
  j["hidden_dim"] = cfg.hidden_dim;
  j["log_space_labels"] = cfg.log_space_labels;
  j["check_containment"] = cfg.check_containment;
  return j.dump(2) + "\n";
}

std::string to_json(const data::SynthConfig& cfg) {
  json j = json::object();
  j["n_train"] = cfg.n_train;
  j["n_val"] = cfg.n_val;
  j["n_test"] = cfg.n_test;
  j["dim"] = cfg.dim;
  j["family_count"] = cfg.family_count;
  j["noise_sigma"] = cfg.noise_sigma;
  j["open_fraction"] = cfg.open_fraction;
  j["seed"] = cfg.seed;
  return j.dump(2) + "\n";
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace hydra::config
