#include "hydra/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <nlohmann/json.hpp>

#include "hydra/error.hpp"
#include "hydra/rng.hpp"

namespace hydra::engine {

using model::kNumTasks;
using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1 must lie in (0, 1)");
  if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2 must lie in (0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (early_stop_patience == 0) throw ConfigError("early_stop_patience must be positive");
  if (!(early_stop_min_delta >= 0.0)) throw ConfigError("early_stop_min_delta must be non-negative");
  if (!(htc_weight >= 0.0) || !std::isfinite(htc_weight)) throw ConfigError("htc_weight must be non-negative");
  if (hidden_dim == 0) throw ConfigError("hidden_dim must be positive");
}

Adam::Adam(const TrainConfig& cfg)
    : lr_(cfg.learning_rate), beta1_(cfg.adam_beta1), beta2_(cfg.adam_beta2), eps_(cfg.adam_eps) {}

void Adam::step(std::span<ad::Parameter> params) {
  for (const ad::Parameter& p : params) {
    if (p.grad.shape() != p.value.shape()) throw UsageError("parameter '" + p.name + "' has no gradient buffer");
    if (!p.grad.all_finite()) throw NumericalError("non-finite gradient for parameter '" + p.name + "'");
  }
  if (m_.empty()) {
    for (const ad::Parameter& p : params) {
      m_.emplace_back(p.value.numel(), 0.0);
      v_.emplace_back(p.value.numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw UsageError("Adam used with a different parameter set");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    double* w = params[k].value.data().data();
    const double* g = params[k].grad.data().data();
    double* m = m_[k].data();
    double* v = v_[k].data();
    const std::size_t n = m_[k].size();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t Adam::state_hash() const {
  std::uint64_t h = fnv1a(kFnvOffset, &t_, sizeof t_);
  for (std::size_t k = 0; k < m_.size(); ++k) {
    h = fnv1a(h, m_[k].data(), m_[k].size() * sizeof(double));
    h = fnv1a(h, v_[k].data(), v_[k].size() * sizeof(double));
  }
  return h;
}

std::uint64_t parameter_hash(std::span<const ad::Parameter> params) {
  std::uint64_t h = kFnvOffset;
  for (const ad::Parameter& p : params) h = fnv1a(h, p.value.data().data(), p.value.numel() * sizeof(double));
  return h;
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double to_reporting_units(std::size_t task, double native) { return task == 2 ? native : native / 1000.0; }

MetricCell compute_metrics(std::span<const double> pred, std::span<const double> target) {
  if (pred.empty()) throw UsageError("metrics of an empty partition");
  if (pred.size() != target.size()) throw UsageError("metrics: prediction and target lengths differ");
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    se += d * d;
    ae += std::abs(d);
  }
  const double n = static_cast<double>(pred.size());
  return {std::sqrt(se / n), ae / n};
}

model::ModelConfig model_config_for(const TrainConfig& cfg, std::size_t input_dim) {
  model::ModelConfig mc;
  mc.kind = cfg.model_kind;
  mc.input_dim = input_dim;
  mc.hidden_dim = cfg.hidden_dim;
  mc.dropout = cfg.dropout;
  return mc;
}

namespace {

// Reuse freed blocks instead of returning large buffers to the kernel after
// every batch; page faults otherwise dominate the step time.
void tune_allocator() {
#ifdef __GLIBC__
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, std::numeric_limits<int>::max());
    return true;
  }();
  (void)done;
#endif
}

ad::Tensor gather_inputs(const data::Dataset& ds, std::span<const std::size_t> idx) {
  ad::Tensor x({idx.size(), ds.dim});
  double* dst = x.data().data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const std::vector<float>& e = ds.records[idx[r]].embedding;
    for (std::size_t j = 0; j < ds.dim; ++j) dst[r * ds.dim + j] = e[j];
  }
  return x;
}

std::array<ad::Tensor, kNumTasks> gather_targets(const data::Dataset& ds, const data::LabelScaler& scaler,
                                                 std::span<const std::size_t> idx) {
  std::array<ad::Tensor, kNumTasks> y;
  for (std::size_t t = 0; t < kNumTasks; ++t) {
    y[t] = ad::Tensor({idx.size()});
    for (std::size_t r = 0; r < idx.size(); ++r) y[t][r] = scaler.normalize(t, ds.records[idx[r]].labels()[t]);
  }
  return y;
}

// Consecutive batches; a trailing singleton joins the previous batch so
// every batch supports the batch statistics of the HTC term.
std::vector<std::span<const std::size_t>> make_batches(std::span<const std::size_t> order, std::size_t size) {
  std::vector<std::span<const std::size_t>> out;
  for (std::size_t b = 0; b < order.size(); b += size) {
    const std::size_t n = std::min(size, order.size() - b);
    if (n == 1 && !out.empty()) {
      out.back() = order.subspan(b - out.back().size(), out.back().size() + 1);
    } else {
      out.push_back(order.subspan(b, n));
    }
  }
  return out;
}

struct LossAccumulator {
  std::array<double, kNumTasks> mse{};
  double htc = 0.0;
  std::size_t count = 0, htc_count = 0;

  void add(const objective::LossBreakdown& b, std::size_t n, bool has_htc) {
    for (std::size_t t = 0; t < kNumTasks; ++t) mse[t] += b.mse(t) * static_cast<double>(n);
    if (has_htc) {
      htc += b.htc * static_cast<double>(n);
      htc_count += n;
    }
    count += n;
  }

  objective::LossBreakdown mean(double htc_weight) const {
    objective::LossBreakdown b;
    const double n = static_cast<double>(count);
    b.mse_sr = mse[0] / n;
    b.mse_bps = mse[1] / n;
    b.mse_q = mse[2] / n;
    b.htc = htc_count ? htc / static_cast<double>(htc_count) : 0.0;
    b.total = b.mse_sr + b.mse_bps + b.mse_q + (htc_count && htc_weight != 0.0 ? htc_weight * b.htc : 0.0);
    return b;
  }
};

objective::LossTerms batch_loss(ad::Tape& tape, model::Model& m, const data::Dataset& ds,
                                const data::LabelScaler& scaler, std::span<const std::size_t> idx,
                                const model::ForwardOptions& opt, double htc_weight, std::size_t& checks) {
  const model::ModelOutput out = m.forward(tape, gather_inputs(ds, idx), opt);
  checks += out.containment_checks;
  std::array<ad::Tensor, kNumTasks> y = gather_targets(ds, scaler, idx);
  std::array<ad::Var, kNumTasks> targets;
  for (std::size_t t = 0; t < kNumTasks; ++t) targets[t] = tape.constant(std::move(y[t]));
  return objective::total_loss(out.predictions, targets, out.latents, htc_weight);
}

objective::LossBreakdown validation_loss(model::Model& m, const data::Dataset& ds, const data::LabelScaler& scaler,
                                         std::span<const std::size_t> val, const TrainConfig& cfg,
                                         std::size_t& checks) {
  model::ForwardOptions opt;
  opt.check_containment = cfg.check_containment;
  LossAccumulator acc;
  for (std::span<const std::size_t> batch : make_batches(val, cfg.batch_size)) {
    ad::Tape tape;
    const objective::LossTerms terms = batch_loss(tape, m, ds, scaler, batch, opt, cfg.htc_weight, checks);
    acc.add(terms.values(), batch.size(), terms.htc.valid());
  }
  return acc.mean(cfg.htc_weight);
}

}  // namespace

std::vector<std::array<double, 3>> predict(model::Model& m, const data::LabelScaler& scaler, const data::Dataset& ds,
                                           std::span<const std::size_t> indices, std::size_t batch_size) {
  tune_allocator();
  if (ds.dim != m.config().input_dim) {
    throw ConfigError("model expects embeddings of dimension " + std::to_string(m.config().input_dim) +
                      ", dataset has " + std::to_string(ds.dim));
  }
  std::vector<std::array<double, 3>> out;
  out.reserve(indices.size());
  for (std::size_t b = 0; b < indices.size(); b += batch_size) {
    const auto idx = indices.subspan(b, std::min(batch_size, indices.size() - b));
    ad::Tape tape;
    const model::ModelOutput res = m.forward(tape, gather_inputs(ds, idx));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::array<double, 3> row;
      for (std::size_t t = 0; t < kNumTasks; ++t) row[t] = scaler.denormalize(t, res.predictions[t].value()[r]);
      out.push_back(row);
    }
  }
  return out;
}

MetricsReport evaluate(model::Model& m, const data::LabelScaler& scaler, const data::Dataset& ds,
                       std::size_t batch_size) {
  MetricsReport report;
  report.model_kind = std::string(model::to_string(m.kind()));
  for (data::SetType set : {data::SetType::closed, data::SetType::open}) {
    const std::vector<std::size_t> idx = ds.indices(data::Split::test, set);
    auto& cells = set == data::SetType::closed ? report.closed : report.open;
    if (idx.empty()) continue;
    const auto preds = predict(m, scaler, ds, idx, batch_size);
    for (std::size_t t = 0; t < kNumTasks; ++t) {
      std::vector<double> p(idx.size()), y(idx.size());
      for (std::size_t r = 0; r < idx.size(); ++r) {
        p[r] = to_reporting_units(t, preds[r][t]);
        y[r] = to_reporting_units(t, ds.records[idx[r]].labels()[t]);
      }
      cells[t] = compute_metrics(p, y);
    }
  }
  return report;
}

TrainResult train(const data::Dataset& ds, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  tune_allocator();
  const std::vector<std::size_t> train_idx = ds.indices(data::Split::train);
  const std::vector<std::size_t> val_idx = ds.indices(data::Split::val);
  if (train_idx.empty()) throw UsageError("training split is empty");
  if (val_idx.empty()) throw UsageError("validation split is empty");

  TrainResult result{model::Model(model_config_for(cfg, ds.dim), Rng::derive_seed(cfg.seed, 0)),
                     data::LabelScaler::fit(ds, cfg.log_space_labels),
                     {},
                     0,
                     false,
                     0,
                     {}};
  model::Model& m = result.model;
  Rng shuffle_rng(Rng::derive_seed(cfg.seed, 1));
  Rng dropout_rng(Rng::derive_seed(cfg.seed, 2));
  Adam adam(cfg);

  model::ForwardOptions train_opt;
  train_opt.training = true;
  train_opt.dropout_rng = &dropout_rng;
  train_opt.check_containment = cfg.check_containment;

  std::vector<ad::Tensor> best_state;
  double best_val = std::numeric_limits<double>::infinity();
  double reference = best_val;  // last improvement by at least min_delta
  std::size_t stale = 0;
  std::vector<std::size_t> order = train_idx;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    LossAccumulator acc;
    for (std::span<const std::size_t> batch : make_batches(order, cfg.batch_size)) {
      for (ad::Parameter& p : m.parameters()) p.zero_grad();
      objective::LossTerms terms;
      {
        ad::Tape tape;
        terms = batch_loss(tape, m, ds, result.scaler, batch, train_opt, cfg.htc_weight, result.containment_checks);
        acc.add(terms.values(), batch.size(), terms.htc.valid());
        tape.backward(terms.total);
      }
      adam.step(m.parameters());
    }

    EpochLog log;
    log.epoch = epoch;
    log.train = acc.mean(cfg.htc_weight);
    log.val = validation_loss(m, ds, result.scaler, val_idx, cfg, result.containment_checks);
    log.params_hash = parameter_hash(m.parameters());
    log.optimizer_hash = adam.state_hash();
    if (log.val.total < best_val) {
      best_val = log.val.total;
      best_state.clear();
      for (const ad::Parameter& p : m.parameters()) best_state.push_back(p.value);
      result.selected_epoch = epoch;
      log.best = true;
    }
    if (log.val.total < reference - cfg.early_stop_min_delta) {
      reference = log.val.total;
      stale = 0;
    } else {
      ++stale;
    }
    result.log.push_back(log);
    result.report.val_losses.push_back(log.val.total);
    if (on_epoch) on_epoch(log);
    if (stale >= cfg.early_stop_patience) {
      result.early_stopped = epoch < cfg.epochs;
      break;
    }
  }

  for (std::size_t k = 0; k < best_state.size(); ++k) m.parameters()[k].value = std::move(best_state[k]);
  MetricsReport report = evaluate(m, result.scaler, ds);
  report.seed = cfg.seed;
  report.val_losses = std::move(result.report.val_losses);
  report.selected_epoch = result.selected_epoch;
  result.report = std::move(report);
  return result;
}

namespace {

json breakdown_json(const objective::LossBreakdown& b) {
  return {{"mse_sr", b.mse_sr}, {"mse_bps", b.mse_bps}, {"mse_q", b.mse_q}, {"htc", b.htc}, {"total", b.total}};
}

json cells_json(const std::array<std::optional<MetricCell>, 3>& cells) {
  json row = json::object();
  for (std::size_t t = 0; t < kNumTasks; ++t) {
    const std::string task(model::task_name(t));
    row[task] = cells[t] ? json{{"RMSE", cells[t]->rmse}, {"MAE", cells[t]->mae}} : json(nullptr);
  }
  return row;
}

}  // namespace

std::string epoch_log_line(const EpochLog& e) {
  const json obj{{"epoch", e.epoch},
                 {"train", breakdown_json(e.train)},
                 {"val", breakdown_json(e.val)},
                 {"params_hash", hex64(e.params_hash)},
                 {"optimizer_hash", hex64(e.optimizer_hash)},
                 {"best", e.best}};
  return obj.dump();
}

std::string metrics_json(std::span<const MetricsReport> reports) {
  json out;
  out["units"] = {{"SR", kReportUnits[0]}, {"BPS", kReportUnits[1]}, {"Q", kReportUnits[2]}};
  out["closed_set"] = json::array();
  out["open_set"] = json::array();
  out["training"] = json::array();
  for (const MetricsReport& r : reports) {
    json closed = cells_json(r.closed), open = cells_json(r.open);
    closed["model"] = open["model"] = r.model_kind;
    closed["seed"] = open["seed"] = r.seed;
    out["closed_set"].push_back(closed);
    out["open_set"].push_back(open);
    out["training"].push_back({{"model", r.model_kind}, {"seed", r.seed}, {"selected_epoch", r.selected_epoch},
                               {"val_loss", r.val_losses}});
  }
  return out.dump(2) + "\n";
}

std::string metrics_table(std::span<const MetricsReport> reports) {
  std::ostringstream os;
  char line[256];
  for (int part = 0; part < 2; ++part) {
    os << (part == 0 ? "closed-set" : "open-set") << "\n";
    std::snprintf(line, sizeof line, "%-20s %6s | %9s %9s | %9s %9s | %9s %9s\n", "model", "seed", "SR RMSE", "SR MAE",
                  "BPS RMSE", "BPS MAE", "Q RMSE", "Q MAE");
    os << line;
    for (const MetricsReport& r : reports) {
      const auto& cells = part == 0 ? r.closed : r.open;
      std::snprintf(line, sizeof line, "%-20s %6llu", r.model_kind.c_str(), static_cast<unsigned long long>(r.seed));
      os << line;
      for (const auto& c : cells) {
        if (c) {
          std::snprintf(line, sizeof line, " | %9.4f %9.4f", c->rmse, c->mae);
        } else {
          std::snprintf(line, sizeof line, " | %9s %9s", "-", "-");
        }
        os << line;
      }
      os << "\n";
    }
  }
  return os.str();
}

}  // namespace hydra::engine
