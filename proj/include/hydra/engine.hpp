#pragma once

// Adam, the training loop with early stopping, and closed/open-set
// evaluation in reporting units.

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hydra/data.hpp"
#include "hydra/model.hpp"
#include "hydra/objective.hpp"

namespace hydra::engine {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double dropout = 0.3;
  std::size_t early_stop_patience = 5;
  double early_stop_min_delta = 1e-4;
  double htc_weight = objective::kDefaultHtcWeight;
  std::uint64_t seed = 0;
  model::ModelKind model_kind = model::ModelKind::hydra;
  std::size_t hidden_dim = 128;
  bool log_space_labels = false;
  bool check_containment = false;

  // Throws ConfigError. Patience >= epochs is accepted; early stopping then
  // never ends a run before its last epoch.
  void validate() const;
};

class Adam {
 public:
  explicit Adam(const TrainConfig& cfg);

  // One update from the accumulated gradients. A non-finite gradient throws
  // NumericalError naming the parameter before anything is modified.
  void step(std::span<ad::Parameter> params);

  std::uint64_t steps() const { return t_; }
  std::uint64_t state_hash() const;

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// FNV-1a over the raw bytes of every parameter value.
std::uint64_t parameter_hash(std::span<const ad::Parameter> params);
std::string hex64(std::uint64_t h);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  objective::LossBreakdown train;
  objective::LossBreakdown val;
  std::uint64_t params_hash = 0;
  std::uint64_t optimizer_hash = 0;
  bool best = false;  // this epoch's weights are the current selection
};

struct MetricCell {
  double rmse = 0.0;
  double mae = 0.0;
};

inline constexpr std::array<const char*, 3> kReportUnits{"kHz", "kbps", "count"};
// Native units (Hz, bps, count) to reporting units.
double to_reporting_units(std::size_t task, double native);

// Throws UsageError on empty or mismatched input.
MetricCell compute_metrics(std::span<const double> pred, std::span<const double> target);

struct MetricsReport {
  std::string model_kind;
  std::uint64_t seed = 0;
  // Absent when the partition has no records.
  std::array<std::optional<MetricCell>, 3> closed;
  std::array<std::optional<MetricCell>, 3> open;
  std::vector<double> val_losses;
  std::size_t selected_epoch = 0;
};

// Predictions in native units for the given records, eval mode.
std::vector<std::array<double, 3>> predict(model::Model& m, const data::LabelScaler& scaler, const data::Dataset& ds,
                                           std::span<const std::size_t> indices, std::size_t batch_size = 256);

// Test-split metrics partitioned by set type.
MetricsReport evaluate(model::Model& m, const data::LabelScaler& scaler, const data::Dataset& ds,
                       std::size_t batch_size = 256);

struct TrainResult {
  model::Model model;  // holds the selected (best validation) weights
  data::LabelScaler scaler;
  std::vector<EpochLog> log;
  std::size_t selected_epoch = 0;
  bool early_stopped = false;
  std::size_t containment_checks = 0;
  MetricsReport report;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Throws UsageError when the train or val split is empty.
TrainResult train(const data::Dataset& ds, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

model::ModelConfig model_config_for(const TrainConfig& cfg, std::size_t input_dim);

// One JSON object per line.
std::string epoch_log_line(const EpochLog& e);
// Table layout: one row per model run per partition, SR/BPS/Q x RMSE/MAE columns.
std::string metrics_json(std::span<const MetricsReport> reports);
std::string metrics_table(std::span<const MetricsReport> reports);

}  // namespace hydra::engine
