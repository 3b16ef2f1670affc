#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "hydra/checkpoint.hpp"
#include "hydra/data.hpp"
#include "hydra/engine.hpp"
#include "hydra/error.hpp"
#include "hydra/rng.hpp"

namespace ad = hydra::ad;
namespace data = hydra::data;
namespace engine = hydra::engine;
using hydra::model::ModelKind;

namespace {

const data::Dataset& small_dataset() {
  static const data::Dataset ds = [] {
    data::SynthConfig cfg;
    cfg.n_train = 240;
    cfg.n_val = 60;
    cfg.n_test = 80;
    cfg.dim = 32;
    cfg.seed = 11;
    return data::gen_synth(cfg).dataset;
  }();
  return ds;
}

engine::TrainConfig small_train(ModelKind kind, std::size_t epochs = 3) {
  engine::TrainConfig cfg;
  cfg.model_kind = kind;
  cfg.epochs = epochs;
  cfg.early_stop_patience = std::min<std::size_t>(5, epochs - 1);
  cfg.hidden_dim = 8;
  cfg.seed = 5;
  return cfg;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("hydra_engine_" + name);
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<ad::Parameter> params{ad::Parameter("w", ad::Tensor::vector({1.0, -2.0, 3.0}))};
  params[0].zero_grad();
  engine::TrainConfig cfg;
  engine::Adam adam(cfg);
  adam.step(params);
  EXPECT_EQ(params[0].value, ad::Tensor::vector({1.0, -2.0, 3.0}));
  EXPECT_EQ(adam.steps(), 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<ad::Parameter> params{ad::Parameter("w", ad::Tensor::vector({0.5, 0.5}))};
  params[0].grad = ad::Tensor::vector({1.0, -4.0});
  engine::TrainConfig cfg;
  engine::Adam adam(cfg);
  adam.step(params);
  // Bias-corrected moments give m/sqrt(v) = sign(g) on the first step.
  EXPECT_NEAR(params[0].value[0], 0.5 - 1e-3, 1e-10);
  EXPECT_NEAR(params[0].value[1], 0.5 + 1e-3, 1e-10);
}

TEST(Adam, NonFiniteGradientNamesParameterAndChangesNothing) {
  std::vector<ad::Parameter> params{ad::Parameter("ok", ad::Tensor::vector({1.0})),
                                    ad::Parameter("head.sr.fc1.weight", ad::Tensor::vector({2.0}))};
  params[0].grad = ad::Tensor::vector({1.0});
  params[1].grad = ad::Tensor::vector({std::numeric_limits<double>::quiet_NaN()});
  engine::TrainConfig cfg;
  engine::Adam adam(cfg);
  try {
    adam.step(params);
    FAIL() << "expected NumericalError";
  } catch (const hydra::NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("head.sr.fc1.weight"), std::string::npos);
  }
  EXPECT_EQ(params[0].value[0], 1.0);
  EXPECT_EQ(adam.steps(), 0u);
}

TEST(Metrics, RmseAndMaeExample) {
  const std::vector<double> pred{0.0, 0.0}, target{3.0, 4.0};
  const engine::MetricCell c = engine::compute_metrics(pred, target);
  EXPECT_NEAR(c.rmse, 3.5355339059327378, 1e-12);
  EXPECT_DOUBLE_EQ(c.mae, 3.5);
}

TEST(Metrics, RmseNeverBelowMae) {
  hydra::Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p(17), y(17);
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = rng.normal();
      y[i] = rng.normal();
    }
    const engine::MetricCell c = engine::compute_metrics(p, y);
    EXPECT_GE(c.rmse, c.mae - 1e-15);
  }
}

TEST(Metrics, EmptyPartitionRejected) {
  EXPECT_THROW(engine::compute_metrics({}, {}), hydra::UsageError);
}

TEST(Metrics, ReportingUnits) {
  EXPECT_DOUBLE_EQ(engine::to_reporting_units(0, 16000.0), 16.0);
  EXPECT_DOUBLE_EQ(engine::to_reporting_units(1, 6000.0), 6.0);
  EXPECT_DOUBLE_EQ(engine::to_reporting_units(2, 8.0), 8.0);
}

TEST(Metrics, AbsentCellsForMissingOpenSet) {
  data::Dataset ds = small_dataset();
  std::erase_if(ds.records, [](const data::EmbeddingRecord& r) { return r.set_type == data::SetType::open; });
  hydra::model::Model m(engine::model_config_for(small_train(ModelKind::euclidean), ds.dim), 1);
  const auto scaler = data::LabelScaler::fit(ds);
  const engine::MetricsReport r = engine::evaluate(m, scaler, ds);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_TRUE(r.closed[t].has_value());
    EXPECT_FALSE(r.open[t].has_value());
  }
  const std::string table = engine::metrics_table(std::span(&r, 1));
  EXPECT_NE(table.find(" - "), std::string::npos);
}

TEST(Predict, InvertsLabelScaler) {
  const data::Dataset& ds = small_dataset();
  hydra::model::Model m(engine::model_config_for(small_train(ModelKind::hydra), ds.dim), 2);
  const auto scaler = data::LabelScaler::fit(ds);
  const auto idx = ds.indices(data::Split::test);
  const auto preds = engine::predict(m, scaler, ds, idx, 16);
  ad::Tape tape;
  ad::Tensor x({idx.size(), ds.dim});
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t j = 0; j < ds.dim; ++j) x.at(r, j) = ds.records[idx[r]].embedding[j];
  const auto out = m.forward(tape, x);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    for (std::size_t t = 0; t < 3; ++t) {
      const double z = out.predictions[t].value()[r];
      EXPECT_NEAR(scaler.normalize(t, preds[r][t]), z, 1e-9);
    }
  }
}

TEST(Train, DeterministicAcrossRuns) {
  for (ModelKind kind : {ModelKind::euclidean, ModelKind::hyperbolic_single, ModelKind::hydra}) {
    const auto a = engine::train(small_dataset(), small_train(kind));
    const auto b = engine::train(small_dataset(), small_train(kind));
    ASSERT_EQ(a.log.size(), b.log.size());
    for (std::size_t e = 0; e < a.log.size(); ++e) {
      EXPECT_EQ(a.log[e].params_hash, b.log[e].params_hash);
      EXPECT_EQ(a.log[e].optimizer_hash, b.log[e].optimizer_hash);
      EXPECT_EQ(engine::epoch_log_line(a.log[e]), engine::epoch_log_line(b.log[e]));
    }
    EXPECT_EQ(engine::metrics_json(std::span(&a.report, 1)), engine::metrics_json(std::span(&b.report, 1)));
  }
}

TEST(Train, DifferentSeedsDiffer) {
  auto cfg = small_train(ModelKind::euclidean, 2);
  const auto a = engine::train(small_dataset(), cfg);
  cfg.seed = 6;
  const auto b = engine::train(small_dataset(), cfg);
  EXPECT_NE(a.log.back().params_hash, b.log.back().params_hash);
}

TEST(Train, SelectsBestValidationEpoch) {
  auto cfg = small_train(ModelKind::hydra, 8);
  cfg.early_stop_patience = 2;
  cfg.early_stop_min_delta = 0.05;
  const auto r = engine::train(small_dataset(), cfg);
  ASSERT_GE(r.selected_epoch, 1u);
  const double chosen = r.log[r.selected_epoch - 1].val.total;
  for (const auto& e : r.log) EXPECT_LE(chosen, e.val.total);
  if (r.early_stopped) EXPECT_LT(r.log.size(), cfg.epochs);
  EXPECT_EQ(r.report.selected_epoch, r.selected_epoch);
  EXPECT_EQ(r.report.val_losses.size(), r.log.size());

  // The returned model carries the selected weights.
  const auto again = engine::evaluate(const_cast<hydra::model::Model&>(r.model), r.scaler, small_dataset());
  EXPECT_EQ(again.closed[0]->rmse, r.report.closed[0]->rmse);
}

TEST(Train, PatienceStopsAfterStaleEpochs) {
  auto cfg = small_train(ModelKind::euclidean, 20);
  cfg.early_stop_patience = 1;
  cfg.early_stop_min_delta = 1e9;  // nothing counts as an improvement
  const auto r = engine::train(small_dataset(), cfg);
  EXPECT_EQ(r.log.size(), 2u);  // the first epoch always improves on an infinite reference
  EXPECT_TRUE(r.early_stopped);
  EXPECT_EQ(r.selected_epoch, r.log[0].val.total <= r.log[1].val.total ? 1u : 2u);
}

TEST(Train, ContainmentInstrumentedRun) {
  auto cfg = small_train(ModelKind::hydra, 5);
  cfg.check_containment = true;
  const auto r = engine::train(small_dataset(), cfg);
  EXPECT_GT(r.containment_checks, 0u);
  for (const auto& e : r.log) EXPECT_TRUE(std::isfinite(e.val.total));
  for (const auto& row : r.model.attention_weights()) {
    double sum = 0.0;
    for (double w : row) {
      EXPECT_GE(w, 0.0);
      sum += w;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
  for (double c : r.model.curvatures()) EXPECT_GT(c, 0.0);
}

TEST(Train, EmptySplitsRejected) {
  data::Dataset ds = small_dataset();
  std::erase_if(ds.records, [](const data::EmbeddingRecord& r) { return r.split == data::Split::val; });
  EXPECT_THROW(engine::train(ds, small_train(ModelKind::euclidean)), hydra::UsageError);
  std::erase_if(ds.records, [](const data::EmbeddingRecord& r) { return r.split == data::Split::train; });
  EXPECT_THROW(engine::train(ds, small_train(ModelKind::euclidean)), hydra::UsageError);
}

TEST(TrainConfig, RejectsBadSettings) {
  engine::TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.learning_rate = 0.0;
  EXPECT_THROW(cfg.validate(), hydra::ConfigError);
  cfg = {};
  cfg.batch_size = 1;
  EXPECT_THROW(cfg.validate(), hydra::ConfigError);
  cfg = {};
  cfg.dropout = 1.0;
  EXPECT_THROW(cfg.validate(), hydra::ConfigError);
  cfg = {};
  cfg.htc_weight = -0.1;
  EXPECT_THROW(cfg.validate(), hydra::ConfigError);
}

TEST(Checkpoint, RoundTripReproducesOutputsExactly) {
  const data::Dataset& ds = small_dataset();
  for (ModelKind kind : {ModelKind::euclidean, ModelKind::hyperbolic_single, ModelKind::hydra}) {
    const auto r = engine::train(ds, small_train(kind, 2));
    const auto path = temp_path("roundtrip.hydc");
    hydra::checkpoint::save(path, hydra::checkpoint::pack(r.model, r.scaler));

    hydra::model::Model fresh(engine::model_config_for(small_train(kind), ds.dim), 999);
    const auto scaler = hydra::checkpoint::unpack(hydra::checkpoint::load(path), fresh);
    std::filesystem::remove(path);
    EXPECT_EQ(scaler.mean(), r.scaler.mean());
    EXPECT_EQ(scaler.stddev(), r.scaler.stddev());

    const auto idx = ds.indices(data::Split::test);
    auto& trained = const_cast<hydra::model::Model&>(r.model);
    const auto a = engine::predict(trained, r.scaler, ds, idx);
    const auto b = engine::predict(fresh, scaler, ds, idx);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  }
}

TEST(Checkpoint, ShapeMismatchRejected) {
  hydra::model::Model small(engine::model_config_for(small_train(ModelKind::hydra), 32), 1);
  auto entries = hydra::checkpoint::pack(small, data::LabelScaler({1, 2, 3}, {1, 1, 1}, false));
  hydra::model::Model wider(engine::model_config_for(small_train(ModelKind::hydra), 64), 1);
  EXPECT_THROW(hydra::checkpoint::unpack(entries, wider), hydra::Error);
  hydra::model::Model other(engine::model_config_for(small_train(ModelKind::euclidean), 32), 1);
  EXPECT_THROW(hydra::checkpoint::unpack(entries, other), hydra::Error);
}

TEST(Checkpoint, CorruptFilesRejected) {
  const auto path = temp_path("corrupt.hydc");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE";
  }
  EXPECT_THROW(hydra::checkpoint::load(path), hydra::DataError);

  hydra::model::Model m(engine::model_config_for(small_train(ModelKind::euclidean), 32), 1);
  hydra::checkpoint::save(path, hydra::checkpoint::pack(m, data::LabelScaler({1, 2, 3}, {1, 1, 1}, false)));
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 3);
  EXPECT_THROW(hydra::checkpoint::load(path), hydra::DataError);
  std::filesystem::resize_file(path, size + 5);
  EXPECT_THROW(hydra::checkpoint::load(path), hydra::DataError);
  std::filesystem::remove(path);
}

TEST(Output, EpochLogLineIsJson) {
  engine::EpochLog e;
  e.epoch = 3;
  e.params_hash = 0xabcdef;
  const std::string line = engine::epoch_log_line(e);
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_NE(line.find("\"params_hash\":\"0000000000abcdef\""), std::string::npos);
  EXPECT_NE(line.find("\"epoch\":3"), std::string::npos);
}
