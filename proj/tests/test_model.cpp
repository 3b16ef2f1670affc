#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "hydra/error.hpp"
#include "hydra/geometry.hpp"
#include "hydra/gradcheck.hpp"
#include "hydra/model.hpp"
#include "hydra/objective.hpp"
#include "hydra/rng.hpp"
#include "model_reference.hpp"

namespace ad = hydra::ad;
namespace geo = hydra::geo;
using reference::manual_dense;
using reference::manual_head;
using reference::manual_trunk;
using reference::max_abs_diff;
using hydra::model::Model;
using hydra::model::ModelConfig;
using hydra::model::ModelKind;

namespace {

ModelConfig small_config(ModelKind kind, std::size_t d = 32, std::size_t dh = 8) {
  ModelConfig cfg;
  cfg.kind = kind;
  cfg.input_dim = d;
  cfg.hidden_dim = dh;
  cfg.dropout = 0.3;
  return cfg;
}

ad::Tensor random_batch(std::uint64_t seed, std::size_t batch, std::size_t d) {
  hydra::Rng rng(seed);
  ad::Tensor x({batch, d});
  for (double& v : x.data()) v = rng.normal();
  return x;
}

}  // namespace

TEST(ModelConfig, FlattenLength) {
  ModelConfig cfg;
  cfg.input_dim = 768;
  EXPECT_EQ(cfg.flatten_length(), 24576u);
  cfg.input_dim = 192;
  EXPECT_EQ(cfg.flatten_length(), 6144u);
  Model m(small_config(ModelKind::euclidean, 192), 1);
  EXPECT_EQ(m.parameter("head.SR.fc1.weight").value.shape(), (ad::Shape{6144, 120}));
}

TEST(ModelConfig, RejectsBadConfigurations) {
  ModelConfig cfg = small_config(ModelKind::hydra, 30);
  EXPECT_THROW(Model(cfg, 1), hydra::ConfigError);
  cfg = small_config(ModelKind::hydra);
  cfg.conv1_filters = 0;
  EXPECT_THROW(Model(cfg, 1), hydra::ConfigError);
  cfg = small_config(ModelKind::hydra);
  cfg.fold_order = {0, 0, 1};
  EXPECT_THROW(Model(cfg, 1), hydra::ConfigError);
  EXPECT_THROW(hydra::model::parse_model_kind("mlp"), hydra::ConfigError);
}

TEST(ParamCount, MatchesCountingOracle) {
  // Hand count: conv1 64*3+64, conv2 128*64*3+128, per subspace 24576*128 + 128
  // + 1 curvature, 3x3 attention, per head 128*120+120 + 120*30+30 + 30+1.
  const std::size_t trunk = (64 * 3 + 64) + (128 * 64 * 3 + 128);
  const std::size_t hydra_768 = trunk + 3 * (24576 * 128 + 128 + 1) + 9 + 3 * (128 * 120 + 120 + 120 * 30 + 30 + 31);
  ModelConfig cfg;
  cfg.input_dim = 768;
  cfg.hidden_dim = 128;
  EXPECT_EQ(hydra_768, 9519963u);
  EXPECT_EQ(hydra::model::count_parameters(cfg), hydra_768);
  EXPECT_GE(hydra_768, 8'000'000u);
  EXPECT_LE(hydra_768, 12'000'000u);
  EXPECT_EQ(Model(cfg, 3).param_count(), hydra_768);

  cfg.input_dim = 192;
  const std::size_t hydra_192 = trunk + 3 * (6144 * 128 + 128 + 1) + 9 + 3 * (128 * 120 + 120 + 120 * 30 + 30 + 31);
  EXPECT_EQ(hydra::model::count_parameters(cfg), hydra_192);
  EXPECT_EQ(Model(cfg, 3).param_count(), hydra_192);

  for (ModelKind kind : {ModelKind::euclidean, ModelKind::hyperbolic_single}) {
    ModelConfig small = small_config(kind);
    EXPECT_EQ(Model(small, 1).param_count(), hydra::model::count_parameters(small));
  }
}

TEST(ModelForward, ShapeContract) {
  const ad::Tensor x = random_batch(1, 5, 32);
  for (ModelKind kind : {ModelKind::euclidean, ModelKind::hyperbolic_single, ModelKind::hydra}) {
    Model m(small_config(kind), 2);
    ad::Tape tape;
    const auto out = m.forward(tape, x);
    for (const ad::Var& p : out.predictions) EXPECT_EQ(p.shape(), (ad::Shape{5}));
    EXPECT_EQ(out.latents.size(), kind == ModelKind::hydra ? 3u : 0u);
  }
  Model m(small_config(ModelKind::hydra), 2);
  ad::Tape tape;
  EXPECT_THROW(m.forward(tape, random_batch(1, 5, 16)), hydra::ShapeError);
}

TEST(ModelForward, ZeroWeightsGiveBiases) {
  Model m(small_config(ModelKind::euclidean), 4);
  for (ad::Parameter& p : m.parameters()) std::fill(p.value.storage().begin(), p.value.storage().end(), 0.0);
  m.parameter("head.SR.out.bias").value[0] = 0.5;
  m.parameter("head.BPS.out.bias").value[0] = -1.0;
  m.parameter("head.Q.out.bias").value[0] = 2.0;
  ad::Tape tape;
  const auto out = m.forward(tape, random_batch(3, 4, 32));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(out.predictions[0].value()[i], 0.5);
    EXPECT_EQ(out.predictions[1].value()[i], -1.0);
    EXPECT_EQ(out.predictions[2].value()[i], 2.0);
  }
}

TEST(ModelForward, DropoutOnlyInTraining) {
  Model m(small_config(ModelKind::hydra), 4);
  const ad::Tensor x = random_batch(5, 4, 32);
  ad::Tape t1, t2, t3;
  const auto a = m.forward(t1, x);
  const auto b = m.forward(t2, x);
  EXPECT_EQ(a.predictions[0].value(), b.predictions[0].value());
  hydra::Rng rng(9);
  hydra::model::ForwardOptions train;
  train.training = true;
  train.dropout_rng = &rng;
  const auto c = m.forward(t3, x, train);
  EXPECT_NE(a.predictions[0].value(), c.predictions[0].value());
}

TEST(ModelForward, GoldenValues) {
  // Frozen from the first verified run of this implementation (seed 2024).
  const std::array<std::array<double, 3>, 3> golden{{
      {0.65294454532424051, 0.90221632886683223, -0.0046113563897510063},
      {-0.010100549673235893, -0.053410481690412716, -0.0049457513937067391},
      {-0.013886191324461662, 0.026435960770944154, 0.02989204859810176},
  }};
  const ad::Tensor x = random_batch(77, 2, 32);
  const std::array<ModelKind, 3> kinds{ModelKind::euclidean, ModelKind::hyperbolic_single, ModelKind::hydra};
  for (std::size_t k = 0; k < 3; ++k) {
    Model m(small_config(kinds[k]), 2024);
    ad::Tape tape;
    const auto out = m.forward(tape, x);
    for (std::size_t t = 0; t < 3; ++t) EXPECT_NEAR(out.predictions[t].value()[0], golden[k][t], 1e-10);
  }
}

TEST(HyperbolicSingle, NearEuclideanAtCurvatureFloor) {
  Model m(small_config(ModelKind::hyperbolic_single), 6);
  m.parameter("curvature.raw").value[0] = -60.0;
  EXPECT_NEAR(m.curvatures()[0], 1e-3, 1e-12);
  const ad::Tensor x = random_batch(6, 4, 32);
  ad::Tape tape;
  const auto out = m.forward(tape, x);
  const ad::Var lin = manual_dense(tape, m, "proj", manual_trunk(tape, m, x));
  for (std::size_t t = 0; t < 3; ++t) {
    const ad::Var expected = manual_head(tape, m, t, lin);
    EXPECT_LE(max_abs_diff(out.predictions[t].value(), expected.value()), 1e-3);
  }
}

TEST(HyperbolicSingle, IdentityProjectionRoundTrip) {
  Model m(small_config(ModelKind::hyperbolic_single), 6);
  ad::Parameter& w = m.parameter("proj.weight");
  std::fill(w.value.storage().begin(), w.value.storage().end(), 0.0);
  for (std::size_t i = 0; i < 8; ++i) w.value.at(i, i) = 0.05;
  const ad::Tensor x = random_batch(8, 3, 32);
  ad::Tape tape;
  const auto out = m.forward(tape, x);
  // log(exp(0.05 z[:, :8])) == 0.05 z[:, :8] through the geometry round trip
  const ad::Var z = ad::scale(ad::slice(manual_trunk(tape, m, x), 1, 0, 8), 0.05);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_LE(max_abs_diff(out.predictions[t].value(), manual_head(tape, m, t, z).value()), 1e-9);
  }
}

TEST(Hydra, UniformLogitsGiveUniformAttention) {
  Model m(small_config(ModelKind::hydra), 1);
  for (const auto& row : m.attention_weights())
    for (double a : row) EXPECT_DOUBLE_EQ(a, 1.0 / 3.0);
}

TEST(Hydra, OneHotAttentionMatchesSingleSubspacePipeline) {
  Model m(small_config(ModelKind::hydra), 12);
  for (std::size_t i = 0; i < 3; ++i) m.parameter("curvature." + std::to_string(i) + ".raw").value[0] = 0.3 * i - 0.5;
  const ad::Tensor x = random_batch(13, 4, 32);
  for (std::size_t k = 0; k < 3; ++k) {
    hydra::model::ForwardOptions opt;
    std::array<std::array<double, 3>, 3> onehot{};
    for (auto& row : onehot) row[k] = 1.0;
    opt.attention_override = onehot;
    ad::Tape tape;
    const auto out = m.forward(tape, x, opt);
    const ad::Var z = manual_trunk(tape, m, x);
    const auto curv = m.curvatures();
    const ad::Var ck = tape.constant(ad::Tensor::scalar(curv[k]));
    const ad::Var ball = geo::exp_map0(manual_dense(tape, m, "proj." + std::to_string(k), z), ck);
    for (std::size_t t = 0; t < 3; ++t) {
      const ad::Var ct = k == t ? ck : tape.constant(ad::Tensor::scalar(curv[t]));
      const ad::Var tangent = geo::log_map0(geo::transport(ball, ck, ct), ct);
      EXPECT_LE(max_abs_diff(out.predictions[t].value(), manual_head(tape, m, t, tangent).value()), 1e-9)
          << "task " << t << " subspace " << k;
    }
  }
}

TEST(Hydra, AllSubspacesAtOriginCollapseToZeroTangent) {
  Model m(small_config(ModelKind::hydra), 14);
  for (std::size_t s = 0; s < 3; ++s) {
    for (const char* part : {".weight", ".bias"}) {
      ad::Parameter& p = m.parameter("proj." + std::to_string(s) + part);
      std::fill(p.value.storage().begin(), p.value.storage().end(), 0.0);
    }
  }
  const ad::Tensor x = random_batch(15, 3, 32);
  ad::Tape tape;
  const auto out = m.forward(tape, x);
  const ad::Var zero = tape.constant(ad::Tensor({3, 8}));
  for (const ad::Var& u : out.latents)
    for (double v : u.value().data()) EXPECT_EQ(v, 0.0);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(out.predictions[t].value().storage(), manual_head(tape, m, t, zero).value().storage());
  }
}

TEST(Hydra, SubspacePermutationInvariance) {
  ModelConfig cfg = small_config(ModelKind::hydra);
  Model base(cfg, 21);
  hydra::Rng rng(22);
  ad::Parameter& logits = base.parameter("attention.logits");
  for (double& v : logits.value.data()) v = rng.normal();
  for (std::size_t s = 0; s < 3; ++s) base.parameter("curvature." + std::to_string(s) + ".raw").value[0] = 0.4 * s - 0.6;

  const hydra::model::Permutation perm{2, 0, 1};  // old subspace s -> new index perm[s]
  ModelConfig pcfg = cfg;
  for (std::size_t s = 0; s < 3; ++s) {
    pcfg.task_subspace[s] = perm[cfg.task_subspace[s]];
    pcfg.fold_order[s] = perm[cfg.fold_order[s]];
  }
  Model permuted(pcfg, 99);
  for (const ad::Parameter& p : base.parameters()) permuted.parameter(p.name).value = p.value;
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string from = std::to_string(s), to = std::to_string(perm[s]);
    permuted.parameter("proj." + to + ".weight").value = base.parameter("proj." + from + ".weight").value;
    permuted.parameter("proj." + to + ".bias").value = base.parameter("proj." + from + ".bias").value;
    permuted.parameter("curvature." + to + ".raw").value = base.parameter("curvature." + from + ".raw").value;
    for (std::size_t t = 0; t < 3; ++t) permuted.parameter("attention.logits").value.at(t, perm[s]) = logits.value.at(t, s);
  }
  const ad::Tensor x = random_batch(23, 4, 32);
  ad::Tape t1, t2;
  const auto a = base.forward(t1, x);
  const auto b = permuted.forward(t2, x);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_LE(max_abs_diff(a.predictions[t].value(), b.predictions[t].value()), 1e-9);
}

TEST(ModelGradients, EndToEndFiniteDifferences) {
  const ad::Tensor x = random_batch(31, 4, 32);
  hydra::Rng rng(32);
  std::array<ad::Tensor, 3> y;
  for (auto& t : y) {
    t = ad::Tensor({4});
    for (double& v : t.data()) v = rng.normal();
  }
  for (ModelKind kind : {ModelKind::euclidean, ModelKind::hyperbolic_single, ModelKind::hydra}) {
    Model m(small_config(kind), 33);
    if (kind == ModelKind::hydra) {
      for (double& v : m.parameter("attention.logits").value.data()) v = rng.normal();
    }
    auto build = [&](ad::Tape& tape) {
      const auto out = m.forward(tape, x);
      std::array<ad::Var, 3> targets;
      for (std::size_t t = 0; t < 3; ++t) targets[t] = tape.constant(y[t]);
      return hydra::objective::total_loss(out.predictions, targets, out.latents, 0.1).total;
    };
    const auto report = hydra::check::check_parameters(build, m.parameters(), hydra::check::kFiniteDifferenceStep, 60);
    EXPECT_LE(report.max_rel_error, 1e-4) << hydra::model::to_string(kind) << " worst at " << report.worst_input;
  }
}

TEST(ModelContainment, InstrumentedForwardCountsChecks) {
  Model m(small_config(ModelKind::hydra), 40);
  hydra::model::ForwardOptions opt;
  opt.check_containment = true;
  ad::Tape tape;
  const auto out = m.forward(tape, random_batch(41, 3, 32), opt);
  EXPECT_EQ(out.containment_checks, 3u + 3u * 3u * 2u);
}
