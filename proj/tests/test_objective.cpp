#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "hydra/error.hpp"
#include "hydra/gradcheck.hpp"
#include "hydra/objective.hpp"
#include "hydra/rng.hpp"

namespace ad = hydra::ad;
namespace obj = hydra::objective;

namespace {

ad::Tensor normal_matrix(hydra::Rng& rng, std::size_t rows, std::size_t cols) {
  ad::Tensor t({rows, cols});
  for (double& v : t.data()) v = rng.normal();
  return t;
}

ad::Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t cols = rows.begin()->size();
  ad::Tensor t({rows.size(), cols});
  std::size_t i = 0;
  for (const auto& r : rows)
    for (double v : r) t[i++] = v;
  return t;
}

const std::vector<ad::Tensor>& fixture_latents() {
  static const std::vector<ad::Tensor> latents{
      from_rows({{1.0, 2.0}, {-0.5, 0.3}, {2.0, -1.0}, {0.25, 0.75}}),
      from_rows({{0.3, -1.2}, {1.1, 0.4}, {-0.7, 0.9}, {0.2, 0.0}}),
      from_rows({{2.0, 0.5}, {1.5, -0.5}, {-1.0, 1.0}, {0.0, 0.1}}),
  };
  return latents;
}

}  // namespace

TEST(Mse, Examples) {
  const std::vector<double> a{1.5, -2.0}, zero{0.0, 0.0}, target{3.0, 4.0};
  EXPECT_EQ(obj::mse(a, a), 0.0);
  EXPECT_DOUBLE_EQ(obj::mse(zero, target), 12.5);
  EXPECT_EQ(obj::mse(std::vector<double>{1.0}, std::vector<double>{0.0}), 1.0);
  EXPECT_THROW(obj::mse(std::vector<double>{}, std::vector<double>{}), hydra::UsageError);
  EXPECT_THROW(obj::mse(a, std::vector<double>{1.0}), hydra::UsageError);

  ad::Tape tape;
  const ad::Var p = tape.constant(ad::Tensor::vector({0.0, 0.0}));
  EXPECT_DOUBLE_EQ(obj::mse(p, tape.constant(ad::Tensor::vector({3.0, 4.0}))).value().item(), 12.5);
  EXPECT_THROW(obj::mse(p, tape.constant(ad::Tensor::vector({1.0, 2.0, 3.0}))), hydra::ShapeError);
}

TEST(Htc, FixtureMatchesReference) {
  // numpy reference: sum over pairs of ||corr||_F^2 / d^2
  EXPECT_NEAR(obj::htc_value(fixture_latents()), 1.545111903211378, 1e-12);
}

TEST(Htc, IndependentLatentsNearZero) {
  hydra::Rng rng(4096);
  std::vector<ad::Tensor> latents;
  for (int k = 0; k < 3; ++k) latents.push_back(normal_matrix(rng, 4096, 8));
  const double v = obj::htc_value(latents);
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, 0.005);
}

TEST(Htc, IdenticalLatentsGiveInverseDim) {
  // Orthogonal +-1 columns: the correlation matrix is exactly the identity.
  const std::size_t d = 4;
  const ad::Tensor u = from_rows({{1, 1, 1, 1}, {1, -1, 1, -1}, {1, 1, -1, -1}, {1, -1, -1, 1},
                                  {-1, -1, -1, -1}, {-1, 1, -1, 1}, {-1, -1, 1, 1}, {-1, 1, 1, -1}});
  EXPECT_NEAR(obj::htc_value(std::vector<ad::Tensor>{u, u}), 1.0 / d, 1e-15);

  hydra::Rng rng(3);
  const ad::Tensor r = normal_matrix(rng, 500, 16);
  const double v = obj::htc_value(std::vector<ad::Tensor>{r, r});
  EXPECT_GT(v, 1.0 / 16.0 - 1e-12);
}

TEST(Htc, ZeroVarianceLatentContributesNothing) {
  hydra::Rng rng(5);
  const ad::Tensor a = normal_matrix(rng, 64, 6);
  ad::Tensor flat({64, 6});
  for (std::size_t i = 0; i < flat.numel(); ++i) flat[i] = 0.75 * static_cast<double>(i % 6);
  EXPECT_EQ(obj::htc_value(std::vector<ad::Tensor>{a, flat}), 0.0);
  EXPECT_EQ(obj::htc_value(std::vector<ad::Tensor>{flat, flat}), 0.0);
}

TEST(Htc, SymmetricUnderLatentPermutation) {
  const auto& l = fixture_latents();
  const double base = obj::htc_value(l);
  EXPECT_NEAR(obj::htc_value(std::vector<ad::Tensor>{l[2], l[0], l[1]}), base, 1e-12);
  EXPECT_NEAR(obj::htc_value(std::vector<ad::Tensor>{l[1], l[2], l[0]}), base, 1e-12);
}

TEST(Htc, AffineInvariantPerDimension) {
  hydra::Rng rng(6);
  std::vector<ad::Tensor> latents;
  for (int k = 0; k < 3; ++k) latents.push_back(normal_matrix(rng, 64, 5));
  const double base = obj::htc_value(latents);
  ad::Tensor& u = latents[1];
  const double scales[] = {3.0, -0.2, 17.0, 0.01, -5.0};
  const double shifts[] = {100.0, -4.0, 0.5, 9.0, 0.0};
  for (std::size_t b = 0; b < 64; ++b)
    for (std::size_t j = 0; j < 5; ++j) u.at(b, j) = scales[j] * u.at(b, j) + shifts[j];
  EXPECT_NEAR(obj::htc_value(latents), base, 1e-9);
}

TEST(Htc, StrictlyIncreasingInCorrelation) {
  const std::size_t batch = 4096, d = 8;
  hydra::Rng rng(2024);
  const ad::Tensor u = normal_matrix(rng, batch, d);
  const ad::Tensor eps = normal_matrix(rng, batch, d);
  double previous = -1.0;
  for (double rho : {0.0, 0.5, 0.9}) {
    ad::Tensor v({batch, d});
    for (std::size_t i = 0; i < v.numel(); ++i) v[i] = rho * u[i] + std::sqrt(1.0 - rho * rho) * eps[i];
    const double h = obj::htc_value(std::vector<ad::Tensor>{u, v});
    EXPECT_GT(h, previous) << "rho " << rho;
    previous = h;
  }
}

TEST(Htc, RejectsDegenerateInput) {
  hydra::Rng rng(7);
  EXPECT_THROW(obj::htc_value(std::vector<ad::Tensor>{normal_matrix(rng, 4, 2)}), hydra::UsageError);
  EXPECT_THROW(obj::htc_value(std::vector<ad::Tensor>{normal_matrix(rng, 1, 2), normal_matrix(rng, 1, 2)}),
               hydra::UsageError);
  EXPECT_THROW(obj::htc_value(std::vector<ad::Tensor>{normal_matrix(rng, 4, 2), normal_matrix(rng, 4, 3)}),
               hydra::ShapeError);
}

TEST(Htc, GradientMatchesFiniteDifferences) {
  hydra::Rng rng(8);
  std::vector<ad::Tensor> inputs;
  for (int k = 0; k < 3; ++k) inputs.push_back(normal_matrix(rng, 6, 4));
  const auto f = [](ad::Tape&, std::span<const ad::Var> u) { return obj::htc_loss(u); };
  EXPECT_LE(hydra::check::check_inputs(f, inputs).max_rel_error, 1e-4);
}

namespace {

struct Batch {
  std::array<ad::Tensor, 3> preds{ad::Tensor::vector({0.1, -0.2, 0.3, 0.4}), ad::Tensor::vector({1.0, 0.0, -1.0, 0.5}),
                                  ad::Tensor::vector({0.0, 0.0, 0.0, 0.0})};
  std::array<ad::Tensor, 3> targets{ad::Tensor::vector({0.0, 0.0, 0.5, 0.5}), ad::Tensor::vector({1.0, 1.0, -1.0, -0.5}),
                                    ad::Tensor::vector({1.0, -1.0, 2.0, 0.0})};
};

obj::LossTerms build_terms(ad::Tape& tape, const Batch& b, double weight, bool with_latents) {
  std::array<ad::Var, 3> p, t;
  for (std::size_t i = 0; i < 3; ++i) {
    p[i] = tape.constant(b.preds[i]);
    t[i] = tape.constant(b.targets[i]);
  }
  std::vector<ad::Var> latents;
  if (with_latents)
    for (const ad::Tensor& u : fixture_latents()) latents.push_back(tape.constant(u));
  return obj::total_loss(p, t, latents, weight);
}

}  // namespace

TEST(TotalLoss, GoldenBreakdown) {
  // numpy reference for the fixture batch and latents
  ad::Tape tape;
  const obj::LossBreakdown b = build_terms(tape, Batch{}, obj::kDefaultHtcWeight, true).values();
  EXPECT_NEAR(b.mse_sr, 0.025, 1e-15);
  EXPECT_NEAR(b.mse_bps, 0.5, 1e-15);
  EXPECT_NEAR(b.mse_q, 1.5, 1e-15);
  EXPECT_NEAR(b.htc, 1.545111903211378, 1e-12);
  EXPECT_NEAR(b.total, 2.1795111903211377, 1e-12);
}

TEST(TotalLoss, ZeroWeightIsExactlyMseSum) {
  ad::Tape tape;
  const obj::LossBreakdown b = build_terms(tape, Batch{}, 0.0, true).values();
  EXPECT_EQ(b.total, b.mse_sr + b.mse_bps + b.mse_q);
  EXPECT_GT(b.htc, 0.0);
}

TEST(TotalLoss, BaselinesHaveNoHtcTerm) {
  ad::Tape tape;
  const obj::LossTerms terms = build_terms(tape, Batch{}, 0.1, false);
  EXPECT_FALSE(terms.htc.valid());
  const obj::LossBreakdown b = terms.values();
  EXPECT_EQ(b.htc, 0.0);
  EXPECT_EQ(b.total, b.mse_sr + b.mse_bps + b.mse_q);
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
  hydra::Rng rng(9);
  std::vector<ad::Tensor> inputs;
  for (int k = 0; k < 6; ++k) inputs.push_back(normal_matrix(rng, 5, 1).reshaped({5}));
  for (int k = 0; k < 3; ++k) inputs.push_back(normal_matrix(rng, 5, 3));
  const auto f = [](ad::Tape&, std::span<const ad::Var> v) {
    const std::array<ad::Var, 3> p{v[0], v[1], v[2]}, t{v[3], v[4], v[5]};
    return obj::total_loss(p, t, v.subspan(6), 0.1).total;
  };
  EXPECT_LE(hydra::check::check_inputs(f, inputs).max_rel_error, 1e-4);
}
