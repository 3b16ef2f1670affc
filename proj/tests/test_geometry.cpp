#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "hydra/error.hpp"
#include "hydra/geometry.hpp"
#include "hydra/gradcheck.hpp"
#include "hydra/rng.hpp"

namespace geo = hydra::geo;
namespace ad = hydra::ad;

namespace {

// Frozen with a 30-digit mpmath evaluation.
constexpr double kTanhHalf = 0.462117157260009758502;
constexpr double kLogOfRounded = 0.500000000050849204368;   // atanh(0.4621171573)
constexpr double kTransportQuarter = 0.489837324855217265712;  // c: 1 -> 0.25

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::vector<double> random_vec(hydra::Rng& rng, std::size_t d, double max_norm) {
  std::vector<double> v(d);
  for (double& x : v) x = rng.normal();
  const double target = rng.uniform(0.0, max_norm);
  const double n = norm(v);
  for (double& x : v) x *= target / n;
  return v;
}

geo::BallPoint random_point(hydra::Rng& rng, std::size_t d, double c, double max_scaled = 0.95) {
  std::vector<double> v = random_vec(rng, d, max_scaled / std::sqrt(c));
  return geo::BallPoint::project(std::move(v), c);
}

}  // namespace

TEST(Curvature, SoftplusFloorAndInverse) {
  EXPECT_NEAR(geo::curvature_from_raw(-200.0), 1e-3, 1e-15);
  EXPECT_GT(geo::curvature_from_raw(-1e6), 0.0);
  const geo::Curvature unit = geo::Curvature::from_value(1.0);
  EXPECT_NEAR(unit.value(), 1.0, 1e-14);
  EXPECT_NEAR(geo::Curvature::from_value(50.0).value(), 50.0, 1e-12);
  EXPECT_THROW(geo::Curvature::from_value(1e-3), hydra::InvalidInputError);
}

TEST(ExpMap, Examples) {
  EXPECT_EQ(geo::exp_map0({{0.0, 0.0}}, 1.0).coords(), (std::vector<double>{0.0, 0.0}));
  const auto p = geo::exp_map0({{0.5, 0.0}}, 1.0);
  EXPECT_NEAR(p.coords()[0], kTanhHalf, 1e-15);
  EXPECT_EQ(p.coords()[1], 0.0);
  const auto flat = geo::exp_map0({{0.3, 0.4}}, 1e-8);
  EXPECT_NEAR(flat.coords()[0], 0.3, 1e-7);
  EXPECT_NEAR(flat.coords()[1], 0.4, 1e-7);
}

TEST(ExpMap, RejectsNonFinite) {
  EXPECT_THROW(geo::exp_map0({{NAN, 0.0}}, 1.0), hydra::InvalidInputError);
  EXPECT_THROW(geo::exp_map0({{0.1, 0.0}}, 0.0), hydra::InvalidInputError);
}

TEST(LogMap, Examples) {
  const auto y = geo::BallPoint::checked({0.4621171573, 0.0}, 1.0);
  const auto v = geo::log_map0(y);
  EXPECT_NEAR(v.coords[0], kLogOfRounded, 1e-13);
  EXPECT_NEAR(v.coords[0], 0.5, 1e-9);
  EXPECT_EQ(geo::log_map0(geo::BallPoint::origin(2, 1.0)).coords, (std::vector<double>{0.0, 0.0}));
}

TEST(LogMap, BoundaryIsDomainError) {
  EXPECT_THROW(geo::BallPoint::checked({1.0, 0.0}, 1.0), hydra::DomainError);
  EXPECT_THROW(geo::BallPoint::checked({0.6, 0.0}, 4.0), hydra::DomainError);
}

TEST(LogMap, ClampCountsWarnings) {
  const auto before = geo::clamp_warning_count();
  std::vector<double> out(2);
  geo::kernel::log_map0(std::vector<double>{0.999999, 0.0}, 1.0, out);
  EXPECT_EQ(geo::clamp_warning_count(), before + 1);
  EXPECT_NEAR(out[0], std::atanh(1.0 - geo::kBallEps) / 0.999999 * 0.999999, 1e-12);
}

TEST(MobiusAdd, Examples) {
  const auto x = geo::BallPoint::checked({0.3, 0.0}, 1.0);
  const auto y = geo::BallPoint::checked({0.4, 0.0}, 1.0);
  EXPECT_NEAR(geo::mobius_add(x, y).coords()[0], 0.625, 1e-15);

  hydra::Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const double c = rng.uniform(0.05, 4.0);
    const auto p = random_point(rng, 8, c);
    EXPECT_LE(dist(geo::mobius_add(p, geo::BallPoint::origin(8, c)).coords(), p.coords()), 1e-9);
    EXPECT_LE(norm(geo::mobius_add(-p, p).coords()), 1e-7);
  }
}

TEST(MobiusAdd, MixedCurvaturesRejected) {
  EXPECT_THROW(geo::mobius_add(geo::BallPoint::origin(2, 1.0), geo::BallPoint::origin(2, 2.0)),
               hydra::InvalidInputError);
}

TEST(MobiusScalar, Examples) {
  const auto x = geo::BallPoint::checked({0.3, 0.0}, 1.0);
  EXPECT_NEAR(geo::mobius_scalar(2.0, x).coords()[0], 0.6 / 1.09, 1e-15);
  EXPECT_NEAR(geo::mobius_scalar(1.0, x).coords()[0], 0.3, 1e-15);
  EXPECT_EQ(geo::mobius_scalar(0.0, x).coords(), (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(geo::mobius_scalar(3.0, geo::BallPoint::origin(2, 1.0)).coords(), (std::vector<double>{0.0, 0.0}));
}

TEST(Transport, Examples) {
  const auto x = geo::BallPoint::checked({0.4621171573, 0.0}, 1.0);
  EXPECT_EQ(geo::transport(x, 1.0).coords(), x.coords());
  EXPECT_EQ(geo::transport(geo::BallPoint::origin(3, 1.0), 0.25).coords(), (std::vector<double>(3, 0.0)));
  const auto moved = geo::transport(x, 0.25);
  EXPECT_NEAR(moved.coords()[0], kTransportQuarter, 1e-12);
  EXPECT_EQ(moved.curvature(), 0.25);
}

TEST(BallProject, Examples) {
  EXPECT_EQ(geo::ball_project(std::vector<double>{0.2, 0.1}, 1.0).coords(), (std::vector<double>{0.2, 0.1}));
  EXPECT_NEAR(geo::ball_project(std::vector<double>{2.0, 0.0}, 1.0).coords()[0], 0.99999, 1e-15);
  EXPECT_NEAR(geo::ball_project(std::vector<double>{1.0, 0.0}, 4.0).coords()[0], 0.499995, 1e-15);
}

TEST(GeometryProperties, RoundTripContainmentAndLimits) {
  hydra::Rng rng(11);
  for (std::size_t d : {2u, 8u, 128u}) {
    for (int i = 0; i < 200; ++i) {
      const double c = rng.uniform(0.05, 4.0);
      geo::TangentVector v{random_vec(rng, d, 3.0)};
      const auto p = geo::exp_map0(v, c);
      EXPECT_LE(std::sqrt(c) * norm(p.coords()), 1.0 - geo::kBallEps);
      const auto back = geo::log_map0(p);
      EXPECT_LE(dist(back.coords, v.coords), 1e-5 * std::max(1.0, norm(v.coords)));

      geo::TangentVector small{random_vec(rng, d, 1.0)};
      EXPECT_LE(dist(geo::exp_map0(small, 1e-6).coords(), small.coords), 1e-4 * norm(small.coords) + 1e-300);
    }
  }
}

TEST(GeometryProperties, ScalarDistributive) {
  hydra::Rng rng(12);
  for (int i = 0; i < 300; ++i) {
    const double c = rng.uniform(0.05, 4.0);
    const auto x = random_point(rng, 8, c, 0.8);
    const double r1 = rng.uniform(-1.5, 1.5), r2 = rng.uniform(-1.5, 1.5);
    const auto lhs = geo::mobius_scalar(r1 + r2, x);
    const auto rhs = geo::mobius_add(geo::mobius_scalar(r1, x), geo::mobius_scalar(r2, x));
    EXPECT_LE(dist(lhs.coords(), rhs.coords()), 1e-6);
  }
}

// --- tape ops agree with the value API and with finite differences -----------

namespace {

ad::Tensor random_rows(hydra::Rng& rng, std::size_t rows, std::size_t d, double c, double max_scaled) {
  ad::Tensor t({rows, d});
  for (std::size_t r = 0; r < rows; ++r) {
    auto v = random_vec(rng, d, max_scaled / std::sqrt(c));
    std::copy(v.begin(), v.end(), t.data().begin() + r * d);
  }
  return t;
}

double max_fd_error(const hydra::check::LossBuilder& f, std::vector<ad::Tensor> inputs) {
  return hydra::check::check_inputs(f, std::move(inputs)).max_rel_error;
}

}  // namespace

TEST(GeometryTape, ForwardMatchesValueApi) {
  hydra::Rng rng(5);
  ad::Tape tape;
  const double c = 0.7;
  ad::Tensor v = random_rows(rng, 3, 4, c, 2.5);
  ad::Var cv = tape.constant(ad::Tensor::scalar(c));
  ad::Var p = geo::exp_map0(tape.constant(v), cv);
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> row(v.data().begin() + r * 4, v.data().begin() + r * 4 + 4);
    const auto expected = geo::exp_map0({row}, c);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(p.value().at(r, i), expected.coords()[i]);
  }
}

TEST(GeometryTape, GradientsMatchFiniteDifferences) {
  hydra::Rng rng(21);
  using hydra::check::weighted_sum;
  for (int trial = 0; trial < 10; ++trial) {
    const double raw = rng.uniform(-2.0, 1.5);
    const double c = geo::curvature_from_raw(raw);
    ad::Tensor craw = ad::Tensor::scalar(raw);
    ad::Tensor tangent = random_rows(rng, 3, 5, c, 2.0);
    ad::Tensor pa = random_rows(rng, 3, 5, c, 0.9);
    ad::Tensor pb = random_rows(rng, 3, 5, c, 0.9);
    ad::Tensor r = ad::Tensor::scalar(rng.uniform(-1.5, 1.5));

    EXPECT_LE(max_fd_error([](ad::Tape&, auto in) { return weighted_sum(geo::exp_map0(in[0], geo::curvature(in[1]))); },
                           {tangent, craw}),
              1e-4);
    EXPECT_LE(max_fd_error([](ad::Tape&, auto in) { return weighted_sum(geo::log_map0(in[0], geo::curvature(in[1]))); },
                           {pa, craw}),
              1e-4);
    EXPECT_LE(max_fd_error([](ad::Tape&, auto in) {
                return weighted_sum(geo::mobius_add(in[0], in[1], geo::curvature(in[2])));
              },
                           {pa, pb, craw}),
              1e-4);
    EXPECT_LE(max_fd_error([](ad::Tape&, auto in) {
                return weighted_sum(geo::mobius_scalar(in[0], in[1], geo::curvature(in[2])));
              },
                           {r, pa, craw}),
              1e-4);
    ad::Tensor craw2 = ad::Tensor::scalar(rng.uniform(-2.0, 1.5));
    EXPECT_LE(max_fd_error([](ad::Tape&, auto in) {
                return weighted_sum(geo::transport(in[0], geo::curvature(in[1]), geo::curvature(in[2])));
              },
                           {pa, craw, craw2}),
              1e-4);
  }
}

TEST(GeometryTape, ProjectionGradientOutsideBall) {
  // Rows well outside the ball exercise the rescaling branch.
  ad::Tensor outside({2, 3}, std::vector<double>{2.0, -1.0, 0.5, 0.3, 3.0, -2.0});
  const double err = max_fd_error(
      [](ad::Tape&, auto in) { return hydra::check::weighted_sum(geo::ball_project(in[0], geo::curvature(in[1]))); },
      {outside, ad::Tensor::scalar(0.4)});
  EXPECT_LE(err, 1e-4);
}

TEST(GeometryTape, SmallNormSeriesBranch) {
  hydra::Rng rng(8);
  ad::Tensor tiny = random_rows(rng, 2, 3, 1.0, 1e-3);
  const double err = max_fd_error(
      [](ad::Tape&, auto in) {
        ad::Var c = geo::curvature(in[1]);
        return hydra::check::weighted_sum(geo::log_map0(geo::exp_map0(in[0], c), c));
      },
      {tiny, ad::Tensor::scalar(0.3)});
  EXPECT_LE(err, 1e-4);
}

TEST(GeometryTape, TransportSameCurvatureIsIdentityNode) {
  ad::Tape tape;
  ad::Var x = tape.constant(ad::Tensor({1, 2}, std::vector<double>{0.1, 0.2}));
  ad::Var c = tape.constant(ad::Tensor::scalar(1.0));
  EXPECT_EQ(geo::transport(x, c, c).id(), x.id());
}
