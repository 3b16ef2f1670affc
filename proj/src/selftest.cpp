#include "hydra/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <sstream>

#include "hydra/error.hpp"
#include "hydra/geometry.hpp"
#include "hydra/gradcheck.hpp"
#include "hydra/model.hpp"
#include "hydra/objective.hpp"
#include "hydra/rng.hpp"

namespace hydra::selftest {

bool SuiteResult::passed() const {
  return std::all_of(properties.begin(), properties.end(), [](const PropertyResult& p) { return p.passed(); });
}

std::size_t SuiteResult::checks() const {
  std::size_t n = 0;
  for (const PropertyResult& p : properties) n += p.checks;
  return n;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

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

// Random direction with norm uniform in [0, max_norm].
std::vector<double> random_vec(Rng& rng, std::size_t d, double max_norm) {
  std::vector<double> v(d);
  for (double& x : v) x = rng.normal();
  const double n = norm(v);
  const double target = rng.uniform(0.0, max_norm);
  for (double& x : v) x *= target / n;
  return v;
}

geo::BallPoint random_point(Rng& rng, std::size_t d, double c, double max_scaled) {
  return geo::BallPoint::project(random_vec(rng, d, max_scaled / std::sqrt(c)), c);
}

// Records one comparison of `error` against the property's tolerance.
void record(PropertyResult& p, double error, const std::string& context) {
  ++p.checks;
  p.worst = std::max(p.worst, error);
  if (!(error <= p.tolerance)) {
    if (p.failures == 0) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "error %.3e", error);
      p.detail = context + ": " + buf;
    }
    ++p.failures;
  }
}

// Runs `body` and converts a thrown library error into a failure.
void guarded(PropertyResult& p, const std::string& context, const std::function<void()>& body) {
  try {
    body();
  } catch (const Error& e) {
    ++p.checks;
    if (p.failures++ == 0) p.detail = context + ": " + e.what();
  }
}

constexpr std::size_t kDims[] = {2, 8, 128};

std::string case_name(std::size_t d, double c) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "d=%zu c=%.4g", d, c);
  return buf;
}

}  // namespace

SuiteResult geometry_suite(const Options& opt) {
  const auto t0 = Clock::now();
  Rng rng(Rng::derive_seed(opt.seed, 10));
  const std::size_t per = (opt.geometry_checks + 5) / 6;

  PropertyResult round_trip{"round_trip", 0, 0, 0.0, 1e-5, {}};
  PropertyResult identity{"left_identity", 0, 0, 0.0, 1e-9, {}};
  PropertyResult inverse{"left_inverse", 0, 0, 0.0, 1e-7, {}};
  PropertyResult distributive{"scalar_distributive", 0, 0, 0.0, 1e-6, {}};
  // Projected points sit exactly on the shrunken radius; evaluating sqrt(c)|x|
  // rounds by a few ulp either way.
  PropertyResult containment{"containment", 0, 0, 0.0, 16 * std::numeric_limits<double>::epsilon(), {}};
  PropertyResult limit{"euclidean_limit", 0, 0, 0.0, 1e-4, {}};

  for (std::size_t i = 0; i < per; ++i) {
    const std::size_t d = kDims[i % 3];
    const double c = rng.uniform(0.05, 4.0);
    const std::string ctx = case_name(d, c);

    guarded(round_trip, ctx, [&] {
      const geo::TangentVector v{random_vec(rng, d, 3.0)};
      geo::TangentVector back = geo::log_map0(geo::exp_map0(v, c));
      if (opt.inject_roundtrip_fault) back.coords[0] += 1e-3;
      // Relative form: error / max(1, |v|) against 1e-5.
      record(round_trip, dist(back.coords, v.coords) / std::max(1.0, norm(v.coords)), ctx);
    });

    guarded(identity, ctx, [&] {
      const geo::BallPoint x = random_point(rng, d, c, 0.99);
      record(identity, dist(geo::mobius_add(x, geo::BallPoint::origin(d, c)).coords(), x.coords()), ctx);
    });

    guarded(inverse, ctx, [&] {
      const geo::BallPoint x = random_point(rng, d, c, 0.99);
      record(inverse, norm(geo::mobius_add(-x, x).coords()), ctx);
    });

    guarded(distributive, ctx, [&] {
      const geo::BallPoint x = random_point(rng, d, c, 0.8);
      const double r1 = rng.uniform(-1.5, 1.5), r2 = rng.uniform(-1.5, 1.5);
      const geo::BallPoint lhs = geo::mobius_scalar(r1 + r2, x);
      const geo::BallPoint rhs = geo::mobius_add(geo::mobius_scalar(r1, x), geo::mobius_scalar(r2, x));
      record(distributive, dist(lhs.coords(), rhs.coords()), ctx);
    });

    guarded(containment, ctx, [&] {
      // Cycle through every point-producing op, with inputs up to and past the boundary.
      geo::BallPoint out = geo::BallPoint::origin(d, c);
      switch (i % 5) {
        case 0:
          out = geo::exp_map0(geo::TangentVector{random_vec(rng, d, 40.0)}, c);
          break;
        case 1:
          out = geo::mobius_add(random_point(rng, d, c, 1.0), random_point(rng, d, c, 1.0));
          break;
        case 2:
          out = geo::mobius_scalar(rng.uniform(-8.0, 8.0), random_point(rng, d, c, 1.0));
          break;
        case 3:
          out = geo::transport(random_point(rng, d, c, 1.0), rng.uniform(0.05, 4.0));
          break;
        default:
          out = geo::ball_project(random_vec(rng, d, 5.0 / std::sqrt(c)), c);
          break;
      }
      const double excess = std::sqrt(out.curvature()) * norm(out.coords()) - (1.0 - geo::kBallEps);
      record(containment, std::max(0.0, excess), ctx);
    });

    guarded(limit, ctx, [&] {
      const geo::TangentVector v{random_vec(rng, d, 1.0)};
      const double n = norm(v.coords);
      const double err = dist(geo::exp_map0(v, 1e-6).coords(), v.coords);
      record(limit, n > 0.0 ? err / n : err, case_name(d, 1e-6));
    });
  }

  SuiteResult suite{"geometry", {round_trip, identity, inverse, distributive, containment, limit}, 0.0};
  suite.seconds = seconds_since(t0);
  return suite;
}

namespace {

ad::Tensor random_rows(Rng& rng, std::size_t rows, std::size_t d, double c, double max_scaled) {
  ad::Tensor t({rows, d});
  for (std::size_t r = 0; r < rows; ++r) {
    const auto v = random_vec(rng, d, max_scaled / std::sqrt(c));
    std::copy(v.begin(), v.end(), t.data().begin() + r * d);
  }
  return t;
}

ad::Tensor normal_tensor(Rng& rng, ad::Shape shape) {
  ad::Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal();
  return t;
}

void record_grad(PropertyResult& p, const check::GradCheckReport& r, const std::string& ctx) {
  p.worst = std::max(p.worst, r.max_rel_error);
  p.checks += r.entries;
  if (!(r.max_rel_error <= p.tolerance)) {
    if (p.failures == 0) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "rel error %.3e at %s", r.max_rel_error, r.worst_input.c_str());
      p.detail = ctx + ": " + buf;
    }
    ++p.failures;
  }
}

void input_check(PropertyResult& p, const std::string& ctx, const check::LossBuilder& f,
                 std::vector<ad::Tensor> inputs) {
  guarded(p, ctx, [&] { record_grad(p, check::check_inputs(f, std::move(inputs)), ctx); });
}

constexpr double kGradTolerance = 1e-4;

}  // namespace

SuiteResult gradient_suite(const Options& opt) {
  const auto t0 = Clock::now();
  Rng rng(Rng::derive_seed(opt.seed, 11));
  using check::weighted_sum;
  SuiteResult suite{"gradient", {}, 0.0};

  auto property = [&](const char* name) -> PropertyResult& {
    suite.properties.push_back(PropertyResult{name, 0, 0, 0.0, kGradTolerance, {}});
    return suite.properties.back();
  };

  {
    constexpr int kTrials = 8;
    PropertyResult exp_p{"exp_map0", 0, 0, 0.0, kGradTolerance, {}};
    PropertyResult log_p = exp_p, add_p = exp_p, scalar_p = exp_p, transport_p = exp_p, project_p = exp_p;
    log_p.name = "log_map0";
    add_p.name = "mobius_add";
    scalar_p.name = "mobius_scalar";
    transport_p.name = "transport";
    project_p.name = "ball_project";
    for (int trial = 0; trial < kTrials; ++trial) {
      const double raw = rng.uniform(-2.0, 1.5);
      const double c = geo::curvature_from_raw(raw);
      const std::string ctx = "trial " + std::to_string(trial);
      const ad::Tensor craw = ad::Tensor::scalar(raw);
      // Small tangents on alternate trials exercise the series branches.
      const double tangent_norm = trial % 2 ? 2.0 : 1e-3;
      const ad::Tensor tangent = random_rows(rng, 3, 5, c, tangent_norm);
      const ad::Tensor pa = random_rows(rng, 3, 5, c, 0.9);
      const ad::Tensor pb = random_rows(rng, 3, 5, c, 0.9);
      const ad::Tensor r = ad::Tensor::scalar(rng.uniform(-1.5, 1.5));
      const ad::Tensor craw2 = ad::Tensor::scalar(rng.uniform(-2.0, 1.5));
      ad::Tensor outside = random_rows(rng, 2, 4, c, 3.0);
      for (double& v : outside.data()) v += 2.0 / std::sqrt(c);

      input_check(exp_p, ctx,
                  [](ad::Tape&, auto in) { return weighted_sum(geo::exp_map0(in[0], geo::curvature(in[1]))); },
                  {tangent, craw});
      input_check(log_p, ctx,
                  [](ad::Tape&, auto in) { return weighted_sum(geo::log_map0(in[0], geo::curvature(in[1]))); },
                  {pa, craw});
      input_check(add_p, ctx,
                  [](ad::Tape&, auto in) {
                    return weighted_sum(geo::mobius_add(in[0], in[1], geo::curvature(in[2])));
                  },
                  {pa, pb, craw});
      input_check(scalar_p, ctx,
                  [](ad::Tape&, auto in) {
                    return weighted_sum(geo::mobius_scalar(in[0], in[1], geo::curvature(in[2])));
                  },
                  {r, pa, craw});
      input_check(transport_p, ctx,
                  [](ad::Tape&, auto in) {
                    return weighted_sum(geo::transport(in[0], geo::curvature(in[1]), geo::curvature(in[2])));
                  },
                  {pa, craw, craw2});
      input_check(project_p, ctx,
                  [](ad::Tape&, auto in) { return weighted_sum(geo::ball_project(in[0], geo::curvature(in[1]))); },
                  {outside, craw});
    }
    for (PropertyResult* p : {&exp_p, &log_p, &add_p, &scalar_p, &transport_p, &project_p})
      suite.properties.push_back(std::move(*p));
  }

  {
    PropertyResult& p = property("tape_primitives");
    input_check(p, "conv1d/maxpool1d/relu",
                [](ad::Tape&, auto in) {
                  return weighted_sum(ad::relu(ad::maxpool1d(ad::conv1d(in[0], in[1], in[2]))));
                },
                {normal_tensor(rng, {2, 2, 8}), normal_tensor(rng, {3, 2, 3}), normal_tensor(rng, {3})});
    input_check(p, "matmul/softmax",
                [](ad::Tape&, auto in) { return weighted_sum(ad::softmax(ad::matmul(in[0], in[1]))); },
                {normal_tensor(rng, {3, 4}), normal_tensor(rng, {4, 5})});
    input_check(p, "tanh/softplus/l2_norm",
                [](ad::Tape&, auto in) { return weighted_sum(ad::l2_norm(ad::tanh(ad::softplus(in[0])))); },
                {normal_tensor(rng, {3, 4})});
    input_check(p, "mean_rows/div/sqrt",
                [](ad::Tape&, auto in) {
                  ad::Var centred = ad::sub(in[0], ad::mean_rows(in[0]));
                  return weighted_sum(ad::div(centred, ad::sqrt(ad::add_scalar(ad::square(in[1]), 1.0))));
                },
                {normal_tensor(rng, {4, 3}), normal_tensor(rng, {3})});
  }

  {
    PropertyResult& p = property("htc_loss");
    for (std::size_t k : {2u, 3u}) {
      std::vector<ad::Tensor> latents;
      for (std::size_t i = 0; i < k; ++i) latents.push_back(normal_tensor(rng, {6, 4}));
      input_check(p, "K=" + std::to_string(k),
                  [](ad::Tape&, std::span<const ad::Var> u) { return objective::htc_loss(u); }, latents);
    }
  }

  {
    const std::size_t batch = 4, d = 32;
    const ad::Tensor x = normal_tensor(rng, {batch, d});
    std::array<ad::Tensor, model::kNumTasks> y;
    for (ad::Tensor& t : y) t = normal_tensor(rng, {batch});
    for (model::ModelKind kind :
         {model::ModelKind::euclidean, model::ModelKind::hyperbolic_single, model::ModelKind::hydra}) {
      PropertyResult& p = property(("model_" + std::string(model::to_string(kind))).c_str());
      model::ModelConfig cfg;
      cfg.kind = kind;
      cfg.input_dim = d;
      cfg.hidden_dim = 8;
      model::Model m(cfg, Rng::derive_seed(opt.seed, 12));
      if (kind == model::ModelKind::hydra) {
        for (double& v : m.parameter("attention.logits").value.data()) v = rng.normal();
      }
      auto build = [&](ad::Tape& tape) {
        const model::ModelOutput out = m.forward(tape, x);
        std::array<ad::Var, model::kNumTasks> targets;
        for (std::size_t t = 0; t < model::kNumTasks; ++t) targets[t] = tape.constant(y[t]);
        return objective::total_loss(out.predictions, targets, out.latents).total;
      };
      guarded(p, "parameters", [&] {
        record_grad(p, check::check_parameters(build, m.parameters(), check::kFiniteDifferenceStep, 40), "parameters");
      });
    }
  }

  suite.seconds = seconds_since(t0);
  return suite;
}

namespace {

ad::Tensor correlated(const ad::Tensor& u, const ad::Tensor& eps, double rho) {
  ad::Tensor v(u.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = rho * u[i] + std::sqrt(1.0 - rho * rho) * eps[i];
  return v;
}

}  // namespace

SuiteResult objective_suite(const Options& opt) {
  const auto t0 = Clock::now();
  Rng rng(Rng::derive_seed(opt.seed, 13));
  SuiteResult suite{"objective", {}, 0.0};

  {
    PropertyResult p{"htc_independent_near_zero", 0, 0, 0.0, 0.005, {}};
    guarded(p, "B=4096 d=8 K=3", [&] {
      std::vector<ad::Tensor> latents;
      for (int k = 0; k < 3; ++k) latents.push_back(normal_tensor(rng, {4096, 8}));
      record(p, objective::htc_value(latents), "B=4096 d=8 K=3");
    });
    suite.properties.push_back(p);
  }

  {
    PropertyResult p{"htc_increasing_in_correlation", 0, 0, 0.0, 0.0, {}};
    guarded(p, "rho sweep", [&] {
      const ad::Tensor u = normal_tensor(rng, {4096, 8});
      const ad::Tensor eps = normal_tensor(rng, {4096, 8});
      double previous = -1.0;
      for (double rho : {0.0, 0.5, 0.9}) {
        const double h = objective::htc_value(std::vector<ad::Tensor>{u, correlated(u, eps, rho)});
        // Error is the shortfall below a strict increase.
        record(p, h > previous ? 0.0 : previous - h + 1.0, "rho=" + std::to_string(rho));
        previous = h;
      }
    });
    suite.properties.push_back(p);
  }

  {
    PropertyResult p{"htc_affine_invariance", 0, 0, 0.0, 1e-9, {}};
    for (int trial = 0; trial < 20; ++trial) {
      guarded(p, "trial " + std::to_string(trial), [&] {
        std::vector<ad::Tensor> latents;
        for (int k = 0; k < 3; ++k) latents.push_back(normal_tensor(rng, {32, 4}));
        const double base = objective::htc_value(latents);
        ad::Tensor& u = latents[static_cast<std::size_t>(trial) % 3];
        for (std::size_t j = 0; j < 4; ++j) {
          double a = rng.uniform(0.1, 10.0);
          if (rng.uniform() < 0.5) a = -a;
          const double b = rng.uniform(-50.0, 50.0);
          for (std::size_t r = 0; r < 32; ++r) u.at(r, j) = a * u.at(r, j) + b;
        }
        record(p, std::abs(objective::htc_value(latents) - base), "trial " + std::to_string(trial));
      });
    }
    suite.properties.push_back(p);
  }

  {
    PropertyResult p{"htc_pair_symmetry", 0, 0, 0.0, 1e-12, {}};
    for (int trial = 0; trial < 20; ++trial) {
      guarded(p, "trial " + std::to_string(trial), [&] {
        std::vector<ad::Tensor> latents;
        for (int k = 0; k < 3; ++k) latents.push_back(normal_tensor(rng, {16, 5}));
        const double a = objective::htc_value(latents);
        std::swap(latents[0], latents[2]);
        record(p, std::abs(objective::htc_value(latents) - a), "trial " + std::to_string(trial));
      });
    }
    suite.properties.push_back(p);
  }

  {
    PropertyResult p{"zero_weight_is_mse_sum", 0, 0, 0.0, 0.0, {}};
    for (int trial = 0; trial < 20; ++trial) {
      guarded(p, "trial " + std::to_string(trial), [&] {
        ad::Tape tape;
        std::array<ad::Var, model::kNumTasks> preds, targets;
        for (std::size_t t = 0; t < model::kNumTasks; ++t) {
          preds[t] = tape.constant(normal_tensor(rng, {8}));
          targets[t] = tape.constant(normal_tensor(rng, {8}));
        }
        std::vector<ad::Var> latents;
        for (int k = 0; k < 3; ++k) latents.push_back(tape.constant(normal_tensor(rng, {8, 4})));
        const objective::LossBreakdown b = objective::total_loss(preds, targets, latents, 0.0).values();
        record(p, std::abs(b.total - (b.mse_sr + b.mse_bps + b.mse_q)), "trial " + std::to_string(trial));
      });
    }
    suite.properties.push_back(p);
  }

  suite.seconds = seconds_since(t0);
  return suite;
}

std::vector<SuiteResult> run_all(const Options& opt) {
  return {geometry_suite(opt), gradient_suite(opt), objective_suite(opt)};
}

std::string format(const SuiteResult& suite) {
  std::ostringstream os;
  char line[512];
  for (const PropertyResult& p : suite.properties) {
    std::snprintf(line, sizeof line, "%s %s/%s checks=%zu worst=%.3e tol=%.1e", p.passed() ? "PASS" : "FAIL",
                  suite.name.c_str(), p.name.c_str(), p.checks, p.worst, p.tolerance);
    os << line;
    if (!p.passed()) os << " failures=" << p.failures << (p.detail.empty() ? "" : " first: " + p.detail);
    os << "\n";
  }
  std::snprintf(line, sizeof line, "%s %s: %zu checks in %.1f s\n", suite.passed() ? "PASS" : "FAIL",
                suite.name.c_str(), suite.checks(), suite.seconds);
  os << line;
  return os.str();
}

}  // namespace hydra::selftest
