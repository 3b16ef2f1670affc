#include "hydra/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "hydra/rng.hpp"

namespace hydra::check {

double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), kRelativeErrorFloor});
  return std::abs(analytic - numeric) / scale;
}

namespace {

double evaluate(const LossBuilder& build, const std::vector<ad::Tensor>& inputs) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const ad::Tensor& t : inputs) vars.push_back(tape.constant(t));
  return build(tape, vars).value().item();
}

// Central difference at `step`, retried at step / 10 on disagreement.
template <typename Eval>
double compare(double analytic, double step, Eval&& eval, GradCheckReport& report) {
  const double err = relative_error(analytic, (eval(step) - eval(-step)) / (2.0 * step));
  if (err <= 1e-6) return err;
  const double fine = step / 10.0;
  const double err_fine = relative_error(analytic, (eval(fine) - eval(-fine)) / (2.0 * fine));
  if (err_fine < err) ++report.refined;
  return std::min(err, err_fine);
}

}  // namespace

GradCheckReport check_inputs(const LossBuilder& build, std::vector<ad::Tensor> inputs, double step) {
  std::vector<ad::Tensor> analytic;
  {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const ad::Tensor& t : inputs) vars.push_back(tape.variable(t));
    ad::Var loss = build(tape, vars);
    tape.backward(loss);
    for (const ad::Var& v : vars) analytic.push_back(tape.grad(v).empty() ? ad::Tensor(v.shape()) : tape.grad(v));
  }
  GradCheckReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double saved = inputs[k][i];
      auto eval = [&](double delta) {
        inputs[k][i] = saved + delta;
        const double v = evaluate(build, inputs);
        inputs[k][i] = saved;
        return v;
      };
      const double err = compare(analytic[k][i], step, eval, report);
      ++report.entries;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_input = "input[" + std::to_string(k) + "][" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

GradCheckReport check_parameters(const ParamLossBuilder& build, std::span<ad::Parameter> params, double step,
                                 std::size_t max_entries_per_param) {
  for (ad::Parameter& p : params) p.zero_grad();
  {
    ad::Tape tape;
    tape.backward(build(tape));
  }
  std::vector<ad::Tensor> analytic;
  for (ad::Parameter& p : params) analytic.push_back(p.grad);

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    ad::Parameter& p = params[k];
    const std::size_t n = p.value.numel();
    std::size_t stride = 1;
    if (max_entries_per_param > 0 && n > max_entries_per_param) stride = (n + max_entries_per_param - 1) / max_entries_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = p.value[i];
      auto eval = [&](double delta) {
        p.value[i] = saved + delta;
        ad::Tape tape;
        const double v = build(tape).value().item();
        p.value[i] = saved;
        return v;
      };
      const double err = compare(analytic[k][i], step, eval, report);
      ++report.entries;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_input = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

ad::Var weighted_sum(ad::Var out, std::uint64_t seed) {
  Rng rng(seed);
  ad::Tensor w(out.shape());
  for (double& v : w.data()) v = rng.uniform(-1.0, 1.0);
  return ad::sum(ad::mul(out, out.tape().constant(std::move(w))));
}

}  // namespace hydra::check
