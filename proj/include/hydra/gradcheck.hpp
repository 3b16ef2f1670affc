#pragma once

// Central finite-difference checking of tape gradients.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hydra/tape.hpp"

namespace hydra::check {

// Builds a scalar loss from leaf variables on a fresh tape.
using LossBuilder = std::function<ad::Var(ad::Tape&, std::span<const ad::Var>)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_input;  // "input[k][i]" or the parameter name
  std::size_t entries = 0;
  // Entries whose difference quotient at `step` straddled a kink (ReLU, max
  // pool, clamp) and were judged at step / 10 instead.
  std::size_t refined = 0;
};

inline constexpr double kFiniteDifferenceStep = 1e-5;
// Gradients smaller than this are compared on an absolute scale.
inline constexpr double kRelativeErrorFloor = 1e-3;

double relative_error(double analytic, double numeric);

// Compares analytic gradients of every input against central differences.
GradCheckReport check_inputs(const LossBuilder& build, std::vector<ad::Tensor> inputs,
                             double step = kFiniteDifferenceStep);

// Same for a parameter set; `build` must register the parameters on the tape
// itself. Parameters are perturbed in place and restored.
using ParamLossBuilder = std::function<ad::Var(ad::Tape&)>;
GradCheckReport check_parameters(const ParamLossBuilder& build, std::span<ad::Parameter> params,
                                 double step = kFiniteDifferenceStep, std::size_t max_entries_per_param = 0);

// Sum of out * weights with fixed pseudo-random weights, so every output
// coordinate contributes to the checked gradient.
ad::Var weighted_sum(ad::Var out, std::uint64_t seed = 7);

}  // namespace hydra::check
