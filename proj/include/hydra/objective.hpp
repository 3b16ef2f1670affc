#pragma once

// Multi-task MSE plus the hyperbolic total-correlation (HTC) penalty.

#include <array>
#include <span>
#include <vector>

#include "hydra/model.hpp"
#include "hydra/tape.hpp"

namespace hydra::objective {

inline constexpr double kDefaultHtcWeight = 0.1;
inline constexpr double kStdFloor = 1e-6;

struct LossBreakdown {
  double mse_sr = 0.0;
  double mse_bps = 0.0;
  double mse_q = 0.0;
  double htc = 0.0;
  double total = 0.0;

  double mse(std::size_t task) const { return task == 0 ? mse_sr : task == 1 ? mse_bps : mse_q; }
};

struct LossTerms {
  std::array<ad::Var, model::kNumTasks> mse;
  ad::Var htc;  // unbound when no latents were given
  ad::Var total;

  LossBreakdown values() const;
};

// Mean squared error over equal-shape tensors.
ad::Var mse(ad::Var pred, ad::Var target);
// Throws UsageError on empty or mismatched input.
double mse(std::span<const double> pred, std::span<const double> target);

// Mean squared pairwise correlation between batch-centred latents, summed
// over unordered pairs: sum_{i<j} |corr(u_i, u_j)|_F^2 / d^2.
// Every latent is [B, d] with B >= 2.
ad::Var htc_loss(std::span<const ad::Var> latents);
double htc_value(std::span<const ad::Tensor> latents);

// total = sum of task MSEs + htc_weight * htc; htc is 0 when latents is empty.
LossTerms total_loss(const std::array<ad::Var, model::kNumTasks>& preds,
                     const std::array<ad::Var, model::kNumTasks>& targets, std::span<const ad::Var> latents,
                     double htc_weight = kDefaultHtcWeight);

}  // namespace hydra::objective
