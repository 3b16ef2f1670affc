#include "hydra/objective.hpp"

#include <limits>

#include "hydra/error.hpp"

namespace hydra::objective {

LossBreakdown LossTerms::values() const {
  LossBreakdown b;
  b.mse_sr = mse[0].value().item();
  b.mse_bps = mse[1].value().item();
  b.mse_q = mse[2].value().item();
  b.htc = htc.valid() ? htc.value().item() : 0.0;
  b.total = total.value().item();
  return b;
}

ad::Var mse(ad::Var pred, ad::Var target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse: prediction shape " + ad::shape_str(pred.shape()) + " differs from target shape " +
                     ad::shape_str(target.shape()));
  }
  return ad::mean(ad::square(ad::sub(pred, target)));
}

double mse(std::span<const double> pred, std::span<const double> target) {
  if (pred.empty()) throw UsageError("mse of an empty batch");
  if (pred.size() != target.size()) throw UsageError("mse: prediction and target lengths differ");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

namespace {

// Centred latent divided by its per-dimension (floored) standard deviation.
ad::Var standardize(ad::Var u) {
  const std::size_t batch = u.shape()[0];
  const ad::Var centred = ad::sub(u, ad::mean_rows(u));
  const ad::Var var = ad::scale(ad::sum_rows(ad::square(centred)), 1.0 / static_cast<double>(batch - 1));
  const ad::Var sigma = ad::sqrt(ad::clamp(var, kStdFloor * kStdFloor, std::numeric_limits<double>::max()));
  return ad::div(centred, sigma);
}

}  // namespace

ad::Var htc_loss(std::span<const ad::Var> latents) {
  if (latents.size() < 2) throw UsageError("htc_loss needs at least two latents");
  const ad::Shape& shape = latents[0].shape();
  if (shape.size() != 2) throw ShapeError("htc_loss: latents must be [B, d], got " + ad::shape_str(shape));
  for (const ad::Var& u : latents) {
    if (u.shape() != shape) {
      throw ShapeError("htc_loss: latent shapes " + ad::shape_str(shape) + " and " + ad::shape_str(u.shape()) +
                       " differ");
    }
  }
  const std::size_t batch = shape[0], dim = shape[1];
  if (batch < 2) throw UsageError("htc_loss needs a batch of at least 2");

  std::vector<ad::Var> standardized;
  for (const ad::Var& u : latents) standardized.push_back(standardize(u));
  const double norm = 1.0 / (static_cast<double>(batch - 1) * static_cast<double>(dim));
  ad::Var total;
  for (std::size_t i = 0; i < standardized.size(); ++i) {
    for (std::size_t j = i + 1; j < standardized.size(); ++j) {
      // corr / d = (u_i^T u_j) / ((B - 1) d)
      const ad::Var corr = ad::scale(ad::matmul(ad::transpose(standardized[i]), standardized[j]), norm);
      const ad::Var term = ad::sum(ad::square(corr));
      total = total.valid() ? ad::add(total, term) : term;
    }
  }
  return total;
}

double htc_value(std::span<const ad::Tensor> latents) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const ad::Tensor& t : latents) vars.push_back(tape.constant(t));
  return htc_loss(vars).value().item();
}

LossTerms total_loss(const std::array<ad::Var, model::kNumTasks>& preds,
                     const std::array<ad::Var, model::kNumTasks>& targets, std::span<const ad::Var> latents,
                     double htc_weight) {
  LossTerms terms;
  for (std::size_t t = 0; t < model::kNumTasks; ++t) terms.mse[t] = mse(preds[t], targets[t]);
  terms.total = ad::add(ad::add(terms.mse[0], terms.mse[1]), terms.mse[2]);
  if (!latents.empty()) {
    terms.htc = htc_loss(latents);
    if (htc_weight != 0.0) terms.total = ad::add(terms.total, ad::scale(terms.htc, htc_weight));
  }
  return terms;
}

}  // namespace hydra::objective
