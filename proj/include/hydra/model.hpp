#pragma once

// The three regressors: a Euclidean baseline, a single-ball hyperbolic
// ablation and HYDRA (task attention over per-task Poincare subspaces).
// All share the convolutional trunk and the per-task dense heads.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hydra/tape.hpp"

namespace hydra {
class Rng;
}

namespace hydra::model {

inline constexpr std::size_t kNumTasks = 3;

enum class Task : std::size_t { sr = 0, bps = 1, q = 2 };
std::string_view task_name(std::size_t task);

enum class ModelKind { euclidean, hyperbolic_single, hydra };
std::string_view to_string(ModelKind kind);
// Throws ConfigError on unknown names.
ModelKind parse_model_kind(std::string_view name);

using Permutation = std::array<std::size_t, kNumTasks>;

struct ModelConfig {
  ModelKind kind = ModelKind::hydra;
  std::size_t input_dim = 768;
  std::size_t hidden_dim = 128;  // d_h of every subspace
  std::size_t conv1_filters = 64;
  std::size_t conv2_filters = 128;
  std::size_t kernel_size = 3;
  std::size_t head_hidden1 = 120;
  std::size_t head_hidden2 = 30;
  double dropout = 0.3;
  // Scale applied to the Glorot bound of the subspace projections; keeps
  // initial tangent norms near 1 so exp_map0 does not start saturated.
  double projection_init_scale = 0.05;
  // HYDRA only: order of the Mobius left fold over subspaces, and the
  // subspace whose curvature each task aggregates in.
  Permutation fold_order{0, 1, 2};
  Permutation task_subspace{0, 1, 2};

  // Throws ConfigError for unusable settings.
  void validate() const;
  std::size_t flatten_length() const { return conv2_filters * (input_dim / 4); }
};

struct ForwardOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;  // required when training with dropout > 0
  // Replaces softmax(attention logits); row t holds task t's subspace weights.
  std::optional<std::array<std::array<double, kNumTasks>, kNumTasks>> attention_override;
  // Assert the ball-containment invariant on every intermediate point.
  bool check_containment = false;
};

struct ModelOutput {
  std::array<ad::Var, kNumTasks> predictions;  // each [B], normalized label space
  std::vector<ad::Var> latents;               // HYDRA: u^(k) = log_map0(z^(k)), each [B, d_h]
  std::size_t containment_checks = 0;
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ModelKind kind() const { return config_.kind; }

  std::vector<ad::Parameter>& parameters() { return params_; }
  const std::vector<ad::Parameter>& parameters() const { return params_; }
  ad::Parameter& parameter(std::string_view name);
  const ad::Parameter& parameter(std::string_view name) const;

  std::size_t param_count() const;

  // x: [B, input_dim].
  ModelOutput forward(ad::Tape& tape, const ad::Tensor& x, const ForwardOptions& options = {});

  // Softmax of the attention logits (HYDRA only).
  std::array<std::array<double, kNumTasks>, kNumTasks> attention_weights() const;
  // Current curvature of every ball (1 for hyperbolic_single, 3 for HYDRA).
  std::vector<double> curvatures() const;

  // Replaces parameter values by name; every name and shape must match.
  void load_state(const std::vector<std::pair<std::string, ad::Tensor>>& entries);

 private:
  struct Dense {
    std::size_t weight = 0, bias = 0;
  };
  struct Head {
    Dense fc1, fc2, out;
  };

  std::size_t add_param(std::string name, ad::Tensor value);
  ad::Var trunk(ad::Tape& tape, const ad::Tensor& x, const ForwardOptions& options);
  ad::Var head(ad::Tape& tape, const Head& head, ad::Var input, const ForwardOptions& options);
  ad::Var dense(ad::Tape& tape, const Dense& layer, ad::Var input);

  ModelConfig config_;
  std::vector<ad::Parameter> params_;
  std::size_t conv1_w_ = 0, conv1_b_ = 0, conv2_w_ = 0, conv2_b_ = 0;
  std::vector<Dense> projections_;
  std::vector<std::size_t> curvature_raw_;
  std::size_t attention_ = 0;
  std::array<Head, kNumTasks> heads_{};
};

// Learnable scalar count for a configuration, without allocating a model.
std::size_t count_parameters(const ModelConfig& config);

}  // namespace hydra::model
