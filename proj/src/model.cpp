#include "hydra/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "hydra/error.hpp"
#include "hydra/geometry.hpp"
#include "hydra/rng.hpp"

namespace hydra::model {

namespace {

constexpr std::array<std::string_view, kNumTasks> kTaskNames{"SR", "BPS", "Q"};

ad::Tensor uniform_tensor(Rng& rng, ad::Shape shape, double bound) {
  ad::Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

bool is_permutation(const Permutation& p) {
  std::array<bool, kNumTasks> seen{};
  for (std::size_t v : p) {
    if (v >= kNumTasks || seen[v]) return false;
    seen[v] = true;
  }
  return true;
}

void check_containment(const ad::Var& points, const ad::Var& c, const char* where, std::size_t& counter) {
  const double worst = geo::max_scaled_norm(points.value(), c.value().item());
  ++counter;
  if (worst > 1.0 - geo::kBallEps + 1e-12) {
    std::ostringstream os;
    os << "ball containment violated at " << where << ": sqrt(c)|x| = " << worst;
    throw NumericalError(os.str());
  }
}

}  // namespace

std::string_view task_name(std::size_t task) { return kTaskNames.at(task); }

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::euclidean:
      return "euclidean";
    case ModelKind::hyperbolic_single:
      return "hyperbolic_single";
    case ModelKind::hydra:
      return "hydra";
  }
  return "unknown";
}

ModelKind parse_model_kind(std::string_view name) {
  if (name == "euclidean") return ModelKind::euclidean;
  if (name == "hyperbolic_single") return ModelKind::hyperbolic_single;
  if (name == "hydra") return ModelKind::hydra;
  throw ConfigError("unknown model kind '" + std::string(name) + "' (expected euclidean, hyperbolic_single or hydra)");
}

void ModelConfig::validate() const {
  if (input_dim == 0 || input_dim % 4 != 0) {
    throw ConfigError("input dimension " + std::to_string(input_dim) + " is not a positive multiple of 4");
  }
  if (conv1_filters == 0 || conv2_filters == 0 || head_hidden1 == 0 || head_hidden2 == 0) {
    throw ConfigError("every layer needs at least one unit");
  }
  if (kind != ModelKind::euclidean && hidden_dim == 0) throw ConfigError("subspace dimension must be positive");
  if (kernel_size == 0 || kernel_size % 2 == 0) throw ConfigError("kernel size must be odd");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (!(projection_init_scale > 0.0)) throw ConfigError("projection_init_scale must be positive");
  if (!is_permutation(fold_order) || !is_permutation(task_subspace)) {
    throw ConfigError("fold_order and task_subspace must be permutations of {0, 1, 2}");
  }
}

std::size_t count_parameters(const ModelConfig& config) {
  config.validate();
  const std::size_t k = config.kernel_size;
  std::size_t n = config.conv1_filters * k + config.conv1_filters;
  n += config.conv2_filters * config.conv1_filters * k + config.conv2_filters;
  std::size_t head_in = config.flatten_length();
  if (config.kind != ModelKind::euclidean) {
    const std::size_t balls = config.kind == ModelKind::hydra ? kNumTasks : 1;
    n += balls * (config.flatten_length() * config.hidden_dim + config.hidden_dim + 1);
    if (config.kind == ModelKind::hydra) n += kNumTasks * kNumTasks;
    head_in = config.hidden_dim;
  }
  const std::size_t head = head_in * config.head_hidden1 + config.head_hidden1 +
                           config.head_hidden1 * config.head_hidden2 + config.head_hidden2 + config.head_hidden2 + 1;
  return n + kNumTasks * head;
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  const std::size_t k = config_.kernel_size;
  const std::size_t f1 = config_.conv1_filters, f2 = config_.conv2_filters;

  // He-uniform for ReLU convolutions, Glorot-uniform for dense layers.
  conv1_w_ = add_param("trunk.conv1.weight", uniform_tensor(rng, {f1, 1, k}, std::sqrt(6.0 / static_cast<double>(k))));
  conv1_b_ = add_param("trunk.conv1.bias", ad::Tensor({f1}));
  conv2_w_ = add_param("trunk.conv2.weight",
                       uniform_tensor(rng, {f2, f1, k}, std::sqrt(6.0 / static_cast<double>(f1 * k))));
  conv2_b_ = add_param("trunk.conv2.bias", ad::Tensor({f2}));

  auto make_dense = [&](const std::string& name, std::size_t in, std::size_t out, double scale = 1.0) {
    Dense d;
    const double bound = scale * std::sqrt(6.0 / static_cast<double>(in + out));
    d.weight = add_param(name + ".weight", uniform_tensor(rng, {in, out}, bound));
    d.bias = add_param(name + ".bias", ad::Tensor({out}));
    return d;
  };

  const std::size_t flat = config_.flatten_length();
  std::size_t head_in = flat;
  if (config_.kind == ModelKind::hyperbolic_single) {
    projections_.push_back(make_dense("proj", flat, config_.hidden_dim, config_.projection_init_scale));
    curvature_raw_.push_back(add_param("curvature.raw", ad::Tensor::scalar(geo::raw_for_curvature(1.0))));
    head_in = config_.hidden_dim;
  } else if (config_.kind == ModelKind::hydra) {
    for (std::size_t s = 0; s < kNumTasks; ++s) {
      projections_.push_back(
          make_dense("proj." + std::to_string(s), flat, config_.hidden_dim, config_.projection_init_scale));
    }
    for (std::size_t s = 0; s < kNumTasks; ++s) {
      curvature_raw_.push_back(
          add_param("curvature." + std::to_string(s) + ".raw", ad::Tensor::scalar(geo::raw_for_curvature(1.0))));
    }
    attention_ = add_param("attention.logits", ad::Tensor({kNumTasks, kNumTasks}));
    head_in = config_.hidden_dim;
  }
  for (std::size_t t = 0; t < kNumTasks; ++t) {
    const std::string prefix = "head." + std::string(task_name(t));
    heads_[t].fc1 = make_dense(prefix + ".fc1", head_in, config_.head_hidden1);
    heads_[t].fc2 = make_dense(prefix + ".fc2", config_.head_hidden1, config_.head_hidden2);
    heads_[t].out = make_dense(prefix + ".out", config_.head_hidden2, 1);
  }
}

std::size_t Model::add_param(std::string name, ad::Tensor value) {
  params_.emplace_back(std::move(name), std::move(value));
  return params_.size() - 1;
}

ad::Parameter& Model::parameter(std::string_view name) {
  for (ad::Parameter& p : params_)
    if (p.name == name) return p;
  throw UsageError("model has no parameter '" + std::string(name) + "'");
}

const ad::Parameter& Model::parameter(std::string_view name) const {
  return const_cast<Model*>(this)->parameter(name);
}

std::size_t Model::param_count() const {
  std::size_t n = 0;
  for (const ad::Parameter& p : params_) n += p.value.numel();
  return n;
}

ad::Var Model::dense(ad::Tape& tape, const Dense& layer, ad::Var input) {
  return ad::add(ad::matmul(input, tape.param(params_[layer.weight])), tape.param(params_[layer.bias]));
}

ad::Var Model::trunk(ad::Tape& tape, const ad::Tensor& x, const ForwardOptions& options) {
  if (x.rank() != 2 || x.dim(1) != config_.input_dim) {
    throw ShapeError("model expects input [B, " + std::to_string(config_.input_dim) + "], got " +
                     ad::shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0);
  ad::Var h = tape.constant(x.reshaped({batch, 1, config_.input_dim}));
  // relu commutes with max pooling; pooling first halves the relu traffic.
  h = ad::relu(ad::maxpool1d(ad::conv1d(h, tape.param(params_[conv1_w_]), tape.param(params_[conv1_b_]))));
  h = ad::relu(ad::maxpool1d(ad::conv1d(h, tape.param(params_[conv2_w_]), tape.param(params_[conv2_b_]))));
  h = ad::reshape(h, {batch, config_.flatten_length()});
  if (options.training && config_.dropout > 0.0) {
    if (!options.dropout_rng) throw UsageError("training forward needs a dropout generator");
    h = ad::dropout(h, config_.dropout, true, *options.dropout_rng);
  }
  return h;
}

ad::Var Model::head(ad::Tape& tape, const Head& hd, ad::Var input, const ForwardOptions& options) {
  const bool drop = options.training && config_.dropout > 0.0;
  ad::Var h = ad::relu(dense(tape, hd.fc1, input));
  if (drop) h = ad::dropout(h, config_.dropout, true, *options.dropout_rng);
  h = ad::relu(dense(tape, hd.fc2, h));
  if (drop) h = ad::dropout(h, config_.dropout, true, *options.dropout_rng);
  h = dense(tape, hd.out, h);
  return ad::reshape(h, {h.shape()[0]});
}

ModelOutput Model::forward(ad::Tape& tape, const ad::Tensor& x, const ForwardOptions& options) {
  ModelOutput out;
  const ad::Var z = trunk(tape, x, options);

  if (config_.kind == ModelKind::euclidean) {
    for (std::size_t t = 0; t < kNumTasks; ++t) out.predictions[t] = head(tape, heads_[t], z, options);
    return out;
  }

  std::vector<ad::Var> curv;
  std::vector<ad::Var> balls;
  for (std::size_t s = 0; s < projections_.size(); ++s) {
    curv.push_back(geo::curvature(tape.param(params_[curvature_raw_[s]])));
    balls.push_back(geo::exp_map0(dense(tape, projections_[s], z), curv[s]));
    if (options.check_containment) check_containment(balls[s], curv[s], "subspace projection", out.containment_checks);
  }

  if (config_.kind == ModelKind::hyperbolic_single) {
    const ad::Var tangent = geo::log_map0(balls[0], curv[0]);
    for (std::size_t t = 0; t < kNumTasks; ++t) out.predictions[t] = head(tape, heads_[t], tangent, options);
    return out;
  }

  ad::Var alpha;
  if (options.attention_override) {
    ad::Tensor fixed({kNumTasks, kNumTasks});
    for (std::size_t t = 0; t < kNumTasks; ++t)
      for (std::size_t s = 0; s < kNumTasks; ++s) fixed.at(t, s) = (*options.attention_override)[t][s];
    alpha = tape.constant(std::move(fixed));
  } else {
    alpha = ad::softmax(tape.param(params_[attention_]));
  }

  for (std::size_t t = 0; t < kNumTasks; ++t) {
    const ad::Var& ct = curv[config_.task_subspace[t]];
    ad::Var agg;
    for (std::size_t step = 0; step < kNumTasks; ++step) {
      const std::size_t s = config_.fold_order[step];
      const ad::Var moved = geo::transport(balls[s], curv[s], ct);
      const ad::Var term = geo::mobius_scalar(ad::element(alpha, t * kNumTasks + s), moved, ct);
      agg = step == 0 ? term : geo::mobius_add(agg, term, ct);
      if (options.check_containment) {
        check_containment(moved, ct, "curvature transport", out.containment_checks);
        check_containment(agg, ct, "mobius aggregation", out.containment_checks);
      }
    }
    out.predictions[t] = head(tape, heads_[t], geo::log_map0(agg, ct), options);
  }
  for (std::size_t s = 0; s < kNumTasks; ++s) out.latents.push_back(geo::log_map0(balls[s], curv[s]));
  return out;
}

std::array<std::array<double, kNumTasks>, kNumTasks> Model::attention_weights() const {
  if (config_.kind != ModelKind::hydra) throw UsageError("only HYDRA models carry attention");
  const ad::Tensor& logits = params_[attention_].value;
  std::array<std::array<double, kNumTasks>, kNumTasks> out{};
  for (std::size_t t = 0; t < kNumTasks; ++t) {
    double m = logits.at(t, 0);
    for (std::size_t s = 1; s < kNumTasks; ++s) m = std::max(m, logits.at(t, s));
    double total = 0.0;
    for (std::size_t s = 0; s < kNumTasks; ++s) total += (out[t][s] = std::exp(logits.at(t, s) - m));
    for (std::size_t s = 0; s < kNumTasks; ++s) out[t][s] /= total;
  }
  return out;
}

std::vector<double> Model::curvatures() const {
  std::vector<double> out;
  for (std::size_t idx : curvature_raw_) out.push_back(geo::curvature_from_raw(params_[idx].value.item()));
  return out;
}

void Model::load_state(const std::vector<std::pair<std::string, ad::Tensor>>& entries) {
  if (entries.size() != params_.size()) {
    throw DataError("checkpoint holds " + std::to_string(entries.size()) + " tensors, model expects " +
                    std::to_string(params_.size()));
  }
  // Validate everything before touching the model.
  std::vector<const ad::Tensor*> matched(params_.size(), nullptr);
  for (const auto& [name, tensor] : entries) {
    auto it = std::find_if(params_.begin(), params_.end(), [&](const ad::Parameter& p) { return p.name == name; });
    if (it == params_.end()) throw DataError("checkpoint tensor '" + name + "' does not belong to this architecture");
    if (it->value.shape() != tensor.shape()) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + ad::shape_str(tensor.shape()) + ", expected " +
                      ad::shape_str(it->value.shape()));
    }
    const std::size_t idx = static_cast<std::size_t>(it - params_.begin());
    if (matched[idx]) throw DataError("checkpoint tensor '" + name + "' appears twice");
    matched[idx] = &tensor;
  }
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value = *matched[i];
}

}  // namespace hydra::model
