#pragma once

// Dense double-precision tensors and a reverse-mode tape.
//
// A Tape records every forward op in insertion order together with a closure
// computing its vector-Jacobian product. backward() walks the nodes once in
// reverse order. Parameters live outside the tape; their leaf nodes accumulate
// gradients into Parameter::grad.

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace hydra {
class Rng;
}

namespace hydra::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor({1}, std::vector<double>{value}); }
  static Tensor vector(std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Row-major access for rank-2 tensors.
  double& at(std::size_t row, std::size_t col) { return data_[row * shape_[1] + col]; }
  double at(std::size_t row, std::size_t col) const { return data_[row * shape_[1] + col]; }

  double item() const;
  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value);

  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad();
};

class Tape;

// Handle to a tape node. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t numel() const { return value().numel(); }
  bool requires_grad() const;
  Tape& tape() const;
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Gradient slots of the inputs, nullptr where an input does not need one.
using GradSlots = std::span<Tensor* const>;
using BackwardFn = std::function<void(const Tensor& out_grad, GradSlots in_grads)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf that needs a gradient but is not a Parameter; read it with grad().
  Var variable(Tensor value);
  // Reads p.value in place and accumulates into p.grad; p must outlive the
  // tape and stay unchanged until backward() has run.
  Var param(Parameter& p);

  // Registers an op. Inputs must belong to this tape. Throws NumericalError
  // if the output holds NaN or Inf.
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward);

  void backward(Var loss);
  const Tensor& grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }

 private:
  friend class Var;

  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;  // value and gradient live in the parameter
    bool requires_grad = false;

    const Tensor& val() const { return param ? param->value : value; }
  };

  void check_owned(Var v) const;

  // deque keeps node addresses stable so closures may hold pointers to values.
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

// --- forward ops ------------------------------------------------------------
//
// Binary elementwise ops broadcast the operand whose shape is a suffix of the
// other's (or which holds one element) over the leading axes.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);

Var relu(Var x);
Var tanh(Var x);
Var atanh(Var x);
Var softplus(Var x);
Var sqrt(Var x);
Var square(Var x);
Var clamp(Var x, double lo, double hi);

// Softmax over the last axis.
Var softmax(Var x);

Var sum(Var x);
Var mean(Var x);
// Reductions over axis 0 of a rank-2 tensor; result has shape {cols}.
Var sum_rows(Var x);
Var mean_rows(Var x);
// Euclidean norm over the last axis; the last axis is dropped.
Var l2_norm(Var x);

// [n, k] x [k, m] -> [n, m]
Var matmul(Var a, Var b);
Var transpose(Var x);
Var reshape(Var x, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);
// Single element of the flattened tensor as a shape-{1} scalar.
Var element(Var x, std::size_t flat_index);

// x: [B, C_in, L], weight: [C_out, C_in, K] (K odd), bias: [C_out].
// Stride 1, zero "same" padding.
Var conv1d(Var x, Var weight, Var bias);
// Kernel 2, stride 2 over the last axis of [B, C, L]; L must be even.
// Ties route the gradient to the lower index.
Var maxpool1d(Var x);

// Inverted dropout; identity when !training or rate == 0.
Var dropout(Var x, double rate, bool training, Rng& rng);

}  // namespace hydra::ad
