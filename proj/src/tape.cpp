#include "hydra/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

#include "hydra/error.hpp"
#include "hydra/rng.hpp"

namespace hydra::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << shape_str(a) << " and " << shape_str(b);
  throw ShapeError(os.str());
}

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, std::string_view why) {
  std::ostringstream os;
  os << op << ": shape " << shape_str(a) << " " << why;
  throw ShapeError(os.str());
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (shape_numel(small) == 1) return true;
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Elementwise binary op with suffix broadcasting. `fwd(a, b)` gives the value,
// `da(a, b, out)` and `db(a, b, out)` the local partials.
template <typename Fwd, typename Da, typename Db>
Var binary(std::string_view name, Var a, Var b, Fwd fwd, Da da, Db db) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Shape* out_shape = nullptr;
  if (av.shape() == bv.shape() || is_suffix(bv.shape(), av.shape())) {
    out_shape = &av.shape();
  } else if (is_suffix(av.shape(), bv.shape())) {
    out_shape = &bv.shape();
  } else {
    shape_fail(name, av.shape(), bv.shape());
  }
  Tensor out(*out_shape);
  const std::size_t n = out.numel(), na = av.numel(), nb = bv.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i % na], bv[i % nb]);
  const Tensor* ap = &av;
  const Tensor* bp = &bv;
  auto backward = [ap, bp, da, db](const Tensor& g, GradSlots slots) {
    const Tensor& A = *ap;
    const Tensor& B = *bp;
    const std::size_t n = g.numel(), na = A.numel(), nb = B.numel();
    for (std::size_t i = 0; i < n; ++i) {
      const double x = A[i % na], y = B[i % nb];
      if (slots[0]) (*slots[0])[i % na] += g[i] * da(x, y);
      if (slots[1]) (*slots[1])[i % nb] += g[i] * db(x, y);
    }
  };
  return a.tape().record(name, std::move(out), {a, b}, backward);
}

template <typename Fwd, typename Deriv>
Var unary(std::string_view name, Var x, Fwd fwd, Deriv deriv) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(xv[i]);
  const Tensor* xp = &xv;
  auto backward = [xp, deriv](const Tensor& g, GradSlots slots) {
    if (!slots[0]) return;
    Tensor& gx = *slots[0];
    const Tensor& X = *xp;
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * deriv(X[i]);
  };
  return x.tape().record(name, std::move(out), {x}, backward);
}

double softplus_value(double x) {
  // log(1 + e^x) without overflow.
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// --- Tensor -----------------------------------------------------------------

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  for (std::size_t extent : shape_) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
  }
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (std::size_t extent : shape_) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
  }
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Parameter::Parameter(std::string name_, Tensor value_)
    : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) grad = Tensor(value.shape());
  std::fill(grad.storage().begin(), grad.storage().end(), 0.0);
}

// --- Var / Tape ---------------------------------------------------------------

const Tensor& Var::value() const {
  if (!tape_) throw UsageError("use of an unbound Var");
  return tape_->nodes_[id_].val();
}

bool Var::requires_grad() const { return tape().nodes_[id_].requires_grad; }

Tape& Var::tape() const {
  if (!tape_) throw UsageError("use of an unbound Var");
  return *tape_;
}

void Tape::check_owned(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw UsageError("Var does not belong to this tape");
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NumericalError("non-finite constant fed to the tape");
  nodes_.push_back(Node{"constant", std::move(value), {}, {}, {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  if (!value.all_finite()) throw NumericalError("non-finite variable fed to the tape");
  nodes_.push_back(Node{"variable", std::move(value), {}, {}, {}, nullptr, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  if (!p.value.all_finite()) throw NumericalError("parameter '" + p.name + "' holds non-finite values");
  nodes_.push_back(Node{"param:" + p.name, {}, {}, {}, {}, &p, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  if (backward_done_) throw UsageError("tape already consumed by backward()");
  if (!value.all_finite()) throw NumericalError(std::string(op) + " produced a non-finite value");
  Node node;
  node.op = std::string(op);
  node.value = std::move(value);
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    check_owned(v);
    node.inputs.push_back(v.id_);
    node.requires_grad = node.requires_grad || nodes_[v.id_].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss) {
  check_owned(loss);
  if (backward_done_) throw UsageError("backward() may run only once per tape");
  Node& root = nodes_[loss.id_];
  if (root.val().numel() != 1) throw UsageError("backward() needs a scalar loss, got " + shape_str(root.val().shape()));
  if (!root.requires_grad) throw UsageError("backward() on a tensor detached from every parameter");
  backward_done_ = true;

  // Parameter leaves accumulate straight into Parameter::grad.
  auto slot = [](Node& n) -> Tensor& {
    Tensor& g = n.param ? n.param->grad : n.grad;
    if (g.shape() != n.val().shape()) g = Tensor(n.val().shape());
    return g;
  };
  if (root.param) {
    slot(root)[0] += 1.0;
    return;
  }
  root.grad = Tensor(root.value.shape(), 1.0);
  std::vector<Tensor*> slots;
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.requires_grad || node.param || node.grad.empty() || !node.backward) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      Node& in = nodes_[node.inputs[k]];
      if (in.requires_grad) slots[k] = &slot(in);
    }
    node.backward(node.grad, slots);
  }
}

const Tensor& Tape::grad(Var v) const {
  check_owned(v);
  const Node& node = nodes_[v.id_];
  if (!backward_done_) throw UsageError("grad() before backward()");
  if (!node.requires_grad) throw UsageError("grad() of a node that does not require a gradient");
  return node.param ? node.param->grad : node.grad;
}

// --- elementwise --------------------------------------------------------------

Var add(Var a, Var b) {
  return binary("add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
                [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
                [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
                [](double x, double) { return x; });
}

Var div(Var a, Var b) {
  return binary("div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
                [](double x, double y) { return -x / (y * y); });
}

Var scale(Var a, double factor) {
  return unary("scale", a, [factor](double x) { return factor * x; }, [factor](double) { return factor; });
}

Var add_scalar(Var a, double offset) {
  return unary("add_scalar", a, [offset](double x) { return x + offset; }, [](double) { return 1.0; });
}

Var relu(Var x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Var tanh(Var x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); },
               [](double v) {
                 const double t = std::tanh(v);
                 return 1.0 - t * t;
               });
}

Var atanh(Var x) {
  for (double v : x.value().data()) {
    if (!(std::abs(v) < 1.0)) throw DomainError("atanh argument outside (-1, 1): " + std::to_string(v));
  }
  return unary("atanh", x, [](double v) { return std::atanh(v); }, [](double v) { return 1.0 / (1.0 - v * v); });
}

Var softplus(Var x) { return unary("softplus", x, softplus_value, sigmoid); }

Var sqrt(Var x) {
  for (double v : x.value().data()) {
    if (!(v >= 0.0)) throw DomainError("sqrt of negative value " + std::to_string(v));
  }
  return unary("sqrt", x, [](double v) { return std::sqrt(v); }, [](double v) { return 0.5 / std::sqrt(v); });
}

Var square(Var x) {
  return unary("square", x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

Var clamp(Var x, double lo, double hi) {
  if (lo > hi) throw InvalidInputError("clamp: lo > hi");
  return unary("clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var softmax(Var x) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.shape().back();
  const std::size_t rows = xv.numel() / n;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * n;
    double* o = out.data().data() + r * n;
    const double m = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += (o[i] = std::exp(in[i] - m));
    for (std::size_t i = 0; i < n; ++i) o[i] /= total;
  }
  auto saved = std::make_shared<Tensor>(out);
  auto backward = [saved, n, rows](const Tensor& g, GradSlots slots) {
    if (!slots[0]) return;
    const Tensor& y = *saved;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += g[r * n + i] * y[r * n + i];
      for (std::size_t i = 0; i < n; ++i) (*slots[0])[r * n + i] += y[r * n + i] * (g[r * n + i] - dot);
    }
  };
  return x.tape().record("softmax", std::move(out), {x}, backward);
}

// --- reductions ---------------------------------------------------------------

Var sum(Var x) {
  const Tensor& xv = x.value();
  double total = 0.0;
  for (double v : xv.data()) total += v;
  auto backward = [](const Tensor& g, GradSlots slots) {
    if (!slots[0]) return;
    for (double& v : slots[0]->data()) v += g[0];
  };
  return x.tape().record("sum", Tensor::scalar(total), {x}, backward);
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Var sum_rows(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) shape_fail("sum_rows", xv.shape(), "is not rank 2");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  Tensor out({cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += xv.at(r, c);
  auto backward = [rows, cols](const Tensor& g, GradSlots slots) {
    if (!slots[0]) return;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) slots[0]->at(r, c) += g[c];
  };
  return x.tape().record("sum_rows", std::move(out), {x}, backward);
}

Var mean_rows(Var x) {
  if (x.value().rank() != 2) shape_fail("mean_rows", x.shape(), "is not rank 2");
  return scale(sum_rows(x), 1.0 / static_cast<double>(x.value().dim(0)));
}

Var l2_norm(Var x) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.shape().back();
  const std::size_t rows = xv.numel() / n;
  Shape out_shape(xv.shape().begin(), xv.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += xv[r * n + i] * xv[r * n + i];
    out[r] = std::sqrt(s);
  }
  const Tensor* xp = &xv;
  auto norms = std::make_shared<Tensor>(out);
  auto backward = [xp, norms, n, rows](const Tensor& g, GradSlots slots) {
    if (!slots[0]) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double nr = (*norms)[r];
      if (nr == 0.0) continue;  // subgradient 0 at the origin
      for (std::size_t i = 0; i < n; ++i) (*slots[0])[r * n + i] += g[r] * (*xp)[r * n + i] / nr;
    }
  };
  return x.tape().record("l2_norm", std::move(out), {x}, backward);
}

// --- linear algebra and shape ops ---------------------------------------------

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) shape_fail("matmul", av.shape(), bv.shape());
  const std::size_t n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  Tensor out({n, m});
  MatMap(out.data().data(), n, m).noalias() = ConstMatMap(av.data().data(), n, k) * ConstMatMap(bv.data().data(), k, m);
  const Tensor* ap = &av;
  const Tensor* bp = &bv;
  auto backward = [ap, bp, n, k, m](const Tensor& g, GradSlots slots) {
    ConstMatMap G(g.data().data(), n, m);
    if (slots[0]) MatMap(slots[0]->data().data(), n, k).noalias() += G * ConstMatMap(bp->data().data(), k, m).transpose();
    if (slots[1]) MatMap(slots[1]->data().data(), k, m).noalias() += ConstMatMap(ap->data().data(), n, k).transpose() * G;
  };
  return a.tape().record("matmul", std::move(out), {a, b}, backward);
}

Var transpose(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) shape_fail("transpose", xv.shape(), "is not rank 2");
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = xv.at(i, j);
  auto backward = [r, c](const Tensor& g, GradSlots slots) {
    if (!slots[0]) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) slots[0]->at(i, j) += g.at(j, i);
  };
  return x.tape().record("transpose", std::move(out), {x}, backward);
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  auto backward = [](const Tensor& g, GradSlots slots) {
    if (!slots[0]) return;
    for (std::size_t i = 0; i < g.numel(); ++i) (*slots[0])[i] += g[i];
  };
  return x.tape().record("reshape", std::move(out), {x}, backward);
}

namespace {

// Views a tensor as [outer, axis extent, inner] around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) shape_fail("concat", first, "has no axis " + std::to_string(axis));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) shape_fail("concat", first, s);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i]) shape_fail("concat", first, s);
    out_shape[axis] += s[axis];
  }
  Tensor out(out_shape);
  const AxisSplit os = split_at(out_shape, axis);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const AxisSplit ps = split_at(p.shape(), axis);
    const Tensor& pv = p.value();
    for (std::size_t o = 0; o < ps.outer; ++o)
      std::copy_n(pv.data().data() + o * ps.extent * ps.inner, ps.extent * ps.inner,
                  out.data().data() + (o * os.extent + offset) * os.inner);
    offsets.push_back(offset);
    offset += ps.extent;
  }
  std::vector<AxisSplit> splits;
  for (const Var& p : parts) splits.push_back(split_at(p.shape(), axis));
  auto backward = [offsets, splits, os](const Tensor& g, GradSlots slots) {
    for (std::size_t k = 0; k < slots.size(); ++k) {
      if (!slots[k]) continue;
      const AxisSplit& ps = splits[k];
      for (std::size_t o = 0; o < ps.outer; ++o) {
        const double* src = g.data().data() + (o * os.extent + offsets[k]) * os.inner;
        double* dst = slots[k]->data().data() + o * ps.extent * ps.inner;
        for (std::size_t i = 0; i < ps.extent * ps.inner; ++i) dst[i] += src[i];
      }
    }
  };
  return parts[0].tape().record("concat", std::move(out), parts, backward);
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& shape = x.shape();
  if (axis >= shape.size() || begin >= end || end > shape[axis]) {
    shape_fail("slice", shape,
               "cannot be sliced on axis " + std::to_string(axis) + " over [" + std::to_string(begin) + ", " +
                   std::to_string(end) + ")");
  }
  Shape out_shape = shape;
  out_shape[axis] = end - begin;
  const AxisSplit in = split_at(shape, axis);
  const std::size_t width = (end - begin) * in.inner;
  Tensor out(out_shape);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < in.outer; ++o)
    std::copy_n(xv.data().data() + (o * in.extent + begin) * in.inner, width, out.data().data() + o * width);
  auto backward = [in, begin, width](const Tensor& g, GradSlots slots) {
    if (!slots[0]) return;
    for (std::size_t o = 0; o < in.outer; ++o) {
      double* dst = slots[0]->data().data() + (o * in.extent + begin) * in.inner;
      const double* src = g.data().data() + o * width;
      for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
    }
  };
  return x.tape().record("slice", std::move(out), {x}, backward);
}

Var element(Var x, std::size_t flat_index) {
  if (flat_index >= x.numel()) shape_fail("element", x.shape(), "has no element " + std::to_string(flat_index));
  auto backward = [flat_index](const Tensor& g, GradSlots slots) {
    if (slots[0]) (*slots[0])[flat_index] += g[0];
  };
  return x.tape().record("element", Tensor::scalar(x.value()[flat_index]), {x}, backward);
}

// --- convolution, pooling, dropout --------------------------------------------

Var conv1d(Var x, Var weight, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 3 || wv.rank() != 3 || wv.dim(1) != xv.dim(1)) shape_fail("conv1d", xv.shape(), wv.shape());
  if (bv.rank() != 1 || bv.dim(0) != wv.dim(0)) shape_fail("conv1d", wv.shape(), bv.shape());
  if (wv.dim(2) % 2 == 0) shape_fail("conv1d", wv.shape(), "needs an odd kernel for same padding");
  const std::size_t batch = xv.dim(0), cin = xv.dim(1), len = xv.dim(2);
  const std::size_t cout = wv.dim(0), kernel = wv.dim(2);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(kernel / 2);
  const std::size_t rows = cin * kernel, cols_n = batch * len;

  // im2col: cols[(ci*K + k), b*L + l] = x[b, ci, l + k - pad]
  auto cols = std::make_shared<std::vector<double>>(rows * cols_n, 0.0);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t k = 0; k < kernel; ++k) {
      double* row = cols->data() + (ci * kernel + k) * cols_n;
      const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - pad;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* src = xv.data().data() + (b * cin + ci) * len;
        double* dst = row + b * len;
        for (std::size_t l = 0; l < len; ++l) {
          const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(l) + shift;
          if (p >= 0 && p < static_cast<std::ptrdiff_t>(len)) dst[l] = src[p];
        }
      }
    }
  RowMatrix result(cout, cols_n);
  result.noalias() = ConstMatMap(wv.data().data(), cout, rows) * ConstMatMap(cols->data(), rows, cols_n);
  Tensor out({batch, cout, len});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t co = 0; co < cout; ++co) {
      double* dst = out.data().data() + (b * cout + co) * len;
      const double* src = result.data() + co * cols_n + b * len;
      for (std::size_t l = 0; l < len; ++l) dst[l] = src[l] + bv[co];
    }

  const Tensor* wp = &wv;
  auto backward = [cols, wp, batch, cin, len, cout, kernel, pad, rows, cols_n](const Tensor& g, GradSlots slots) {
    RowMatrix gm(cout, cols_n);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t co = 0; co < cout; ++co)
        std::copy_n(g.data().data() + (b * cout + co) * len, len, gm.data() + co * cols_n + b * len);
    if (slots[1]) MatMap(slots[1]->data().data(), cout, rows).noalias() += gm * ConstMatMap(cols->data(), rows, cols_n).transpose();
    if (slots[2]) {
      for (std::size_t co = 0; co < cout; ++co) (*slots[2])[co] += gm.row(co).sum();
    }
    if (slots[0]) {
      RowMatrix gcols(rows, cols_n);
      gcols.noalias() = ConstMatMap(wp->data().data(), cout, rows).transpose() * gm;
      Tensor& gx = *slots[0];
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t k = 0; k < kernel; ++k) {
          const double* row = gcols.data() + (ci * kernel + k) * cols_n;
          const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - pad;
          for (std::size_t b = 0; b < batch; ++b) {
            double* dst = gx.data().data() + (b * cin + ci) * len;
            const double* src = row + b * len;
            for (std::size_t l = 0; l < len; ++l) {
              const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(l) + shift;
              if (p >= 0 && p < static_cast<std::ptrdiff_t>(len)) dst[p] += src[l];
            }
          }
        }
    }
  };
  return x.tape().record("conv1d", std::move(out), {x, weight, bias}, backward);
}

Var maxpool1d(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3 || xv.dim(2) % 2 != 0) shape_fail("maxpool1d", xv.shape(), "needs rank 3 with even length");
  const std::size_t planes = xv.dim(0) * xv.dim(1), len = xv.dim(2), half = len / 2;
  Tensor out({xv.dim(0), xv.dim(1), half});
  auto argmax = std::make_shared<std::vector<std::size_t>>(planes * half);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < half; ++i) {
      const std::size_t lo = p * len + 2 * i;
      const std::size_t pick = xv[lo + 1] > xv[lo] ? lo + 1 : lo;
      out[p * half + i] = xv[pick];
      (*argmax)[p * half + i] = pick;
    }
  auto backward = [argmax](const Tensor& g, GradSlots slots) {
    if (!slots[0]) return;
    for (std::size_t i = 0; i < g.numel(); ++i) (*slots[0])[(*argmax)[i]] += g[i];
  };
  return x.tape().record("maxpool1d", std::move(out), {x}, backward);
}

Var dropout(Var x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto keep = std::make_shared<std::vector<unsigned char>>(x.numel());
  for (unsigned char& k : *keep) k = rng.uniform() >= rate;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = (*keep)[i] ? x.value()[i] * keep_scale : 0.0;
  auto backward = [keep, keep_scale](const Tensor& g, GradSlots slots) {
    if (!slots[0]) return;
    for (std::size_t i = 0; i < g.numel(); ++i)
      if ((*keep)[i]) (*slots[0])[i] += g[i] * keep_scale;
  };
  return x.tape().record("dropout", std::move(out), {x}, backward);
}

}  // namespace hydra::ad
