#include "mixmil/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace mixmil {

namespace {

std::atomic<NodeId> g_next_id{1};
thread_local bool t_grad_enabled = true;

NodeId next_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

using NodePtr = std::shared_ptr<detail::Node>;

NodePtr make_leaf(Shape shape, std::vector<double> value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->id = next_id();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

// Builds an op result. History is kept only when some input needs a gradient.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<NodePtr> inputs, std::function<void(detail::Node&)> backward_fn) {
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  auto node = make_leaf(std::move(shape), std::move(value), needs);
  node->op = op;
  if (needs) {
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
  }
  return Tensor::from_node(std::move(node));
}

// Gradient buffer of an input, or nullptr when it does not take gradients.
double* grad_of(const NodePtr& n) { return n->requires_grad && !n->grad.empty() ? n->grad.data() : nullptr; }

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// Iteration plan for a reduction along one axis.
struct AxisPlan {
  std::size_t groups;
  std::size_t length;
  std::size_t stride;
  std::size_t base(std::size_t g) const { return stride == 1 ? g * length : g; }
};

AxisPlan axis_plan(const Tensor& x, std::size_t axis, const char* op) {
  if (x.rank() == 1 && axis == 0) return {1, x.shape()[0], 1};
  if (x.rank() == 2 && axis == 1) return {x.shape()[0], x.shape()[1], 1};
  if (x.rank() == 2 && axis == 0) return {x.shape()[1], x.shape()[0], x.shape()[1]};
  throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                       shape_string(x.shape()));
}

template <typename F>
Tensor unary(const char* op, const Tensor& x, F&& f, std::vector<double> (*deriv)(const std::vector<double>&,
                                                                                   const std::vector<double>&)) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_result(op, x.shape(), std::move(out), {x.node()}, [deriv](detail::Node& self) {
    double* gx = grad_of(self.inputs[0]);
    if (!gx) return;
    const auto d = deriv(self.inputs[0]->value, self.value);
    for (std::size_t i = 0; i < d.size(); ++i) gx[i] += self.grad[i] * d[i];
  });
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

double normal_cdf(double v) { return 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2)); }

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_product(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

// ---- Tensor --------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto s : shape) {
    if (s == 0) throw DimensionError("tensor shape must be positive: " + shape_string(shape));
  }
  if (shape_product(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_string(shape));
  }
  node_ = make_leaf(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

NodeId Tensor::id() const { return node_->id; }
const char* Tensor::op() const { return node_->op; }
const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->value.size(); }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("rows() on non-matrix " + shape_string(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("cols() on non-matrix " + shape_string(shape()));
  return shape()[1];
}

std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() {
  if (!node_->inputs.empty()) throw ContractError("mutable_data() on a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t i) const { return node_->value.at(i); }
double Tensor::at(std::size_t r, std::size_t c) const { return node_->value.at(r * cols() + c); }
bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor Tensor::detach() const { return Tensor::from_node(make_leaf(shape(), node_->value, false)); }
Tensor Tensor::clone() const { return Tensor::from_node(make_leaf(shape(), node_->value, requires_grad())); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

// ---- linear algebra ------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const auto A = a.data();
  const auto B = b.data();
  std::vector<double> C(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = &B[p * n];
      double* crow = &C[i * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return make_result("matmul", {m, n}, std::move(C), {a.node(), b.node()}, [m, k, n](detail::Node& self) {
    const auto& A = self.inputs[0]->value;
    const auto& B = self.inputs[1]->value;
    const auto& G = self.grad;
    if (double* ga = grad_of(self.inputs[0])) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (double* gb = grad_of(self.inputs[1])) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * G[i * n + j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  const auto A = a.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
  return make_result("transpose", {c, r}, std::move(out), {a.node()}, [r, c](detail::Node& self) {
    double* ga = grad_of(self.inputs[0]);
    if (!ga) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_product(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {a.node()}, [](detail::Node& self) {
    double* ga = grad_of(self.inputs[0]);
    if (!ga) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

// ---- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result("add", a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
    for (int k = 0; k < 2; ++k) {
      if (double* g = grad_of(self.inputs[k]))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result("sub", a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
    if (double* g = grad_of(self.inputs[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = grad_of(self.inputs[1]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result("mul", a.shape(), std::move(out), {a.node(), b.node()}, [](detail::Node& self) {
    const auto& A = self.inputs[0]->value;
    const auto& B = self.inputs[1]->value;
    if (double* g = grad_of(self.inputs[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * B[i];
    if (double* g = grad_of(self.inputs[1]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * A[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_result("scale", a.shape(), std::move(out), {a.node()}, [factor](detail::Node& self) {
    if (double* g = grad_of(self.inputs[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  require_rank2(x, "add_rowwise");
  const std::size_t n = x.rows(), d = x.cols();
  if (bias.size() != d || bias.rank() > 2 || (bias.rank() == 2 && bias.shape()[0] != 1)) {
    throw DimensionError("add_rowwise: bias " + shape_string(bias.shape()) + " does not fit " +
                         shape_string(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto B = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += B[j];
  return make_result("add_rowwise", x.shape(), std::move(out), {x.node(), bias.node()},
                     [n, d](detail::Node& self) {
                       if (double* g = grad_of(self.inputs[0]))
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                       if (double* g = grad_of(self.inputs[1]))
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
                     });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, stable_sigmoid, [](const std::vector<double>&, const std::vector<double>& y) {
    std::vector<double> d(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) d[i] = y[i] * (1.0 - y[i]);
    return d;
  });
}

Tensor softplus(const Tensor& x) {
  return unary(
      "softplus", x,
      [](double v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](const std::vector<double>& in, const std::vector<double>&) {
        std::vector<double> d(in.size());
        for (std::size_t i = 0; i < in.size(); ++i) d[i] = stable_sigmoid(in[i]);
        return d;
      });
}

Tensor gelu(const Tensor& x) {
  return unary(
      "gelu", x, [](double v) { return v * normal_cdf(v); },
      [](const std::vector<double>& in, const std::vector<double>&) {
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        std::vector<double> d(in.size());
        for (std::size_t i = 0; i < in.size(); ++i) {
          const double v = in[i];
          d[i] = normal_cdf(v) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
        }
        return d;
      });
}

// ---- reductions along an axis -------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisPlan plan = axis_plan(x, axis, "softmax");
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t g = 0; g < plan.groups; ++g) {
    const std::size_t b = plan.base(g);
    double mx = in[b];
    for (std::size_t t = 1; t < plan.length; ++t) mx = std::max(mx, in[b + t * plan.stride]);
    double z = 0.0;
    for (std::size_t t = 0; t < plan.length; ++t) {
      const double e = std::exp(in[b + t * plan.stride] - mx);
      out[b + t * plan.stride] = e;
      z += e;
    }
    for (std::size_t t = 0; t < plan.length; ++t) out[b + t * plan.stride] /= z;
  }
  return make_result("softmax", x.shape(), std::move(out), {x.node()}, [plan](detail::Node& self) {
    double* gx = grad_of(self.inputs[0]);
    if (!gx) return;
    const auto& y = self.value;
    for (std::size_t g = 0; g < plan.groups; ++g) {
      const std::size_t b = plan.base(g);
      double dot = 0.0;
      for (std::size_t t = 0; t < plan.length; ++t) {
        const std::size_t i = b + t * plan.stride;
        dot += self.grad[i] * y[i];
      }
      for (std::size_t t = 0; t < plan.length; ++t) {
        const std::size_t i = b + t * plan.stride;
        gx[i] += y[i] * (self.grad[i] - dot);
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const AxisPlan plan = axis_plan(x, axis, "log_softmax");
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t g = 0; g < plan.groups; ++g) {
    const std::size_t b = plan.base(g);
    double mx = in[b];
    for (std::size_t t = 1; t < plan.length; ++t) mx = std::max(mx, in[b + t * plan.stride]);
    double z = 0.0;
    for (std::size_t t = 0; t < plan.length; ++t) z += std::exp(in[b + t * plan.stride] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t t = 0; t < plan.length; ++t) out[b + t * plan.stride] = in[b + t * plan.stride] - lse;
  }
  return make_result("log_softmax", x.shape(), std::move(out), {x.node()}, [plan](detail::Node& self) {
    double* gx = grad_of(self.inputs[0]);
    if (!gx) return;
    const auto& y = self.value;
    for (std::size_t g = 0; g < plan.groups; ++g) {
      const std::size_t b = plan.base(g);
      double gsum = 0.0;
      for (std::size_t t = 0; t < plan.length; ++t) gsum += self.grad[b + t * plan.stride];
      for (std::size_t t = 0; t < plan.length; ++t) {
        const std::size_t i = b + t * plan.stride;
        gx[i] += self.grad[i] - std::exp(y[i]) * gsum;
      }
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank2(x, "layernorm");
  const std::size_t n = x.rows(), d = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layernorm: gain " + shape_string(gain.shape()) + " / bias " +
                         shape_string(bias.shape()) + " do not fit " + shape_string(x.shape()));
  }
  const auto X = x.data();
  const auto G = gain.data();
  const auto B = bias.data();
  std::vector<double> out(n * d), xhat(n * d), rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += X[i * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = X[i * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t k = i * d + j;
      xhat[k] = (X[k] - mu) * rstd[i];
      out[k] = xhat[k] * G[j] + B[j];
    }
  }
  return make_result(
      "layernorm", x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [n, d, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
        const auto& G = self.inputs[1]->value;
        const auto& dy = self.grad;
        if (double* gg = grad_of(self.inputs[1]))
          for (std::size_t k = 0; k < n * d; ++k) gg[k % d] += dy[k] * xhat[k];
        if (double* gb = grad_of(self.inputs[2]))
          for (std::size_t k = 0; k < n * d; ++k) gb[k % d] += dy[k];
        double* gx = grad_of(self.inputs[0]);
        if (!gx) return;
        for (std::size_t i = 0; i < n; ++i) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t k = i * d + j;
            const double dxh = dy[k] * G[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[k];
          }
          mean_dxhat /= static_cast<double>(d);
          mean_dxhat_xhat /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t k = i * d + j;
            gx[k] += rstd[i] * (dy[k] * G[j] - mean_dxhat - xhat[k] * mean_dxhat_xhat);
          }
        }
      });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result("sum", {}, {s}, {x.node()}, [](detail::Node& self) {
    double* g = grad_of(self.inputs[0]);
    if (!g) return;
    const std::size_t n = self.inputs[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

// ---- structural ----------------------------------------------------------

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank2(x, "slice_rows");
  const std::size_t d = x.cols();
  if (count == 0 || begin + count > x.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of " + shape_string(x.shape()));
  }
  std::vector<double> out(x.data().begin() + begin * d, x.data().begin() + (begin + count) * d);
  return make_result("slice_rows", {count, d}, std::move(out), {x.node()}, [begin, d](detail::Node& self) {
    double* g = grad_of(self.inputs[0]);
    if (!g) return;
    for (std::size_t k = 0; k < self.grad.size(); ++k) g[begin * d + k] += self.grad[k];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank2(x, "slice_cols");
  const std::size_t n = x.rows(), d = x.cols();
  if (count == 0 || begin + count > d) {
    throw DimensionError("slice_cols: cols [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of " + shape_string(x.shape()));
  }
  std::vector<double> out(n * count);
  const auto X = x.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = X[i * d + begin + j];
  return make_result("slice_cols", {n, count}, std::move(out), {x.node()},
                     [n, d, begin, count](detail::Node& self) {
                       double* g = grad_of(self.inputs[0]);
                       if (!g) return;
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < count; ++j) g[i * d + begin + j] += self.grad[i * count + j];
                     });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::size_t n = 0;
  std::vector<NodePtr> inputs;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.cols() != d) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    }
    n += p.rows();
    inputs.push_back(p.node());
  }
  std::vector<double> out;
  out.reserve(n * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result("concat_rows", {n, d}, std::move(out), std::move(inputs), [](detail::Node& self) {
    std::size_t offset = 0;
    for (const auto& in : self.inputs) {
      const std::size_t len = in->value.size();
      if (double* g = grad_of(in))
        for (std::size_t k = 0; k < len; ++k) g[k] += self.grad[offset + k];
      offset += len;
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::size_t d = 0;
  std::vector<NodePtr> inputs;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != n) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts[0].shape()) + " vs " +
                           shape_string(p.shape()));
    }
    d += p.cols();
    inputs.push_back(p.node());
  }
  std::vector<double> out(n * d);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * d + offset + j] = p.data()[i * c + j];
    offset += c;
  }
  return make_result("concat_cols", {n, d}, std::move(out), std::move(inputs), [n, d](detail::Node& self) {
    std::size_t offset = 0;
    for (const auto& in : self.inputs) {
      const std::size_t c = in->shape[1];
      if (double* g = grad_of(in))
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * d + offset + j];
      offset += c;
    }
  });
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> index) {
  require_rank2(x, "select_rows");
  const std::size_t d = x.cols();
  if (index.empty()) throw DimensionError("select_rows: no rows selected");
  std::vector<double> out;
  out.reserve(index.size() * d);
  for (std::size_t r : index) {
    if (r >= x.rows()) throw DimensionError("select_rows: row " + std::to_string(r) + " out of " + shape_string(x.shape()));
    out.insert(out.end(), x.data().begin() + r * d, x.data().begin() + (r + 1) * d);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result("select_rows", {idx.size(), d}, std::move(out), {x.node()}, [d, idx](detail::Node& self) {
    double* g = grad_of(self.inputs[0]);
    if (!g) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  require_rank2(x, "gather_rows");
  const std::size_t n = x.rows(), c = x.cols();
  if (index.size() != n) {
    throw DimensionError("gather_rows: " + std::to_string(index.size()) + " indices for " + shape_string(x.shape()));
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (index[i] >= c) throw DimensionError("gather_rows: index " + std::to_string(index[i]) + " out of range");
    out[i] = x.data()[i * c + index[i]];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result("gather_rows", {n}, std::move(out), {x.node()}, [c, idx = std::move(idx)](detail::Node& self) {
    double* g = grad_of(self.inputs[0]);
    if (!g) return;
    for (std::size_t i = 0; i < idx.size(); ++i) g[i * c + idx[i]] += self.grad[i];
  });
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

// ---- reverse mode --------------------------------------------------------

namespace {

std::vector<detail::Node*> topological_order(const Tensor& output) {
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  // Iterative post-order DFS; graphs can be deep enough to worry about recursion.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(output.node().get(), 0);
  seen.insert(output.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

GradRecord record_of(const Tensor& output) {
  GradRecord record;
  for (const detail::Node* n : topological_order(output)) {
    GradRecord::Entry e{n->id, n->op, {}};
    for (const auto& in : n->inputs) e.inputs.push_back(in->id);
    record.entries.push_back(std::move(e));
  }
  return record;
}

Gradients backward(const Tensor& loss, std::span<const Tensor> params) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  Gradients grads;
  for (const auto& p : params) grads.emplace(p.id(), Tensor::zeros(p.shape()));
  if (!loss.requires_grad()) return grads;

  const auto order = topological_order(loss);
  for (detail::Node* n : order) n->grad.assign(n->value.size(), 0.0);
  order.back()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
  for (const auto& p : params) {
    const auto& node = p.node();
    if (!node->grad.empty()) grads[p.id()] = Tensor(p.shape(), node->grad);
  }
  for (detail::Node* n : order) {
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
  return grads;
}

double finite_diff_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params, double eps) {
  const Tensor loss = loss_fn();
  const Gradients analytic = backward(loss, params);
  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& p : params) {
    auto values = p.mutable_data();
    const auto& g = analytic.at(p.id()).data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double up = loss_fn().item();
      values[i] = orig - eps;
      const double down = loss_fn().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(g[i]), std::abs(numeric), 1e-3});
      worst = std::max(worst, std::abs(g[i] - numeric) / denom);
    }
  }
  return worst;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
  Tensor leaf(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  std::vector<Tensor> params{leaf};
  return finite_diff_check([&] { return f(params[0]); }, params, eps);
}

}  // namespace mixmil
