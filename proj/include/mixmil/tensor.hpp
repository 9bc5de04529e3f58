#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace mixmil {

using Shape = std::vector<std::size_t>;
using NodeId = std::uint64_t;

std::string shape_string(const Shape& shape);
std::size_t shape_product(const Shape& shape);

/// Raised when operand shapes do not fit an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a caller breaks an API precondition (e.g. backward on a non-scalar).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {
struct Node {
  NodeId id = 0;
  const char* op = "leaf";
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward;
};
}  // namespace detail

/// Dense row-major float64 tensor participating in reverse-mode differentiation.
///
/// Copies share the underlying node. Values are immutable after construction,
/// except through `mutable_data()` on leaves (parameter updates between steps).
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  NodeId id() const;
  const char* op() const;
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  /// Only valid on leaf tensors.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  /// Copy of the values with no history and requires_grad=false.
  Tensor detach() const;
  /// Deep copy keeping requires_grad, with a fresh id.
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// ---- operations ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// x[n x d] + b[d], bias broadcast over rows.
Tensor add_rowwise(const Tensor& x, const Tensor& bias);

Tensor sigmoid(const Tensor& x);
/// log(1 + exp(x)), stable in both tails.
Tensor softplus(const Tensor& x);
/// Exact GELU, 0.5 x (1 + erf(x / sqrt 2)).
Tensor gelu(const Tensor& x);

/// Softmax along `axis` (0 or 1 for 2-D, 0 for 1-D), max-subtracted.
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

/// Row-wise normalisation of x[n x d] with affine gain/bias of shape [d].
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

/// Rows x[index[0]], x[index[1]], ... stacked into a new matrix.
Tensor select_rows(const Tensor& x, std::span<const std::size_t> index);

/// Picks x[i, index[i]] for each row; result has shape [n].
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);

/// Inverted dropout. Identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng);

// ---- reverse mode --------------------------------------------------------

/// Topologically ordered view of the graph that produced a tensor.
struct GradRecord {
  struct Entry {
    NodeId id;
    std::string op;
    std::vector<NodeId> inputs;
  };
  std::vector<Entry> entries;  // inputs precede outputs
};
GradRecord record_of(const Tensor& output);

using Gradients = std::unordered_map<NodeId, Tensor>;

/// Reverse pass from a scalar loss. Every tensor in `params` gets an entry;
/// those not reached by the loss get zeros.
Gradients backward(const Tensor& loss, std::span<const Tensor> params);

/// Central-difference check of backward() for a loss over `params`, which are
/// perturbed in place and restored. Returns the max of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3).
double finite_diff_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                         double eps = 1e-5);
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                         double eps = 1e-5);

}  // namespace mixmil
