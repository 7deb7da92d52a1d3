#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowkrig {

/// Dims of a 4-axis tensor, (B, N, T, C) in model code. Degenerate axes
/// (size 1) stand in for vectors and matrices.
using Shape = std::array<std::size_t, 4>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Thrown for any shape or value contract violation in the tensor engine.
class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
  Shape shape{1, 1, 1, 1};
  std::vector<double> value;
  std::vector<double> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

/// Dense row-major float64 tensor with define-by-run reverse-mode gradient
/// tracking. Copies share the underlying node; use clone() for a deep copy.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double v);

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape[axis]; }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double item() const;

  double at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) const;
  double& at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3);

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  void zero_grad();
  void clear_grad() { node_->grad.clear(); }

  /// Deep copy of values; the copy is a fresh leaf.
  Tensor clone() const;
  /// Same values, no gradient history.
  Tensor detach() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Internal; used by op implementations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// While alive, ops on this thread record no tape regardless of inputs.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

/// Runs reverse-mode accumulation from a scalar loss. Gradients add into
/// any existing grad buffers of tracked leaves.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Forward primitives. Every op records a tape node when any input tracks
// gradients. Elementwise binary ops broadcast axes of size 1.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

/// Batched matrix product over the trailing two axes; leading axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
/// X[..., C] x W(C, D) -> X'[..., D]. W is stored as (1, 1, C, D).
Tensor mode4_product(const Tensor& x, const Tensor& w);
Tensor transpose_last2(const Tensor& a);
Tensor permute(const Tensor& a, std::array<std::size_t, 4> axes);
Tensor reshape(const Tensor& a, Shape shape);

Tensor softmax_last(const Tensor& a);
/// Softmax over the entries with keep[i] != 0 in each last-axis row; dropped
/// entries get weight exactly 0. Every row must keep at least one entry.
Tensor masked_softmax_last(const Tensor& a, std::span<const std::uint8_t> keep);

Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor sigmoid(const Tensor& a);

Tensor concat_last(std::span<const Tensor> parts);

/// Causal 1-D convolution along axis 2 with k-1 zeros of left padding.
/// x: (B, N, T, Cin), kernel: (1, k, Cin, Cout) -> (B, N, T, Cout).
/// Tap s of the kernel multiplies input time t - (k - 1) + s.
Tensor causal_conv1d(const Tensor& x, const Tensor& kernel);

/// Row-wise top-k selection on the last axis restricted to entries already
/// allowed by `allowed`. Ties go to the lower index. Not differentiable.
std::vector<std::uint8_t> topk_mask_last(const Tensor& scores, std::size_t k,
                                         std::span<const std::uint8_t> allowed);

Tensor sum(const Tensor& a);
Tensor l1_norm(const Tensor& a);
Tensor sum_squares(const Tensor& a);
Tensor frobenius_norm(const Tensor& a);
/// Sum of squares over the trailing two axes -> (d0, d1, 1, 1).
Tensor sum_squares_last2(const Tensor& a);
/// Divides each last-axis row by its L2 norm; zero rows stay zero.
Tensor l2_normalize_last(const Tensor& a);
/// Replaces exact zeros by `fill`; gradient passes through elsewhere.
Tensor replace_zeros(const Tensor& a, double fill);

/// (1 / (B*N*T)) * sum_b sum_{j,j'} A[b,j,j'] * ||x_j - x_j'||^2.
/// adj: (B, 1, N, N); signals: (B, N, T, 1), treated as constants.
Tensor dirichlet_energy(const Tensor& adj, const Tensor& signals);

// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

/// Compares the reverse-mode gradient of scalar f at `at` with central
/// differences. Error per coordinate is |analytic - numeric| / (|numeric| + eps).
GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                                        const Tensor& at, double step = 1e-5,
                                        double eps = 1e-6);

/// Same check against a leaf that `loss` closes over; the leaf's values are
/// perturbed in place and restored. The leaf's grad buffer is overwritten.
GradCheckResult finite_difference_check(const std::function<Tensor()>& loss, Tensor& leaf,
                                        double step = 1e-5, double eps = 1e-6);

}  // namespace flowkrig
