#include "flowkrig/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <cblas.h>

namespace flowkrig {

using detail::Node;

namespace {

// C (m x n) = alpha * op(A) * op(B) + beta * C, row-major.
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double beta,
          double* c) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (beta == 0.0) std::fill_n(c, m * n, 0.0);
    return;
  }
  const auto M = static_cast<blasint>(m), N = static_cast<blasint>(n), K = static_cast<blasint>(k);
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, M, N, K, 1.0, a,
              ta ? M : K, b, tb ? K : N, beta, c, N);
}

}  // namespace

std::size_t numel(const Shape& s) { return s[0] * s[1] * s[2] * s[3]; }

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(" << s[0] << ", " << s[1] << ", " << s[2] << ", " << s[3] << ")";
  return os.str();
}

Tensor::Tensor() : node_(std::make_shared<Node>()) { node_->value.assign(1, 0.0); }

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<Node>()) {
  node_->shape = shape;
  node_->value.assign(numel(shape), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  if (values.size() != numel(shape)) {
    throw TensorError("value count " + std::to_string(values.size()) +
                      " does not match dims " + shape_str(shape));
  }
  node_->shape = shape;
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1, 1, 1, 1}, std::vector<double>{v}); }

double Tensor::item() const {
  if (size() != 1) throw TensorError("item() on non-scalar " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) const {
  const auto& s = node_->shape;
  return node_->value[((i0 * s[1] + i1) * s[2] + i2) * s[3] + i3];
}

double& Tensor::at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) {
  const auto& s = node_->shape;
  return node_->value[((i0 * s[1] + i1) * s[2] + i2) * s[3] + i3];
}

void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

Tensor Tensor::clone() const {
  Tensor t(node_->shape, node_->value);
  t.set_requires_grad(node_->requires_grad);
  return t;
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value); }

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw TensorError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }
  const auto& root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS; parent visiting order is fixed, so the
  // accumulation order is deterministic.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

namespace {

void require_finite(const Tensor& t, const char* op) {
  const auto v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw TensorError(std::string(op) + ": nonfinite input at flat index " + std::to_string(i));
    }
  }
}

thread_local int no_grad_depth = 0;

std::shared_ptr<Node> make_node(Shape shape, std::initializer_list<const Tensor*> inputs) {
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->value.assign(numel(shape), 0.0);
  for (const Tensor* t : inputs) {
    if (t->requires_grad() && no_grad_depth == 0) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const Tensor* t : inputs) n->parents.push_back(t->node());
  }
  return n;
}

std::shared_ptr<Node> make_node(Shape shape, std::span<const Tensor> inputs) {
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->value.assign(numel(shape), 0.0);
  for (const auto& t : inputs) {
    if (t.requires_grad() && no_grad_depth == 0) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const auto& t : inputs) n->parents.push_back(t.node());
  }
  return n;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  Shape out{};
  for (std::size_t d = 0; d < 4; ++d) {
    if (a[d] == b[d] || b[d] == 1) {
      out[d] = a[d];
    } else if (a[d] == 1) {
      out[d] = b[d];
    } else {
      throw TensorError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                        shape_str(b));
    }
  }
  return out;
}

std::array<std::size_t, 4> bcast_strides(const Shape& s) {
  std::array<std::size_t, 4> st{s[1] * s[2] * s[3], s[2] * s[3], s[3], 1};
  for (std::size_t d = 0; d < 4; ++d) {
    if (s[d] == 1) st[d] = 0;
  }
  return st;
}

// Calls fn(out_index, a_index, b_index) over the broadcast output.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, Fn&& fn) {
  const auto sa = bcast_strides(a);
  const auto sb = bcast_strides(b);
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < out[0]; ++i0)
    for (std::size_t i1 = 0; i1 < out[1]; ++i1)
      for (std::size_t i2 = 0; i2 < out[2]; ++i2) {
        std::size_t ia = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
        std::size_t ib = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
        for (std::size_t i3 = 0; i3 < out[3]; ++i3, ++o) {
          fn(o, ia + i3 * sa[3], ib + i3 * sb[3]);
        }
      }
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  require_finite(a, name);
  require_finite(b, name);
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  auto n = make_node(out_shape, {&a, &b});
  const auto av = a.values();
  const auto bv = b.values();
  auto& ov = n->value;
  switch (op) {
    case BinOp::Add:
      for_each_broadcast(out_shape, a.shape(), b.shape(),
                         [&](std::size_t o, std::size_t i, std::size_t j) { ov[o] = av[i] + bv[j]; });
      break;
    case BinOp::Sub:
      for_each_broadcast(out_shape, a.shape(), b.shape(),
                         [&](std::size_t o, std::size_t i, std::size_t j) { ov[o] = av[i] - bv[j]; });
      break;
    case BinOp::Mul:
      for_each_broadcast(out_shape, a.shape(), b.shape(),
                         [&](std::size_t o, std::size_t i, std::size_t j) { ov[o] = av[i] * bv[j]; });
      break;
    case BinOp::Div:
      for_each_broadcast(out_shape, a.shape(), b.shape(),
                         [&](std::size_t o, std::size_t i, std::size_t j) {
                           if (bv[j] == 0.0) {
                             throw TensorError(std::string(name) + ": zero divisor at flat index " +
                                               std::to_string(j));
                           }
                           ov[o] = av[i] / bv[j];
                         });
      break;
  }
  if (n->requires_grad) {
    n->backward = [op](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      const auto& g = self.grad;
      if (pa.requires_grad) pa.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      for_each_broadcast(self.shape, pa.shape, pb.shape,
                         [&](std::size_t o, std::size_t i, std::size_t j) {
                           double ga = 0.0, gb = 0.0;
                           switch (op) {
                             case BinOp::Add: ga = g[o]; gb = g[o]; break;
                             case BinOp::Sub: ga = g[o]; gb = -g[o]; break;
                             case BinOp::Mul:
                               ga = g[o] * pb.value[j];
                               gb = g[o] * pa.value[i];
                               break;
                             case BinOp::Div:
                               ga = g[o] / pb.value[j];
                               gb = -g[o] * pa.value[i] / (pb.value[j] * pb.value[j]);
                               break;
                           }
                           if (pa.requires_grad) pa.grad[i] += ga;
                           if (pb.requires_grad) pb.grad[j] += gb;
                         });
    };
  }
  return Tensor(n);
}

// Elementwise unary op with derivative expressed through (x, y).
template <typename F, typename D>
Tensor unary(const Tensor& a, const char* name, F f, D df) {
  require_finite(a, name);
  auto n = make_node(a.shape(), {&a});
  const auto av = a.values();
  for (std::size_t i = 0; i < av.size(); ++i) n->value[i] = f(av[i]);
  if (n->requires_grad) {
    n->backward = [df](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < self.value.size(); ++i) {
        p.grad[i] += self.grad[i] * df(p.value[i], self.value[i]);
      }
    };
  }
  return Tensor(n);
}

}  // namespace

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }
bool grad_enabled() { return no_grad_depth == 0; }

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Div, "div"); }

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, "add_scalar", [s](double x) { return x + s; },
               [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary(a, "mul_scalar", [s](double x) { return x * s; },
               [s](double, double) { return s; });
}

Tensor relu(const Tensor& a) {
  return unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary(a, "leaky_relu", [slope](double x) { return x > 0.0 ? x : slope * x; },
               [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor replace_zeros(const Tensor& a, double fill) {
  return unary(a, "replace_zeros", [fill](double x) { return x == 0.0 ? fill : x; },
               [](double x, double) { return x == 0.0 ? 0.0 : 1.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_finite(a, "matmul");
  require_finite(b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa[3] != sb[2]) {
    throw TensorError("matmul: inner dims differ, " + shape_str(sa) + " x " + shape_str(sb));
  }
  const Shape lead = broadcast_shape(Shape{sa[0], sa[1], 1, 1}, Shape{sb[0], sb[1], 1, 1}, "matmul");
  const std::size_t M = sa[2], K = sa[3], N = sb[3];
  const Shape out_shape{lead[0], lead[1], M, N};
  auto n = make_node(out_shape, {&a, &b});

  const std::size_t a_mat = M * K, b_mat = K * N, o_mat = M * N;
  auto batch_index = [](const Shape& s, std::size_t i0, std::size_t i1) {
    return (s[0] == 1 ? 0 : i0) * s[1] + (s[1] == 1 ? 0 : i1);
  };
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i0 = 0; i0 < lead[0]; ++i0)
    for (std::size_t i1 = 0; i1 < lead[1]; ++i1) {
      const double* A = av.data() + batch_index(sa, i0, i1) * a_mat;
      const double* B = bv.data() + batch_index(sb, i0, i1) * b_mat;
      gemm(false, false, M, N, K, A, B, 0.0, n->value.data() + (i0 * lead[1] + i1) * o_mat);
    }

  if (n->requires_grad) {
    n->backward = [batch_index, M, K, N, a_mat, b_mat, o_mat](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      if (pa.requires_grad) pa.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      const Shape& lead = self.shape;
      for (std::size_t i0 = 0; i0 < lead[0]; ++i0)
        for (std::size_t i1 = 0; i1 < lead[1]; ++i1) {
          const std::size_t ba = batch_index(pa.shape, i0, i1) * a_mat;
          const std::size_t bb = batch_index(pb.shape, i0, i1) * b_mat;
          const double* G = self.grad.data() + (i0 * lead[1] + i1) * o_mat;
          const double* A = pa.value.data() + ba;
          const double* B = pb.value.data() + bb;
          if (pa.requires_grad) gemm(false, true, M, K, N, G, B, 1.0, pa.grad.data() + ba);
          if (pb.requires_grad) gemm(true, false, K, N, M, A, G, 1.0, pb.grad.data() + bb);
        }
    };
  }
  return Tensor(n);
}

Tensor mode4_product(const Tensor& x, const Tensor& w) {
  require_finite(x, "mode4_product");
  require_finite(w, "mode4_product");
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sw[0] != 1 || sw[1] != 1 || sw[2] != sx[3]) {
    throw TensorError("mode4_product: expected (1, 1, " + std::to_string(sx[3]) +
                      ", D) matrix, got " + shape_str(sw) + " for input " + shape_str(sx));
  }
  const std::size_t C = sx[3], D = sw[3];
  const std::size_t rows = sx[0] * sx[1] * sx[2];
  auto n = make_node(Shape{sx[0], sx[1], sx[2], D}, {&x, &w});
  const double* X = x.values().data();
  const double* W = w.values().data();
  gemm(false, false, rows, D, C, X, W, 0.0, n->value.data());
  if (n->requires_grad) {
    n->backward = [rows, C, D](Node& self) {
      Node& px = *self.parents[0];
      Node& pw = *self.parents[1];
      const double* G = self.grad.data();
      if (px.requires_grad) {
        px.ensure_grad();
        gemm(false, true, rows, C, D, G, pw.value.data(), 1.0, px.grad.data());
      }
      if (pw.requires_grad) {
        pw.ensure_grad();
        gemm(true, false, C, D, rows, px.value.data(), G, 1.0, pw.grad.data());
      }
    };
  }
  return Tensor(n);
}

Tensor permute(const Tensor& a, std::array<std::size_t, 4> axes) {
  {
    auto sorted = axes;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != std::array<std::size_t, 4>{0, 1, 2, 3}) throw TensorError("permute: invalid axes");
  }
  const Shape& s = a.shape();
  const Shape out{s[axes[0]], s[axes[1]], s[axes[2]], s[axes[3]]};
  const std::array<std::size_t, 4> in_strides{s[1] * s[2] * s[3], s[2] * s[3], s[3], 1};
  const std::array<std::size_t, 4> st{in_strides[axes[0]], in_strides[axes[1]], in_strides[axes[2]],
                                      in_strides[axes[3]]};
  auto n = make_node(out, {&a});
  // src[o] is the input flat index for output flat index o.
  auto src = std::make_shared<std::vector<std::size_t>>(numel(out));
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < out[0]; ++i0)
    for (std::size_t i1 = 0; i1 < out[1]; ++i1)
      for (std::size_t i2 = 0; i2 < out[2]; ++i2)
        for (std::size_t i3 = 0; i3 < out[3]; ++i3, ++o)
          (*src)[o] = i0 * st[0] + i1 * st[1] + i2 * st[2] + i3 * st[3];
  const auto av = a.values();
  for (std::size_t i = 0; i < src->size(); ++i) n->value[i] = av[(*src)[i]];
  if (n->requires_grad) {
    n->backward = [src](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < src->size(); ++i) p.grad[(*src)[i]] += self.grad[i];
    };
  }
  return Tensor(n);
}

Tensor transpose_last2(const Tensor& a) { return permute(a, {0, 1, 3, 2}); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw TensorError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto n = make_node(shape, {&a});
  std::copy(a.values().begin(), a.values().end(), n->value.begin());
  if (n->requires_grad) {
    n->backward = [](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    };
  }
  return Tensor(n);
}

namespace {

void softmax_backward(Node& self) {
  Node& p = *self.parents[0];
  p.ensure_grad();
  const std::size_t D = self.shape[3];
  const std::size_t rows = self.value.size() / D;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* y = self.value.data() + r * D;
    const double* g = self.grad.data() + r * D;
    double dot = 0.0;
    for (std::size_t j = 0; j < D; ++j) dot += g[j] * y[j];
    for (std::size_t j = 0; j < D; ++j) p.grad[r * D + j] += y[j] * (g[j] - dot);
  }
}

}  // namespace

Tensor softmax_last(const Tensor& a) {
  std::vector<std::uint8_t> keep(a.size(), 1);
  return masked_softmax_last(a, keep);
}

Tensor masked_softmax_last(const Tensor& a, std::span<const std::uint8_t> keep) {
  require_finite(a, "softmax");
  if (keep.size() != a.size()) throw TensorError("masked_softmax_last: mask size mismatch");
  const std::size_t D = a.dim(3);
  if (D == 0) return Tensor(a.shape());
  const std::size_t rows = a.size() / D;
  auto n = make_node(a.shape(), {&a});
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < D; ++j)
      if (keep[r * D + j]) mx = std::max(mx, av[r * D + j]);
    if (!std::isfinite(mx)) {
      throw TensorError("masked_softmax_last: row " + std::to_string(r) + " keeps no entries");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < D; ++j) {
      if (!keep[r * D + j]) continue;
      const double e = std::exp(av[r * D + j] - mx);
      n->value[r * D + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < D; ++j) n->value[r * D + j] /= z;
  }
  if (n->requires_grad) n->backward = softmax_backward;
  return Tensor(n);
}

Tensor concat_last(std::span<const Tensor> parts) {
  if (parts.empty()) throw TensorError("concat_last: no inputs");
  const Shape& s0 = parts[0].shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s[0] != s0[0] || s[1] != s0[1] || s[2] != s0[2]) {
      throw TensorError("concat_last: leading dims differ, " + shape_str(s0) + " vs " + shape_str(s));
    }
    require_finite(p, "concat_last");
    total += s[3];
  }
  const Shape out{s0[0], s0[1], s0[2], total};
  auto n = make_node(out, parts);
  const std::size_t rows = s0[0] * s0[1] * s0[2];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(3));
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].values();
    const std::size_t w = widths[k];
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.data() + r * w, w, n->value.data() + r * total + off);
    off += w;
  }
  if (n->requires_grad) {
    n->backward = [rows, total, widths](Node& self) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        Node& p = *self.parents[k];
        const std::size_t w = widths[k];
        if (p.requires_grad) {
          p.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) p.grad[r * w + c] += self.grad[r * total + off + c];
        }
        off += w;
      }
    };
  }
  return Tensor(n);
}

Tensor causal_conv1d(const Tensor& x, const Tensor& kernel) {
  require_finite(x, "causal_conv1d");
  require_finite(kernel, "causal_conv1d");
  const Shape& sx = x.shape();
  const Shape& sk = kernel.shape();
  if (sk[0] != 1 || sk[1] == 0 || sk[2] != sx[3]) {
    throw TensorError("causal_conv1d: kernel " + shape_str(sk) + " incompatible with input " +
                      shape_str(sx));
  }
  const std::size_t series = sx[0] * sx[1], T = sx[2], Ci = sx[3], K = sk[1], Co = sk[3];
  auto n = make_node(Shape{sx[0], sx[1], T, Co}, {&x, &kernel});
  const std::size_t rows = series * T;
  const double* X = x.values().data();
  const double* W = kernel.values().data();
  double* Y = n->value.data();
  // Tap `tap` reads `shift` = K-1-tap steps back: Y[s, t] += X[s, t - shift] W[tap] for t >= shift.
  std::vector<double> z(rows * Co);
  for (std::size_t tap = 0; tap < K; ++tap) {
    const std::size_t shift = K - 1 - tap;
    if (shift >= T) continue;
    gemm(false, false, rows, Co, Ci, X, W + tap * Ci * Co, 0.0, z.data());
    for (std::size_t s = 0; s < series; ++s)
      for (std::size_t t = shift; t < T; ++t) {
        double* y = Y + (s * T + t) * Co;
        const double* zr = z.data() + (s * T + t - shift) * Co;
        for (std::size_t o = 0; o < Co; ++o) y[o] += zr[o];
      }
  }
  if (n->requires_grad) {
    n->backward = [series, T, Ci, K, Co, rows](Node& self) {
      Node& px = *self.parents[0];
      Node& pk = *self.parents[1];
      if (px.requires_grad) px.ensure_grad();
      if (pk.requires_grad) pk.ensure_grad();
      const double* G = self.grad.data();
      std::vector<double> gs(rows * Co);
      for (std::size_t tap = 0; tap < K; ++tap) {
        const std::size_t shift = K - 1 - tap;
        if (shift >= T) continue;
        // gs[s, t] = G[s, t + shift], zero past the end of each series.
        std::fill(gs.begin(), gs.end(), 0.0);
        for (std::size_t s = 0; s < series; ++s)
          std::copy_n(G + (s * T + shift) * Co, (T - shift) * Co, gs.begin() + static_cast<std::ptrdiff_t>(s * T * Co));
        if (px.requires_grad) gemm(false, true, rows, Ci, Co, gs.data(), pk.value.data() + tap * Ci * Co, 1.0, px.grad.data());
        if (pk.requires_grad) gemm(true, false, Ci, Co, rows, px.value.data(), gs.data(), 1.0, pk.grad.data() + tap * Ci * Co);
      }
    };
  }
  return Tensor(n);
}

std::vector<std::uint8_t> topk_mask_last(const Tensor& scores, std::size_t k,
                                         std::span<const std::uint8_t> allowed) {
  if (allowed.size() != scores.size()) throw TensorError("topk_mask_last: mask size mismatch");
  const std::size_t D = scores.dim(3);
  std::vector<std::uint8_t> keep(scores.size(), 0);
  if (D == 0) return keep;
  const std::size_t rows = scores.size() / D;
  const auto sv = scores.values();
  std::vector<std::size_t> idx;
  for (std::size_t r = 0; r < rows; ++r) {
    idx.clear();
    for (std::size_t j = 0; j < D; ++j)
      if (allowed[r * D + j]) idx.push_back(j);
    const std::size_t take = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(),
                      [&](std::size_t p, std::size_t q) {
                        const double vp = sv[r * D + p], vq = sv[r * D + q];
                        return vp > vq || (vp == vq && p < q);
                      });
    for (std::size_t i = 0; i < take; ++i) keep[r * D + idx[i]] = 1;
  }
  return keep;
}

namespace {

// Full reduction to a scalar: value = sum_i f(x_i), grad_i = g * df(x_i).
template <typename F, typename D>
Tensor reduce(const Tensor& a, const char* name, F f, D df) {
  require_finite(a, name);
  auto n = make_node(Shape{1, 1, 1, 1}, {&a});
  double acc = 0.0;
  for (double v : a.values()) acc += f(v);
  n->value[0] = acc;
  if (n->requires_grad) {
    n->backward = [df](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      const double g = self.grad[0];
      for (std::size_t i = 0; i < p.value.size(); ++i) p.grad[i] += g * df(p.value[i]);
    };
  }
  return Tensor(n);
}

}  // namespace

Tensor sum(const Tensor& a) {
  return reduce(a, "sum", [](double x) { return x; }, [](double) { return 1.0; });
}

Tensor l1_norm(const Tensor& a) {
  return reduce(a, "l1_norm", [](double x) { return std::abs(x); },
                [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sum_squares(const Tensor& a) {
  return reduce(a, "sum_squares", [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Tensor frobenius_norm(const Tensor& a) {
  require_finite(a, "frobenius_norm");
  auto n = make_node(Shape{1, 1, 1, 1}, {&a});
  double acc = 0.0;
  for (double v : a.values()) acc += v * v;
  n->value[0] = std::sqrt(acc);
  if (n->requires_grad) {
    n->backward = [](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      const double norm = self.value[0];
      if (norm == 0.0) return;
      const double g = self.grad[0] / norm;
      for (std::size_t i = 0; i < p.value.size(); ++i) p.grad[i] += g * p.value[i];
    };
  }
  return Tensor(n);
}

Tensor sum_squares_last2(const Tensor& a) {
  require_finite(a, "sum_squares_last2");
  const Shape& s = a.shape();
  const std::size_t blocks = s[0] * s[1], len = s[2] * s[3];
  auto n = make_node(Shape{s[0], s[1], 1, 1}, {&a});
  const auto av = a.values();
  for (std::size_t b = 0; b < blocks; ++b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < len; ++i) acc += av[b * len + i] * av[b * len + i];
    n->value[b] = acc;
  }
  if (n->requires_grad) {
    n->backward = [blocks, len](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      for (std::size_t b = 0; b < blocks; ++b)
        for (std::size_t i = 0; i < len; ++i)
          p.grad[b * len + i] += 2.0 * self.grad[b] * p.value[b * len + i];
    };
  }
  return Tensor(n);
}

Tensor l2_normalize_last(const Tensor& a) {
  require_finite(a, "l2_normalize_last");
  const std::size_t D = a.dim(3);
  if (D == 0) return Tensor(a.shape());
  const std::size_t rows = a.size() / D;
  auto n = make_node(a.shape(), {&a});
  auto norms = std::make_shared<std::vector<double>>(rows, 0.0);
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < D; ++j) acc += av[r * D + j] * av[r * D + j];
    const double norm = std::sqrt(acc);
    (*norms)[r] = norm;
    if (norm == 0.0) continue;
    for (std::size_t j = 0; j < D; ++j) n->value[r * D + j] = av[r * D + j] / norm;
  }
  if (n->requires_grad) {
    n->backward = [norms, D, rows](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      // d(x/|x|) = (I - y y^T) / |x|
      for (std::size_t r = 0; r < rows; ++r) {
        const double norm = (*norms)[r];
        if (norm == 0.0) continue;
        const double* y = self.value.data() + r * D;
        const double* g = self.grad.data() + r * D;
        double dot = 0.0;
        for (std::size_t j = 0; j < D; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < D; ++j) p.grad[r * D + j] += (g[j] - y[j] * dot) / norm;
      }
    };
  }
  return Tensor(n);
}

Tensor dirichlet_energy(const Tensor& adj, const Tensor& signals) {
  require_finite(adj, "dirichlet_energy");
  require_finite(signals, "dirichlet_energy");
  const Shape& sa = adj.shape();
  const Shape& sx = signals.shape();
  if (sa[1] != 1 || sa[2] != sa[3] || sx[0] != sa[0] || sx[1] != sa[2] || sx[3] != 1) {
    throw TensorError("dirichlet_energy: adjacency " + shape_str(sa) + " incompatible with signals " +
                      shape_str(sx));
  }
  const std::size_t B = sa[0], N = sa[2], T = sx[2];
  const double scale = (B * N * T) > 0 ? 1.0 / static_cast<double>(B * N * T) : 0.0;
  // Pairwise squared distances are constants of the signals.
  auto dist = std::make_shared<std::vector<double>>(B * N * N, 0.0);
  const auto xv = signals.values();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
          const double d = xv[(b * N + i) * T + t] - xv[(b * N + j) * T + t];
          acc += d * d;
        }
        (*dist)[(b * N + i) * N + j] = acc;
      }
  auto n = make_node(Shape{1, 1, 1, 1}, {&adj});
  const auto av = adj.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < dist->size(); ++i) acc += av[i] * (*dist)[i];
  n->value[0] = acc * scale;
  if (n->requires_grad) {
    n->backward = [dist, scale](Node& self) {
      Node& p = *self.parents[0];
      p.ensure_grad();
      const double g = self.grad[0] * scale;
      for (std::size_t i = 0; i < dist->size(); ++i) p.grad[i] += g * (*dist)[i];
    };
  }
  return Tensor(n);
}

GradCheckResult finite_difference_check(const std::function<Tensor()>& loss, Tensor& leaf,
                                        double step, double eps) {
  if (!(step > 0.0)) throw TensorError("finite_difference_check: step must be positive");
  const bool was_tracked = leaf.requires_grad();
  leaf.set_requires_grad(true);
  leaf.zero_grad();
  {
    const Tensor l = loss();
    if (!std::isfinite(l.item())) throw TensorError("finite_difference_check: nonfinite loss at base point");
    backward(l);
  }
  const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());

  GradCheckResult res;
  auto vals = leaf.mutable_values();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double orig = vals[i];
    vals[i] = orig + step;
    const double fp = loss().item();
    vals[i] = orig - step;
    const double fm = loss().item();
    vals[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw TensorError("finite_difference_check: nonfinite evaluation at coordinate " +
                        std::to_string(i));
    }
    const double numeric = (fp - fm) / (2.0 * step);
    const double err = std::abs(analytic[i] - numeric) / (std::abs(numeric) + eps);
    if (err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
    }
  }
  leaf.set_requires_grad(was_tracked);
  return res;
}

GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                                        const Tensor& at, double step, double eps) {
  Tensor x = at.clone();
  return finite_difference_check([&] { return f(x); }, x, step, eps);
}

}  // namespace flowkrig
