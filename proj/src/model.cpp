#include "flowkrig/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace flowkrig {

std::string attention_scale_name(AttentionScale s) {
  return s == AttentionScale::FrobeniusSq ? "frobenius_sq" : "sqrt_dim";
}

AttentionScale parse_attention_scale(const std::string& name) {
  if (name == "frobenius_sq") return AttentionScale::FrobeniusSq;
  if (name == "sqrt_dim") return AttentionScale::SqrtDim;
  throw std::invalid_argument("unknown attention scale mode '" + name + "'");
}

std::size_t ModelConfig::effective_topk() const { return topk == 0 ? (seq_len + 3) / 4 : topk; }

void ModelConfig::validate() const {
  if (hidden_dim == 0 || num_tdcn_layers == 0 || tcn_kernel == 0 || num_tcn_layers == 0 || seq_len == 0) {
    throw std::invalid_argument("model config: dimensions and layer counts must be positive");
  }
  if (diffusion_steps == 0) throw std::invalid_argument("model config: diffusion_steps must be >= 1");
  if (effective_topk() > seq_len) throw std::invalid_argument("model config: topk exceeds seq_len");
  if (!(leaky_slope >= 0.0)) throw std::invalid_argument("model config: leaky_slope must be >= 0");
}

namespace {

Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(-limit, limit);
  return Tensor(shape, std::move(v));
}

std::string key(const std::string& prefix, std::size_t i) { return prefix + "." + std::to_string(i); }

}  // namespace

ModelState::ModelState(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t C = cfg.hidden_dim, K = cfg.diffusion_steps;
  for (std::size_t k = 1; k <= K; ++k) {
    add({key("tdcn0.w_f", k), glorot({1, 1, 1, C}, 1, C, rng)});
    add({key("tdcn0.w_b", k), glorot({1, 1, 1, C}, 1, C, rng)});
  }
  add({"tatt.w_t", glorot({1, 1, C, C}, C, C, rng)});
  const std::size_t kt = cfg.tcn_kernel;
  for (std::size_t i = 0; i < cfg.num_tcn_layers; ++i) {
    const std::string p = "tcn" + std::to_string(i);
    add({p + ".theta1", glorot({1, kt, C, C}, kt * C, kt * C, rng)});
    add({p + ".theta2", glorot({1, kt, C, C}, kt * C, kt * C, rng)});
    add({p + ".b1", Tensor({1, 1, 1, C})});
    add({p + ".b2", Tensor({1, 1, 1, C})});
  }
  add({"spam.w", glorot({1, 1, cfg.seq_len, C}, cfg.seq_len, C, rng)});
  for (std::size_t l = 1; l < cfg.num_tdcn_layers; ++l) {
    const std::string p = "tdcn" + std::to_string(l);
    for (std::size_t k = 0; k <= K; ++k) {
      add({key(p + ".w_f", k), glorot({1, 1, C, C}, C, C, rng)});
      add({key(p + ".w_b", k), glorot({1, 1, C, C}, C, C, rng)});
    }
    add({p + ".w_spa", glorot({1, 1, C, C}, C, C, rng)});
  }
  add({"out.w", glorot({1, 1, cfg.fusion_width(), 1}, cfg.fusion_width(), 1, rng)});
  add({"out.b", Tensor({1, 1, 1, 1})});
}

void ModelState::add(Parameter p) {
  for (const auto& q : params_)
    if (q.name == p.name) throw std::invalid_argument("duplicate parameter name '" + p.name + "'");
  params_.push_back(std::move(p));
}

const Tensor& ModelState::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.tensor;
  throw std::out_of_range("no parameter named '" + name + "'");
}

Parameter& ModelState::param(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p;
  throw std::out_of_range("no parameter named '" + name + "'");
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

namespace {

Tensor as_tensor(const Matrix& m) { return Tensor({1, 1, m.rows, m.cols}, m.data); }

}  // namespace

GraphContext make_graph_context(const AdjacencySet& adj, std::span<const int> lanes, unsigned diffusion_steps) {
  const std::size_t n = adj.size();
  if (lanes.size() != n) throw std::invalid_argument("graph context: lane vector length differs from node count");
  GraphContext g;
  g.nodes = n;
  Matrix pf0 = Matrix::identity(n), pb0 = pf0, pf = pf0, pb = pf0;
  for (unsigned k = 1; k <= diffusion_steps; ++k) {
    pf0 = matmul(pf0, adj.a_f0);
    pb0 = matmul(pb0, adj.a_b0);
    pf = matmul(pf, adj.a_f);
    pb = matmul(pb, adj.a_b);
    g.fwd0.push_back(as_tensor(pf0));
    g.bwd0.push_back(as_tensor(pb0));
    g.fwd.push_back(as_tensor(pf));
    g.bwd.push_back(as_tensor(pb));
  }
  std::vector<double> e(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (lanes[i] < 1) throw std::invalid_argument("graph context: lane count must be >= 1");
    e[i] = static_cast<double>(lanes[i]);
  }
  g.lanes = Tensor({1, n, 1, 1}, std::move(e));
  return g;
}

Tensor graph_propagate(const Tensor& adj, const Tensor& h) {
  const Shape& s = h.shape();
  if (adj.dim(2) != s[1] || adj.dim(3) != s[1]) {
    throw TensorError("graph_propagate: adjacency " + shape_str(adj.shape()) + " vs features " + shape_str(s));
  }
  if (adj.dim(0) != 1 && adj.dim(0) != s[0]) {
    throw TensorError("graph_propagate: adjacency batch " + std::to_string(adj.dim(0)) + " vs feature batch " +
                      std::to_string(s[0]));
  }
  // (B, N, T, C) is row-major, so each batch slice is an N x (T*C) matrix.
  const Tensor flat = reshape(h, {s[0], 1, s[1], s[2] * s[3]});
  return reshape(matmul(adj, flat), s);
}

Tensor tdcn_layer0(const Tensor& volume, const GraphContext& g, const ModelState& s, const ModelConfig& cfg) {
  if (volume.dim(1) != g.nodes || volume.dim(3) != 1) {
    throw TensorError("tdcn_layer0: expected (B, " + std::to_string(g.nodes) + ", L, 1), got " +
                      shape_str(volume.shape()));
  }
  Tensor acc;
  for (std::size_t k = 1; k <= cfg.diffusion_steps; ++k) {
    const Tensor f = mode4_product(graph_propagate(g.fwd0[k - 1], volume), s.get(key("tdcn0.w_f", k)));
    const Tensor b = mode4_product(graph_propagate(g.bwd0[k - 1], volume), s.get(key("tdcn0.w_b", k)));
    const Tensor term = add(f, b);
    acc = k == 1 ? term : add(acc, term);
  }
  return div(acc, g.lanes);
}

Tensor spam(const Tensor& speed, const Tensor& w, double leaky_slope) {
  const Shape& s = speed.shape();
  if (s[3] != 1 || w.dim(2) != s[2]) {
    throw TensorError("spam: speed " + shape_str(s) + " incompatible with projection " + shape_str(w.shape()));
  }
  const Tensor rows = reshape(speed, {s[0], 1, s[1], s[2]});  // one speed window per node
  const Tensor unit = l2_normalize_last(mode4_product(rows, w));
  const Tensor cosine = matmul(unit, transpose_last2(unit));
  return softmax_last(leaky_relu(cosine, leaky_slope));
}

Tensor spatial_conv(const Tensor& h, const GraphContext& g, const Tensor& a_spa, const ModelState& s,
                    std::size_t layer, const ModelConfig& cfg) {
  if (layer == 0) throw std::invalid_argument("spatial_conv: layer index must be >= 1");
  if (a_spa.dim(0) != h.dim(0) || a_spa.dim(2) != h.dim(1)) {
    throw TensorError("spatial_conv: attention graph " + shape_str(a_spa.shape()) + " does not match features " +
                      shape_str(h.shape()));
  }
  const std::string p = "tdcn" + std::to_string(layer);
  const Tensor& w_spa = s.get(p + ".w_spa");
  // k = 0: identity diffusion for all three graphs.
  Tensor acc = add(add(mode4_product(h, s.get(key(p + ".w_f", 0))), mode4_product(h, s.get(key(p + ".w_b", 0)))),
                   mode4_product(h, w_spa));
  Tensor spa_pow = a_spa;
  for (std::size_t k = 1; k <= cfg.diffusion_steps; ++k) {
    if (k > 1) spa_pow = matmul(spa_pow, a_spa);
    acc = add(acc, mode4_product(graph_propagate(g.fwd[k - 1], h), s.get(key(p + ".w_f", k))));
    acc = add(acc, mode4_product(graph_propagate(g.bwd[k - 1], h), s.get(key(p + ".w_b", k))));
    acc = add(acc, mode4_product(graph_propagate(spa_pow, h), w_spa));
  }
  return add(h, relu(acc));
}

AttentionOutput temporal_attention(const Tensor& h, const Tensor& w_t, std::size_t topk, AttentionScale scale) {
  if (topk == 0) throw std::invalid_argument("temporal_attention: topk must be >= 1");
  const Tensor proj = mode4_product(h, w_t);
  Tensor scores = matmul(proj, transpose_last2(proj));
  if (scale == AttentionScale::FrobeniusSq) {
    // A node whose projection is all zero has all-zero scores; any nonzero
    // divisor leaves them zero.
    scores = div(scores, replace_zeros(sum_squares_last2(proj), 1.0));
  } else {
    scores = mul_scalar(scores, 1.0 / std::sqrt(static_cast<double>(h.dim(3))));
  }
  const std::size_t T = h.dim(2);
  std::vector<std::uint8_t> causal(scores.size());
  for (std::size_t r = 0; r < scores.size() / (T * T); ++r)
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j) causal[(r * T + i) * T + j] = j <= i ? 1 : 0;
  const auto keep = topk_mask_last(scores, topk, causal);
  Tensor weights = masked_softmax_last(scores, keep);
  return {matmul(weights, proj), weights};
}

Tensor gated_tcn(const Tensor& z, const Tensor& theta1, const Tensor& theta2, const Tensor& b1, const Tensor& b2) {
  const Tensor linear = add(add(causal_conv1d(z, theta1), b1), z);
  const Tensor gate = sigmoid(add(causal_conv1d(z, theta2), b2));
  return mul(linear, gate);
}

Tensor output_fusion(std::span<const Tensor> layers, const Tensor& w_o, const Tensor& b_o, const Tensor& lanes) {
  const Tensor fused = add(mode4_product(concat_last(layers), w_o), b_o);
  return mul(fused, lanes);
}

ForwardResult model_forward(const Tensor& volume_masked, const Tensor& speed, const GraphContext& g,
                            const ModelState& s, const ModelConfig& cfg) {
  cfg.validate();
  const Shape& sv = volume_masked.shape();
  if (sv != speed.shape()) {
    throw TensorError("model_forward: volume " + shape_str(sv) + " and speed " + shape_str(speed.shape()) +
                      " differ");
  }
  if (sv[1] != g.nodes || sv[2] != cfg.seq_len || sv[3] != 1) {
    throw TensorError("model_forward: expected (B, " + std::to_string(g.nodes) + ", " +
                      std::to_string(cfg.seq_len) + ", 1), got " + shape_str(sv));
  }
  if (g.fwd.size() != cfg.diffusion_steps) {
    throw std::invalid_argument("model_forward: graph context built for a different diffusion step count");
  }

  std::vector<Tensor> layers;
  layers.push_back(tdcn_layer0(volume_masked, g, s, cfg));

  Tensor h = temporal_attention(layers.back(), s.get("tatt.w_t"), cfg.effective_topk(), cfg.attention_scale).output;
  for (std::size_t i = 0; i < cfg.num_tcn_layers; ++i) {
    const std::string p = "tcn" + std::to_string(i);
    h = gated_tcn(h, s.get(p + ".theta1"), s.get(p + ".theta2"), s.get(p + ".b1"), s.get(p + ".b2"));
  }
  layers.push_back(h);

  const Tensor a_spa = spam(speed, s.get("spam.w"), cfg.leaky_slope);
  for (std::size_t l = 1; l < cfg.num_tdcn_layers; ++l) {
    h = spatial_conv(h, g, a_spa, s, l, cfg);
    layers.push_back(h);
  }
  return {output_fusion(layers, s.get("out.w"), s.get("out.b"), g.lanes), a_spa};
}

}  // namespace flowkrig
