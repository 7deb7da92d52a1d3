#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "flowkrig/graph.hpp"
#include "flowkrig/optim.hpp"
#include "flowkrig/rng.hpp"
#include "flowkrig/tensor.hpp"

namespace flowkrig {

enum class AttentionScale {
  FrobeniusSq,  // divide scores by ||Z W_t||_F^2
  SqrtDim,      // divide scores by sqrt(C)
};

std::string attention_scale_name(AttentionScale s);
AttentionScale parse_attention_scale(const std::string& name);

struct ModelConfig {
  unsigned diffusion_steps = 1;
  std::size_t hidden_dim = 128;
  std::size_t num_tdcn_layers = 5;
  std::size_t tcn_kernel = 3;
  std::size_t num_tcn_layers = 1;
  std::size_t seq_len = 24;
  std::size_t topk = 0;  // 0 selects ceil(seq_len / 4)
  double leaky_slope = 0.2;
  AttentionScale attention_scale = AttentionScale::FrobeniusSq;

  std::size_t effective_topk() const;
  /// Width of the concatenated feature map fed to the output layer.
  std::size_t fusion_width() const { return (num_tdcn_layers + 1) * hidden_dim; }
  void validate() const;
};

/// Every trainable tensor of the network, in a fixed order.
class ModelState {
 public:
  ModelState() = default;
  ModelState(const ModelConfig& cfg, Rng& rng);

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }

  const Tensor& get(const std::string& name) const;
  Parameter& param(const std::string& name);
  std::size_t parameter_count() const;

  /// Appends a parameter; names must be unique.
  void add(Parameter p);

 private:
  std::vector<Parameter> params_;
};

/// Graph operands for one node set: diffusion matrix powers and lane counts.
struct GraphContext {
  std::size_t nodes = 0;
  std::vector<Tensor> fwd0, bwd0;  // A_f0^k, A_b0^k for k = 1..K, shaped (1, 1, N, N)
  std::vector<Tensor> fwd, bwd;    // A_f^k, A_b^k for k = 1..K
  Tensor lanes;                    // (1, N, 1, 1)
};

GraphContext make_graph_context(const AdjacencySet& adj, std::span<const int> lanes, unsigned diffusion_steps);

/// Y[b, i, t, :] = sum_j adj[b, i, j] * H[b, j, t, :]. adj is (1|B, 1, N, N).
Tensor graph_propagate(const Tensor& adj, const Tensor& h);

/// First diffusion layer over self-loop-free transitions, k = 1..K, divided
/// by lane counts. volume: (B, N, L, 1) -> (B, N, L, C).
Tensor tdcn_layer0(const Tensor& volume, const GraphContext& g, const ModelState& s, const ModelConfig& cfg);

/// Speed-pattern attention graph: row-softmax of LeakyReLU(cosine(W x_i, W x_j)).
/// speed: (B, N, L, 1), w: (1, 1, L, C) -> (B, 1, N, N).
Tensor spam(const Tensor& speed, const Tensor& w, double leaky_slope);

/// Diffusion + attention-graph convolution at stacked layer `layer` (>= 1),
/// with ReLU and a residual connection.
Tensor spatial_conv(const Tensor& h, const GraphContext& g, const Tensor& a_spa, const ModelState& s,
                    std::size_t layer, const ModelConfig& cfg);

struct AttentionOutput {
  Tensor output;   // (B, N, T, C)
  Tensor weights;  // (B, N, T, T), zero on masked entries
};

/// Causal, top-k clipped self-attention along time with a shared projection.
AttentionOutput temporal_attention(const Tensor& h, const Tensor& w_t, std::size_t topk, AttentionScale scale);

/// (theta1 * Z + b1 + Z) .* sigmoid(theta2 * Z + b2), causal along time.
Tensor gated_tcn(const Tensor& z, const Tensor& theta1, const Tensor& theta2, const Tensor& b1,
                 const Tensor& b2);

/// CONCAT(H^0..H^m) x W_o + B_o, scaled back to total volume by the lane count.
Tensor output_fusion(std::span<const Tensor> layers, const Tensor& w_o, const Tensor& b_o, const Tensor& lanes);

struct ForwardResult {
  Tensor estimate;  // (B, N, L, 1)
  Tensor a_spa;     // (B, 1, N, N)
};

/// Full network: layer 0 -> temporal attention + gated TCN -> stacked
/// spatial layers -> fusion. volume_masked and speed are (B, N, L, 1).
ForwardResult model_forward(const Tensor& volume_masked, const Tensor& speed, const GraphContext& g,
                            const ModelState& s, const ModelConfig& cfg);

}  // namespace flowkrig
