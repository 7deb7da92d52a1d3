#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowkrig/graph.hpp"
#include "flowkrig/model.hpp"
#include "flowkrig/optim.hpp"
#include "flowkrig/rng.hpp"
#include "flowkrig/series.hpp"
#include "flowkrig/tensor.hpp"

namespace flowkrig {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t batches_per_epoch = 16;
  std::size_t max_epochs = 300;
  std::size_t mask_count = 0;  // 0: derive from mask_ratio
  double mask_ratio = 0.5;
  double lr = 5e-4;
  double lambda = 1e-4;
  std::size_t patience = 20;
  double val_fraction = 0.1;
  std::size_t val_windows = 32;
  std::uint64_t seed = 0;

  /// Masked node count for a training graph of `n_train` nodes.
  std::size_t masked_nodes(std::size_t n_train) const;
  void validate() const;
};

/// Per-network min-max scaling of volumes into [0, 1].
struct Scaler {
  double min = 0.0;
  double max = 1.0;

  static Scaler fit(const SeriesMatrix& volume, std::span<const std::size_t> rows);
  double range() const { return max > min ? max - min : 1.0; }
  double forward(double v) const { return (v - min) / range(); }
  double inverse(double v) const { return v * range() + min; }
};

/// Everything needed to run inference on any node set of a network.
struct TrainedModel {
  ModelConfig config;
  ModelState state;
  Scaler scaler;
  KernelParams kernel;
};

struct Batch {
  Tensor volume;  // (B, N, L, 1)
  Tensor speed;   // (B, N, L, 1)
  std::vector<std::size_t> window_starts;
};

/// B windows of length L at uniformly drawn offsets, sliced identically from
/// both series. Rows of the matrices are the nodes of the batch graph.
Batch sample_batch(const SeriesMatrix& volume, const SeriesMatrix& speed, std::size_t seq_len,
                   std::size_t batch_size, Rng& rng);

struct MaskedInput {
  Tensor input;                     // masked node rows zeroed
  std::vector<std::uint8_t> keep;   // (B * N), 0 for masked nodes
  std::vector<std::vector<std::size_t>> masked;  // per batch element, draw order
};

/// Draws n_m distinct nodes per batch element and zeroes their input rows.
MaskedInput mask_nodes(const Tensor& volume, std::size_t n_masked, Rng& rng);

/// L1 norm of X_hat - X_v over every entry, masked and observed alike.
Tensor reconstruction_loss(const Tensor& truth, const Tensor& estimate);

/// Dirichlet energy of the ground-truth volume windows on the attention graphs.
Tensor laplacian_regularizer(const Tensor& a_spa, const Tensor& truth);

struct LossTerms {
  Tensor total;
  double reconstruction = 0.0;
  double regularizer = 0.0;
};

LossTerms total_loss(const Tensor& truth, const ForwardResult& fwd, double lambda);

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t epoch, std::size_t batch, const std::string& what);
  std::size_t epoch;
  std::size_t batch;
};

struct BatchRecord {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double total = 0.0;
  double reconstruction = 0.0;
  double regularizer = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean total loss over the epoch's batches
  std::optional<double> val_mae;
};

struct TrainResult {
  TrainedModel model;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  std::vector<std::size_t> train_nodes;       // network indices
  std::vector<std::size_t> validation_nodes;  // network indices
};

struct TrainHooks {
  std::function<void(const BatchRecord&)> on_batch;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Trains on the observed nodes only. Kernel parameters are fixed up front
/// (normally from the full network) and stored with the model.
TrainResult train(const SensorNetwork& net, const SeriesMatrix& volume, const SeriesMatrix& speed,
                  std::span<const std::size_t> observed, const KernelParams& kernel, const ModelConfig& model_cfg,
                  const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Inductive inference on the full network: observed volumes are fed,
/// unobserved rows zeroed, and every node is estimated over non-overlapping
/// windows covering the series. Returns an N x T matrix in vehicle units.
SeriesMatrix estimate_volumes(const TrainedModel& model, const SensorNetwork& net, const SeriesMatrix& volume,
                              const SeriesMatrix& speed, std::span<const std::size_t> observed,
                              std::size_t windows_per_pass = 16);

}  // namespace flowkrig
