#include "flowkrig/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace flowkrig {

std::size_t TrainConfig::masked_nodes(std::size_t n_train) const {
  if (mask_count != 0) return mask_count;
  return static_cast<std::size_t>(std::llround(mask_ratio * static_cast<double>(n_train)));
}

void TrainConfig::validate() const {
  if (batch_size == 0 || batches_per_epoch == 0 || max_epochs == 0) {
    throw std::invalid_argument("train config: batch_size, batches_per_epoch and max_epochs must be positive");
  }
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw std::invalid_argument("train config: mask_ratio must be in (0, 1)");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument("train config: val_fraction must be in [0, 1)");
  }
  if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
  if (!(lambda >= 0.0)) throw std::invalid_argument("train config: lambda must be >= 0");
}

Scaler Scaler::fit(const SeriesMatrix& volume, std::span<const std::size_t> rows) {
  Scaler s{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (std::size_t r : rows)
    for (double v : volume.row(r)) {
      s.min = std::min(s.min, v);
      s.max = std::max(s.max, v);
    }
  if (rows.empty() || volume.cols == 0) return {};
  return s;
}

namespace {

Tensor window_tensor(const SeriesMatrix& m, std::span<const std::size_t> starts, std::size_t len,
                     const Scaler* scaler = nullptr) {
  const std::size_t B = starts.size(), N = m.rows;
  std::vector<double> v(B * N * len);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t t = 0; t < len; ++t) {
        const double x = m(n, starts[b] + t);
        v[(b * N + n) * len + t] = scaler ? scaler->forward(x) : x;
      }
  return Tensor({B, N, len, 1}, std::move(v));
}

}  // namespace

Batch sample_batch(const SeriesMatrix& volume, const SeriesMatrix& speed, std::size_t seq_len, std::size_t batch_size,
                   Rng& rng) {
  if (volume.rows != speed.rows || volume.cols != speed.cols) {
    throw std::invalid_argument("sample_batch: volume and speed dimensions differ");
  }
  if (seq_len == 0 || volume.cols < seq_len) {
    throw std::invalid_argument("sample_batch: series of length " + std::to_string(volume.cols) +
                                " is shorter than the window length " + std::to_string(seq_len));
  }
  Batch b;
  b.window_starts.resize(batch_size);
  for (auto& s : b.window_starts) s = rng.below(volume.cols - seq_len + 1);
  b.volume = window_tensor(volume, b.window_starts, seq_len);
  b.speed = window_tensor(speed, b.window_starts, seq_len);
  return b;
}

MaskedInput mask_nodes(const Tensor& volume, std::size_t n_masked, Rng& rng) {
  const std::size_t B = volume.dim(0), N = volume.dim(1);
  if (n_masked == 0 || n_masked >= N) {
    throw std::invalid_argument("mask_nodes: masked count " + std::to_string(n_masked) + " must be in [1, " +
                                std::to_string(N) + ")");
  }
  MaskedInput out;
  out.keep.assign(B * N, 1);
  out.input = volume.detach().clone();
  const std::size_t row = volume.dim(2) * volume.dim(3);
  auto v = out.input.mutable_values();
  for (std::size_t b = 0; b < B; ++b) {
    out.masked.push_back(rng.sample_without_replacement(N, n_masked));
    for (std::size_t n : out.masked.back()) {
      out.keep[b * N + n] = 0;
      std::fill_n(v.begin() + static_cast<std::ptrdiff_t>((b * N + n) * row), row, 0.0);
    }
  }
  return out;
}

Tensor reconstruction_loss(const Tensor& truth, const Tensor& estimate) {
  if (truth.shape() != estimate.shape()) {
    throw TensorError("reconstruction_loss: " + shape_str(truth.shape()) + " vs " + shape_str(estimate.shape()));
  }
  return l1_norm(sub(estimate, truth));
}

Tensor laplacian_regularizer(const Tensor& a_spa, const Tensor& truth) { return dirichlet_energy(a_spa, truth); }

LossTerms total_loss(const Tensor& truth, const ForwardResult& fwd, double lambda) {
  const Tensor rec = reconstruction_loss(truth, fwd.estimate);
  const Tensor reg = laplacian_regularizer(fwd.a_spa, truth);
  return {add(rec, mul_scalar(reg, lambda)), rec.item(), reg.item()};
}

DivergenceError::DivergenceError(std::size_t e, std::size_t b, const std::string& what)
    : std::runtime_error("training diverged at epoch " + std::to_string(e) + ", batch " + std::to_string(b) + ": " +
                         what),
      epoch(e),
      batch(b) {}

namespace {

std::vector<std::size_t> evenly_spaced_starts(std::size_t T, std::size_t L, std::size_t count) {
  const std::size_t span = T - L;
  count = std::min(count, span + 1);
  std::vector<std::size_t> s(count);
  for (std::size_t i = 0; i < count; ++i) s[i] = count == 1 ? 0 : i * span / (count - 1);
  return s;
}

// Mean absolute error in vehicle units at `targets` (rows of the val graph).
double validation_mae(const TrainedModel& m, const GraphContext& g, const SeriesMatrix& vol, const SeriesMatrix& spd,
                      std::span<const std::size_t> starts, std::span<const std::size_t> targets) {
  NoGradGuard no_grad;
  const std::size_t L = m.config.seq_len, N = vol.rows;
  std::vector<std::uint8_t> hidden(N, 0);
  for (std::size_t t : targets) hidden[t] = 1;
  double err = 0.0;
  std::size_t count = 0;
  for (std::size_t off = 0; off < starts.size(); off += 16) {
    const auto chunk = starts.subspan(off, std::min<std::size_t>(16, starts.size() - off));
    Tensor input = window_tensor(vol, chunk, L, &m.scaler);
    auto v = input.mutable_values();
    for (std::size_t b = 0; b < chunk.size(); ++b)
      for (std::size_t n = 0; n < N; ++n)
        if (hidden[n]) std::fill_n(v.begin() + static_cast<std::ptrdiff_t>((b * N + n) * L), L, 0.0);
    const Tensor y = model_forward(input, window_tensor(spd, chunk, L), g, m.state, m.config).estimate;
    for (std::size_t b = 0; b < chunk.size(); ++b)
      for (std::size_t n : targets)
        for (std::size_t t = 0; t < L; ++t) {
          err += std::abs(m.scaler.inverse(y.at(b, n, t, 0)) - vol(n, chunk[b] + t));
          ++count;
        }
  }
  return err / static_cast<double>(count);
}

std::vector<std::vector<double>> snapshot(const ModelState& s) {
  std::vector<std::vector<double>> out;
  for (const auto& p : s.params()) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

void restore(ModelState& s, const std::vector<std::vector<double>>& snap) {
  for (std::size_t i = 0; i < snap.size(); ++i) std::ranges::copy(snap[i], s.params()[i].tensor.mutable_values().begin());
}

}  // namespace

TrainResult train(const SensorNetwork& net, const SeriesMatrix& volume, const SeriesMatrix& speed,
                  std::span<const std::size_t> observed, const KernelParams& kernel, const ModelConfig& model_cfg,
                  const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  model_cfg.validate();
  if (volume.rows != net.size() || speed.rows != net.size() || volume.cols != speed.cols) {
    throw std::invalid_argument("train: series dimensions do not match the network");
  }
  if (volume.cols < model_cfg.seq_len) throw std::invalid_argument("train: series shorter than seq_len");
  std::vector<std::size_t> obs(observed.begin(), observed.end());
  std::ranges::sort(obs);
  if (std::ranges::adjacent_find(obs) != obs.end() || (!obs.empty() && obs.back() >= net.size())) {
    throw std::invalid_argument("train: observed node list has duplicates or out-of-range indices");
  }

  Rng rng(cfg.seed);
  TrainResult result;
  const std::size_t n_val =
      cfg.val_fraction > 0.0 ? std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.val_fraction * obs.size())))
                             : 0;
  if (n_val >= obs.size()) throw std::invalid_argument("train: too few observed nodes for a validation split");
  {
    std::vector<std::uint8_t> is_val(obs.size(), 0);
    for (std::size_t k : rng.sample_without_replacement(obs.size(), n_val)) is_val[k] = 1;
    for (std::size_t k = 0; k < obs.size(); ++k) (is_val[k] ? result.validation_nodes : result.train_nodes).push_back(obs[k]);
  }
  const std::size_t n_train = result.train_nodes.size();
  const std::size_t n_m = cfg.masked_nodes(n_train);
  if (n_m == 0 || n_m >= n_train) {
    throw std::invalid_argument("train: masked node count " + std::to_string(n_m) + " must be in [1, " +
                                std::to_string(n_train) + ")");
  }

  TrainedModel& m = result.model;
  m.config = model_cfg;
  m.kernel = kernel;
  m.scaler = Scaler::fit(volume, obs);
  m.state = ModelState(model_cfg, rng);

  std::vector<int> lanes;
  for (std::size_t i : result.train_nodes) lanes.push_back(net.lanes[i]);
  const GraphContext g_train =
      make_graph_context(build_adjacency_set(net, kernel, result.train_nodes), lanes, model_cfg.diffusion_steps);
  SeriesMatrix vol_train = select_rows(volume, result.train_nodes);
  for (double& v : vol_train.data) v = m.scaler.forward(v);
  const SeriesMatrix spd_train = select_rows(speed, result.train_nodes);

  // Validation graph: all observed nodes, validation rows hidden.
  GraphContext g_val;
  SeriesMatrix vol_val, spd_val;
  std::vector<std::size_t> val_rows, val_starts;
  if (n_val > 0) {
    std::vector<int> l;
    for (std::size_t i : obs) l.push_back(net.lanes[i]);
    g_val = make_graph_context(build_adjacency_set(net, kernel, obs), l, model_cfg.diffusion_steps);
    vol_val = select_rows(volume, obs);
    spd_val = select_rows(speed, obs);
    for (std::size_t v : result.validation_nodes) val_rows.push_back(std::ranges::lower_bound(obs, v) - obs.begin());
    val_starts = evenly_spaced_starts(volume.cols, model_cfg.seq_len, cfg.val_windows);
  }

  const AdamConfig adam{cfg.lr};
  auto& params = m.state.params();
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best_params = snapshot(m.state);
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t bi = 1; bi <= cfg.batches_per_epoch; ++bi) {
      const Batch batch = sample_batch(vol_train, spd_train, model_cfg.seq_len, cfg.batch_size, rng);
      const MaskedInput masked = mask_nodes(batch.volume, n_m, rng);
      BatchRecord rec{epoch, bi};
      try {
        const ForwardResult fwd = model_forward(masked.input, batch.speed, g_train, m.state, model_cfg);
        const LossTerms loss = total_loss(batch.volume, fwd, cfg.lambda);
        rec.total = loss.total.item();
        rec.reconstruction = loss.reconstruction;
        rec.regularizer = loss.regularizer;
        if (!std::isfinite(rec.total)) throw TensorError("nonfinite loss");
        backward(loss.total);
        for (const auto& p : params)
          for (double gr : p.tensor.grad())
            if (!std::isfinite(gr)) throw TensorError("nonfinite gradient in " + p.name);
      } catch (const TensorError& e) {
        throw DivergenceError(epoch, bi, e.what());
      }
      adam_step(params, adam);
      epoch_loss += rec.total;
      if (hooks.on_batch) hooks.on_batch(rec);
    }

    EpochRecord er{epoch, epoch_loss / static_cast<double>(cfg.batches_per_epoch), std::nullopt};
    bool stop = false;
    if (n_val > 0) {
      er.val_mae = validation_mae(m, g_val, vol_val, spd_val, val_starts, val_rows);
      if (*er.val_mae < best) {
        best = *er.val_mae;
        best_params = snapshot(m.state);
        result.best_epoch = epoch;
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        stop = true;
      }
    } else {
      result.best_epoch = epoch;
    }
    result.epochs.push_back(er);
    if (hooks.on_epoch) hooks.on_epoch(er);
    if (stop) {
      result.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  if (n_val > 0) restore(m.state, best_params);
  for (auto& p : params) {
    p.tensor.clear_grad();
  }
  return result;
}

SeriesMatrix estimate_volumes(const TrainedModel& model, const SensorNetwork& net, const SeriesMatrix& volume,
                              const SeriesMatrix& speed, std::span<const std::size_t> observed,
                              std::size_t windows_per_pass) {
  const std::size_t N = net.size(), T = volume.cols, L = model.config.seq_len;
  if (volume.rows != N || speed.rows != N || speed.cols != T) {
    throw std::invalid_argument("estimate_volumes: series dimensions do not match the network");
  }
  if (T < L) throw std::invalid_argument("estimate_volumes: series shorter than the model window");
  std::vector<std::uint8_t> seen(N, 0);
  for (std::size_t i : observed) {
    if (i >= N) throw std::invalid_argument("estimate_volumes: observed index out of range");
    seen[i] = 1;
  }
  const GraphContext g =
      make_graph_context(build_adjacency_set(net, model.kernel), net.lanes, model.config.diffusion_steps);

  SeriesMatrix input(N, T);
  for (std::size_t n = 0; n < N; ++n)
    if (seen[n])
      for (std::size_t t = 0; t < T; ++t) input(n, t) = model.scaler.forward(volume(n, t));

  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + L <= T; s += L) starts.push_back(s);
  if (T % L != 0) starts.push_back(T - L);

  NoGradGuard no_grad;
  SeriesMatrix out(N, T);
  std::size_t covered = 0;  // every t < covered is written
  windows_per_pass = std::max<std::size_t>(1, windows_per_pass);
  for (std::size_t off = 0; off < starts.size(); off += windows_per_pass) {
    const auto chunk = std::span<const std::size_t>(starts).subspan(off, std::min(windows_per_pass, starts.size() - off));
    const Tensor y = model_forward(window_tensor(input, chunk, L), window_tensor(speed, chunk, L), g, model.state,
                                   model.config)
                         .estimate;
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      for (std::size_t t = std::max(covered, chunk[b]); t < chunk[b] + L; ++t)
        for (std::size_t n = 0; n < N; ++n) out(n, t) = model.scaler.inverse(y.at(b, n, t - chunk[b], 0));
      covered = chunk[b] + L;
    }
  }
  return out;
}

}  // namespace flowkrig
