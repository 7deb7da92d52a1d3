#include "flowkrig/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

namespace flowkrig {

Metrics compute_metrics(const SeriesMatrix& truth, const SeriesMatrix& estimate, std::span<const std::size_t> rows) {
  if (truth.rows != estimate.rows || truth.cols != estimate.cols) {
    throw std::invalid_argument("compute_metrics: truth and estimate dimensions differ");
  }
  if (rows.empty() || truth.cols == 0) throw std::invalid_argument("compute_metrics: empty evaluation set");
  Metrics m;
  double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
  for (std::size_t r : rows) {
    if (r >= truth.rows) throw std::invalid_argument("compute_metrics: row index out of range");
    for (std::size_t t = 0; t < truth.cols; ++t) {
      const double y = truth(r, t), e = std::abs(estimate(r, t) - y);
      abs_sum += e;
      sq_sum += e * e;
      m.truth_sum += std::abs(y);
      ++m.count;
      if (y != 0.0) {
        pct_sum += e / std::abs(y);
        ++m.mape_count;
      } else {
        ++m.mape_skipped;
      }
    }
  }
  const double n = static_cast<double>(m.count);
  m.mae = abs_sum / n;
  m.rmse = std::sqrt(sq_sum / n);
  if (m.mape_count > 0) m.mape = pct_sum / static_cast<double>(m.mape_count);
  if (m.truth_sum > 0.0) m.wmape = abs_sum / m.truth_sum;
  return m;
}

EvalReport decompose_errors(const SensorNetwork& net, const SeriesMatrix& truth, const SeriesMatrix& estimate,
                            std::span<const std::size_t> rows, const DiagnosticsReport& diagnostics) {
  EvalReport rep;
  rep.overall = compute_metrics(truth, estimate, rows);
  std::array<std::vector<std::size_t>, 4> groups;
  for (std::size_t r : rows) {
    const auto* d = diagnostics.find(net.sensor_ids[r]);
    if (!d) throw std::invalid_argument("decompose_errors: no diagnostics for sensor '" + net.sensor_ids[r] + "'");
    groups[static_cast<std::size_t>(d->category)].push_back(r);

    const std::size_t one[] = {r};
    const Metrics sm = compute_metrics(truth, estimate, one);
    double bias = 0.0;
    for (std::size_t t = 0; t < truth.cols; ++t) bias += estimate(r, t) - truth(r, t);
    rep.sensors.push_back({net.sensor_ids[r], d->category, sm.mae, sm.rmse, bias / static_cast<double>(truth.cols),
                           sm.wmape});
  }
  for (std::size_t c = 0; c < 4; ++c) {
    rep.sensor_share[c] = static_cast<double>(groups[c].size()) / static_cast<double>(rows.size());
    if (!groups[c].empty()) rep.by_category[c] = compute_metrics(truth, estimate, groups[c]);
  }
  return rep;
}

KnnResult knn_estimate(const SensorNetwork& net, const SeriesMatrix& volume, const Matrix& a_tilde,
                       std::span<const std::size_t> observed) {
  const std::size_t N = net.size(), T = volume.cols;
  if (volume.rows != N || a_tilde.rows != N || a_tilde.cols != N) {
    throw std::invalid_argument("knn_estimate: dimensions do not match the network");
  }
  std::vector<std::uint8_t> seen(N, 0);
  for (std::size_t i : observed) {
    if (i >= N) throw std::invalid_argument("knn_estimate: observed index out of range");
    seen[i] = 1;
  }
  const Matrix w = undirected_neighbor_weights(a_tilde);
  Matrix dist;  // computed lazily, only when a fallback is needed

  KnnResult out{SeriesMatrix(N, T), {}};
  for (std::size_t i = 0; i < N; ++i) {
    if (seen[i]) {
      std::ranges::copy(volume.row(i), out.estimate.row(i).begin());
      continue;
    }
    double total = 0.0;
    for (std::size_t j = 0; j < N; ++j)
      if (seen[j]) total += w(i, j);
    if (total > 0.0) {
      for (std::size_t j = 0; j < N; ++j) {
        if (!seen[j] || w(i, j) == 0.0) continue;
        const double share = w(i, j) / total;
        for (std::size_t t = 0; t < T; ++t) out.estimate(i, t) += share * volume(j, t);
      }
      continue;
    }
    if (dist.rows == 0) dist = travel_distances(net);
    // Unreachable candidates rank after reachable ones, then by position gap.
    std::size_t best = N;
    std::pair<double, double> best_key{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
    for (std::size_t j = 0; j < N; ++j) {
      if (!seen[j] || net.directions[j] != net.directions[i]) continue;
      const std::pair<double, double> k{std::min(dist(i, j), dist(j, i)), std::abs(net.positions_m[i] - net.positions_m[j])};
      if (best == N || k < best_key) {
        best_key = k;
        best = j;
      }
    }
    if (best == N) {
      out.unestimable.push_back(i);
    } else {
      std::ranges::copy(volume.row(best), out.estimate.row(i).begin());
    }
  }
  return out;
}

}  // namespace flowkrig
