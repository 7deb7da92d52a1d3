#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowkrig/diagnostics.hpp"
#include "flowkrig/graph.hpp"
#include "flowkrig/series.hpp"

namespace flowkrig {

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> mape;   // empty when every truth value is 0
  std::optional<double> wmape;  // empty when the truth sums to 0
  std::size_t count = 0;        // evaluated entries
  std::size_t mape_count = 0;   // entries with nonzero truth
  std::size_t mape_skipped = 0;
  double truth_sum = 0.0;
};

/// MAE, RMSE, MAPE and WMAPE over rows `rows` of two N x T matrices.
Metrics compute_metrics(const SeriesMatrix& truth, const SeriesMatrix& estimate, std::span<const std::size_t> rows);

struct SensorResidual {
  std::string sensor_id;
  FlowCategory category = FlowCategory::Unclassified;
  double mae = 0.0;
  double rmse = 0.0;
  double bias = 0.0;  // mean(estimate - truth)
  std::optional<double> wmape;
};

struct EvalReport {
  Metrics overall;
  std::array<std::optional<Metrics>, 4> by_category;  // indexed by FlowCategory
  std::array<double, 4> sensor_share{};               // fraction of evaluated sensors
  std::vector<SensorResidual> sensors;

  const std::optional<Metrics>& category(FlowCategory c) const { return by_category[static_cast<std::size_t>(c)]; }
};

/// Overall metrics plus the same metrics within each diagnostic category.
/// Every evaluated sensor must appear in `diagnostics`.
EvalReport decompose_errors(const SensorNetwork& net, const SeriesMatrix& truth, const SeriesMatrix& estimate,
                            std::span<const std::size_t> rows, const DiagnosticsReport& diagnostics);

struct KnnResult {
  SeriesMatrix estimate;                // observed rows copied through
  std::vector<std::size_t> unestimable; // rows left at zero
};

/// Averages observed readings with the undirected same-direction kernel
/// weights, renormalized per row. Rows without any weighted observed neighbor
/// copy the nearest observed same-direction sensor by travel distance.
KnnResult knn_estimate(const SensorNetwork& net, const SeriesMatrix& volume, const Matrix& a_tilde,
                       std::span<const std::size_t> observed);

}  // namespace flowkrig
