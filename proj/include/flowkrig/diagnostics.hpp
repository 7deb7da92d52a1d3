#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowkrig/graph.hpp"
#include "flowkrig/series.hpp"

namespace flowkrig {

/// Error taxonomy: underdetermined (udt), determined in equilibrium (dt_eq),
/// determined but nonequilibrium (dt_neq).
enum class FlowCategory { Udt, DtEq, DtNeq, Unclassified };

inline constexpr std::array<FlowCategory, 4> kAllCategories{
    FlowCategory::Udt, FlowCategory::DtEq, FlowCategory::DtNeq, FlowCategory::Unclassified};

std::string_view category_name(FlowCategory c);
FlowCategory parse_category(std::string_view name);

struct WdssiResult {
  std::optional<double> value;  // empty when the sensor has no weighted neighbor
  std::size_t skipped_steps = 0;  // steps where the sensor itself reads 0
};

/// Mean relative gap between the sensor's reading and the weighted average of
/// its neighbors. `weights` row `sensor` gives the neighbor weights.
WdssiResult wdssi(const SeriesMatrix& volume, const Matrix& weights, std::size_t sensor);

/// Accumulated squared-difference DTW cost gamma(n, m).
double dtw_accumulate(std::span<const double> x, std::span<const double> y);

/// sqrt(gamma(n, n)) / ||x - y||_2 for equal-length series; 1 when the
/// series coincide.
double tai(std::span<const double> target, std::span<const double> upstream);

/// Time-of-day window in steps, [begin, end).
struct DailyWindow {
  std::size_t begin = 0;
  std::size_t end = 0;
};

struct DiagnosticsConfig {
  double wdssi_threshold = 0.4;
  double tai_threshold = 0.5;
  /// When set, TAI is the mean over each day's window instead of the whole span.
  std::optional<DailyWindow> tai_window;
  std::size_t steps_per_day = 288;
};

/// TAI over the whole series, or the mean of per-day TAIs inside `window`.
double windowed_tai(std::span<const double> target, std::span<const double> upstream,
                    const std::optional<DailyWindow>& window, std::size_t steps_per_day);

struct SensorDiagnostics {
  std::string sensor_id;
  std::optional<double> wdssi;
  std::optional<double> tai;
  FlowCategory category = FlowCategory::Unclassified;
  std::size_t skipped_steps = 0;
};

struct DiagnosticsReport {
  std::vector<SensorDiagnostics> sensors;

  std::array<std::size_t, 4> counts() const;
  const SensorDiagnostics* find(const std::string& id) const;
};

FlowCategory categorize(const std::optional<double>& wdssi_value, const std::optional<double>& tai_value,
                        double wdssi_threshold = 0.4, double tai_threshold = 0.5);

/// WDSSI against `weights`, TAI against each sensor's nearest upstream
/// neighbor, then categories.
DiagnosticsReport diagnose(const SensorNetwork& net, const SeriesMatrix& volume, const Matrix& weights,
                           const DiagnosticsConfig& cfg = {});

}  // namespace flowkrig
