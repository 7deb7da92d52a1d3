#include "flowkrig/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace flowkrig {

std::string_view category_name(FlowCategory c) {
  switch (c) {
    case FlowCategory::Udt: return "udt";
    case FlowCategory::DtEq: return "dt_eq";
    case FlowCategory::DtNeq: return "dt_neq";
    case FlowCategory::Unclassified: return "unclassified";
  }
  return "unclassified";
}

FlowCategory parse_category(std::string_view name) {
  for (FlowCategory c : kAllCategories)
    if (category_name(c) == name) return c;
  throw std::invalid_argument("unknown flow category '" + std::string(name) + "'");
}

WdssiResult wdssi(const SeriesMatrix& volume, const Matrix& weights, std::size_t sensor) {
  if (weights.rows != volume.rows || weights.cols != volume.rows || sensor >= volume.rows) {
    throw std::invalid_argument("wdssi: weights do not match the volume matrix");
  }
  WdssiResult res;
  const auto w = weights.row(sensor);
  double wsum = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j)
    if (j != sensor) wsum += w[j];
  if (!(wsum > 0.0)) return res;

  double acc = 0.0;
  std::size_t used = 0;
  for (std::size_t t = 0; t < volume.cols; ++t) {
    const double x = volume(sensor, t);
    if (x == 0.0) {
      ++res.skipped_steps;
      continue;
    }
    double avg = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j)
      if (j != sensor && w[j] != 0.0) avg += w[j] * volume(j, t);
    avg /= wsum;
    acc += std::abs(avg - x) / x;
    ++used;
  }
  if (used > 0) res.value = acc / static_cast<double>(used);
  return res;
}

double dtw_accumulate(std::span<const double> x, std::span<const double> y) {
  if (x.empty() || y.empty()) throw std::invalid_argument("dtw_accumulate: empty series");
  const std::size_t m = y.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  // Two rolling rows of the (n+1) x (m+1) table.
  std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
  prev[0] = 0.0;
  for (std::size_t i = 1; i <= x.size(); ++i) {
    cur[0] = inf;
    for (std::size_t j = 1; j <= m; ++j) {
      const double d = x[i - 1] - y[j - 1];
      cur[j] = d * d + std::min({prev[j - 1], prev[j], cur[j - 1]});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double tai(std::span<const double> target, std::span<const double> upstream) {
  if (target.size() != upstream.size()) throw std::invalid_argument("tai: series lengths differ");
  double euc2 = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = target[i] - upstream[i];
    euc2 += d * d;
  }
  if (euc2 == 0.0) return 1.0;
  return std::sqrt(dtw_accumulate(target, upstream)) / std::sqrt(euc2);
}

double windowed_tai(std::span<const double> target, std::span<const double> upstream,
                    const std::optional<DailyWindow>& window, std::size_t steps_per_day) {
  if (!window) return tai(target, upstream);
  if (window->end <= window->begin || window->end > steps_per_day) {
    throw std::invalid_argument("windowed_tai: invalid daily window");
  }
  double acc = 0.0;
  std::size_t days = 0;
  for (std::size_t day0 = 0; day0 + window->end <= target.size(); day0 += steps_per_day) {
    const std::size_t b = day0 + window->begin, len = window->end - window->begin;
    acc += tai(target.subspan(b, len), upstream.subspan(b, len));
    ++days;
  }
  if (days == 0) throw std::invalid_argument("windowed_tai: series shorter than one window");
  return acc / static_cast<double>(days);
}

std::array<std::size_t, 4> DiagnosticsReport::counts() const {
  std::array<std::size_t, 4> c{};
  for (const auto& s : sensors) ++c[static_cast<std::size_t>(s.category)];
  return c;
}

const SensorDiagnostics* DiagnosticsReport::find(const std::string& id) const {
  for (const auto& s : sensors)
    if (s.sensor_id == id) return &s;
  return nullptr;
}

FlowCategory categorize(const std::optional<double>& wdssi_value, const std::optional<double>& tai_value,
                        double wdssi_threshold, double tai_threshold) {
  if (!wdssi_value) return FlowCategory::Unclassified;
  if (*wdssi_value > wdssi_threshold) return FlowCategory::Udt;
  if (!tai_value) return FlowCategory::Unclassified;
  return *tai_value > tai_threshold ? FlowCategory::DtEq : FlowCategory::DtNeq;
}

DiagnosticsReport diagnose(const SensorNetwork& net, const SeriesMatrix& volume, const Matrix& weights,
                           const DiagnosticsConfig& cfg) {
  if (volume.rows != net.size()) throw std::invalid_argument("diagnose: volume rows differ from sensor count");
  DiagnosticsReport report;
  for (std::size_t i = 0; i < net.size(); ++i) {
    SensorDiagnostics d;
    d.sensor_id = net.sensor_ids[i];
    const WdssiResult w = wdssi(volume, weights, i);
    d.wdssi = w.value;
    d.skipped_steps = w.skipped_steps;
    if (i < net.upstream_neighbor.size() && net.upstream_neighbor[i]) {
      d.tai = windowed_tai(volume.row(i), volume.row(*net.upstream_neighbor[i]), cfg.tai_window,
                           cfg.steps_per_day);
    }
    d.category = categorize(d.wdssi, d.tai, cfg.wdssi_threshold, cfg.tai_threshold);
    report.sensors.push_back(std::move(d));
  }
  return report;
}

}  // namespace flowkrig
