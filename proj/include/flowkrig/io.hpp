#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "flowkrig/diagnostics.hpp"
#include "flowkrig/evaluation.hpp"
#include "flowkrig/graph.hpp"
#include "flowkrig/series.hpp"

namespace flowkrig {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Seconds since 1970-01-01T00:00:00Z <-> "YYYY-MM-DDTHH:MM:SSZ".
std::int64_t parse_iso8601(std::string_view s);
std::string format_iso8601(std::int64_t epoch_seconds);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);
double parse_double(std::string_view s);

struct TimeGrid {
  std::int64_t start = 0;  // epoch seconds of column 0
  std::int64_t interval = 300;
};

/// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

SensorNetwork load_network(const std::filesystem::path& sensors_csv, const std::filesystem::path& edges_csv);
std::string sensors_to_csv(const SensorNetwork& net);
std::string edges_to_csv(const SensorNetwork& net);

struct SeriesGap {
  std::string sensor_id;
  std::size_t first_step = 0;
  std::size_t length = 0;
};

struct LoadedSeries {
  SeriesMatrix values;               // rows in network order
  TimeGrid grid;
  std::vector<SeriesGap> gaps;       // filled by linear interpolation
  std::vector<std::size_t> present;  // network rows that had readings
};

/// Long-format readings on a regular grid. The time axis is the overlap of
/// every present sensor's span. With `require_all`, every network sensor must
/// appear; otherwise absent rows stay zero and are left out of `present`.
/// Negative values are rejected unless `allow_negative` (model estimates).
LoadedSeries load_series(const std::filesystem::path& readings_csv, const SensorNetwork& net,
                         std::string_view kind, std::size_t interval_seconds = 300, bool require_all = true,
                         bool allow_negative = false);
std::string series_to_csv(const SensorNetwork& net, const SeriesMatrix& values, const TimeGrid& grid,
                          std::span<const std::size_t> rows = {});

/// Planted structure of a synthetic corridor.
struct GroundTruthFlags {
  std::vector<std::uint8_t> ramp_flanking;       // a ramp lies between the sensor and an adjacent one
  std::vector<std::uint8_t> bottleneck_exposed;  // queue reached the sensor while the bottleneck was active
  std::vector<std::uint8_t> bottleneck_pair;     // exposed, and so is the nearest upstream sensor
};

struct DatasetBundle {
  SensorNetwork net;
  SeriesMatrix volume;  // vehicles per interval
  SeriesMatrix speed;   // km/h
  TimeGrid grid;
  std::optional<GroundTruthFlags> flags;
};

/// sensors.csv, edges.csv, volume.csv, speed.csv and, when present, flags.csv.
void save_dataset(const std::filesystem::path& dir, const DatasetBundle& data);
DatasetBundle load_dataset(const std::filesystem::path& dir);

std::string flags_to_csv(const SensorNetwork& net, const GroundTruthFlags& flags);
GroundTruthFlags load_flags(const std::filesystem::path& flags_csv, const SensorNetwork& net);

/// One sensor id per line; blank lines and '#' comments ignored.
std::vector<std::string> load_id_list(const std::filesystem::path& path);
std::string id_list_to_text(std::span<const std::string> ids);
/// Network indices of `ids`; unknown ids are an error naming the id.
std::vector<std::size_t> resolve_ids(const SensorNetwork& net, std::span<const std::string> ids);

std::string diagnostics_to_csv(const DiagnosticsReport& report);
DiagnosticsReport load_diagnostics(const std::filesystem::path& csv);

/// Long format: metric,category,value. Undefined metrics are written empty;
/// categories without sensors have no entries.
std::string eval_report_to_csv(const EvalReport& report);
std::string residuals_to_csv(const EvalReport& report);
/// Inverse of eval_report_to_csv; `sensors` stays empty.
EvalReport load_eval_report(const std::filesystem::path& csv);
std::vector<SensorResidual> load_residuals(const std::filesystem::path& csv);

/// One row per epoch: epoch,train_loss,val_mae.
struct LossLogRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_mae;
};
std::string loss_log_to_csv(std::span<const LossLogRow> rows);
std::vector<LossLogRow> load_loss_log(const std::filesystem::path& csv);

/// Fixed-width bins over [lo, hi); the last bin is closed on the right.
struct Histogram {
  std::string quantity;
  double lo = 0.0;
  double hi = 1.0;
  std::vector<std::size_t> counts;

  static Histogram of(std::string quantity, std::span<const double> values, double lo, double hi, std::size_t bins);
};
/// quantity,bin_lo,bin_hi,count rows for any number of histograms.
std::string histograms_to_csv(std::span<const Histogram> hists);
std::vector<Histogram> load_histograms(const std::filesystem::path& csv);

/// Parsed comma-separated table with its header checked against `expected`.
struct CsvTable {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based file line of each row
};
CsvTable parse_csv(std::string_view text, std::span<const std::string_view> expected_header, const std::string& source);

}  // namespace flowkrig
