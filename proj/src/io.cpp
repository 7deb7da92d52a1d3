#include "flowkrig/io.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <unistd.h>

namespace flowkrig {

namespace fs = std::filesystem;

namespace {

int parse_fixed(std::string_view s, std::size_t pos, std::size_t len, std::string_view what) {
  int v = 0;
  const auto* b = s.data() + pos;
  const auto [p, ec] = std::from_chars(b, b + len, v);
  if (ec != std::errc{} || p != b + len) throw IoError("malformed timestamp '" + std::string(s) + "' (" + std::string(what) + ")");
  return v;
}

}  // namespace

std::int64_t parse_iso8601(std::string_view s) {
  // YYYY-MM-DDTHH:MM:SS with an optional trailing Z.
  if (!s.empty() && s.back() == 'Z') s.remove_suffix(1);
  if (s.size() != 19 || s[4] != '-' || s[7] != '-' || (s[10] != 'T' && s[10] != ' ') || s[13] != ':' ||
      s[16] != ':') {
    throw IoError("malformed timestamp '" + std::string(s) + "', expected YYYY-MM-DDTHH:MM:SSZ");
  }
  using namespace std::chrono;
  const year_month_day ymd{year{parse_fixed(s, 0, 4, "year")}, month{static_cast<unsigned>(parse_fixed(s, 5, 2, "month"))},
                           day{static_cast<unsigned>(parse_fixed(s, 8, 2, "day"))}};
  if (!ymd.ok()) throw IoError("invalid calendar date in '" + std::string(s) + "'");
  const int hh = parse_fixed(s, 11, 2, "hour"), mm = parse_fixed(s, 14, 2, "minute"), ss = parse_fixed(s, 17, 2, "second");
  if (hh > 23 || mm > 59 || ss > 59) throw IoError("invalid time of day in '" + std::string(s) + "'");
  return sys_days{ymd}.time_since_epoch().count() * 86400LL + hh * 3600 + mm * 60 + ss;
}

std::string format_iso8601(std::int64_t t) {
  using namespace std::chrono;
  const std::int64_t d = t >= 0 ? t / 86400 : -((-t + 86399) / 86400);
  const std::int64_t rem = t - d * 86400;
  const year_month_day ymd{sys_days{days{d}}};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02dZ", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), static_cast<int>(rem / 3600),
                static_cast<int>(rem / 60 % 60), static_cast<int>(rem % 60));
  return buf;
}

std::string format_double(double v) {
  char buf[32];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw IoError("cannot format number");
  return {buf, p};
}

double parse_double(std::string_view s) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || !std::isfinite(v)) {
    throw IoError("not a finite number: '" + std::string(s) + "'");
  }
  return v;
}

void write_file_atomic(const fs::path& path, std::string_view content) {
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  if (!fs::is_directory(dir)) throw IoError("output directory does not exist: " + dir.string());
  const fs::path tmp = dir / ("." + path.filename().string() + ".tmp" + std::to_string(::getpid()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError("write failed for " + path.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move output into place at " + path.string());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CsvTable parse_csv(std::string_view text, std::span<const std::string_view> expected, const std::string& source) {
  CsvTable t;
  std::size_t line_no = 0, pos = 0;
  bool header_seen = false;
  if (text.starts_with("\xEF\xBB\xBF")) pos = 3;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t c = 0;
    while (true) {
      const std::size_t comma = line.find(',', c);
      cells.emplace_back(line.substr(c, comma == std::string_view::npos ? std::string_view::npos : comma - c));
      if (comma == std::string_view::npos) break;
      c = comma + 1;
    }
    if (!header_seen) {
      header_seen = true;
      bool ok = cells.size() == expected.size();
      for (std::size_t i = 0; ok && i < cells.size(); ++i) ok = cells[i] == expected[i];
      if (!ok) {
        std::string want;
        for (auto h : expected) want += (want.empty() ? "" : ",") + std::string(h);
        throw IoError(source + ": header must be '" + want + "'");
      }
      continue;
    }
    if (cells.size() != expected.size()) {
      throw IoError(source + " line " + std::to_string(line_no) + ": expected " + std::to_string(expected.size()) +
                    " fields, got " + std::to_string(cells.size()));
    }
    t.rows.push_back(std::move(cells));
    t.line_numbers.push_back(line_no);
  }
  if (!header_seen) throw IoError(source + ": empty file");
  return t;
}

namespace {

constexpr std::string_view kSensorHeader[] = {"sensor_id", "position_m", "direction", "lanes"};
constexpr std::string_view kEdgeHeader[] = {"from_id", "to_id", "distance_m"};
constexpr std::string_view kReadingHeader[] = {"timestamp_iso8601", "sensor_id", "value"};
constexpr std::string_view kFlagHeader[] = {"sensor_id", "ramp_flanking", "bottleneck_exposed", "bottleneck_pair"};
constexpr std::string_view kDiagHeader[] = {"sensor_id", "wdssi", "tai", "category", "skipped_steps"};

std::string at_line(const std::string& source, std::size_t line) {
  return source + " line " + std::to_string(line) + ": ";
}

double cell_double(const CsvTable& t, std::size_t r, std::size_t c, const std::string& source) {
  try {
    return parse_double(t.rows[r][c]);
  } catch (const IoError& e) {
    throw IoError(at_line(source, t.line_numbers[r]) + e.what());
  }
}

std::uint8_t cell_flag(const CsvTable& t, std::size_t r, std::size_t c, const std::string& source) {
  const auto& s = t.rows[r][c];
  if (s == "0") return 0;
  if (s == "1") return 1;
  throw IoError(at_line(source, t.line_numbers[r]) + "flag must be 0 or 1, got '" + s + "'");
}

}  // namespace

SensorNetwork load_network(const fs::path& sensors_csv, const fs::path& edges_csv) {
  const std::string ssrc = sensors_csv.string(), esrc = edges_csv.string();
  const CsvTable st = parse_csv(read_file(sensors_csv), kSensorHeader, ssrc);
  SensorNetwork net;
  std::map<std::string, std::size_t> index;
  for (std::size_t r = 0; r < st.rows.size(); ++r) {
    const auto& row = st.rows[r];
    if (row[0].empty()) throw IoError(at_line(ssrc, st.line_numbers[r]) + "empty sensor id");
    if (!index.emplace(row[0], r).second) {
      throw IoError(at_line(ssrc, st.line_numbers[r]) + "duplicate sensor id '" + row[0] + "'");
    }
    int lanes = 0;
    const auto [p, ec] = std::from_chars(row[3].data(), row[3].data() + row[3].size(), lanes);
    if (ec != std::errc{} || p != row[3].data() + row[3].size() || lanes < 1) {
      throw IoError(at_line(ssrc, st.line_numbers[r]) + "lanes must be a positive integer, got '" + row[3] + "'");
    }
    if (row[2].empty()) throw IoError(at_line(ssrc, st.line_numbers[r]) + "empty direction");
    net.sensor_ids.push_back(row[0]);
    net.positions_m.push_back(cell_double(st, r, 1, ssrc));
    net.directions.push_back(row[2]);
    net.lanes.push_back(lanes);
  }

  const CsvTable et = parse_csv(read_file(edges_csv), kEdgeHeader, esrc);
  for (std::size_t r = 0; r < et.rows.size(); ++r) {
    const auto& row = et.rows[r];
    const auto from = index.find(row[0]), to = index.find(row[1]);
    if (from == index.end()) throw IoError(at_line(esrc, et.line_numbers[r]) + "unknown sensor id '" + row[0] + "'");
    if (to == index.end()) throw IoError(at_line(esrc, et.line_numbers[r]) + "unknown sensor id '" + row[1] + "'");
    const double d = cell_double(et, r, 2, esrc);
    if (!(d > 0.0)) throw IoError(at_line(esrc, et.line_numbers[r]) + "distance must be positive");
    if (net.directions[from->second] != net.directions[to->second]) {
      throw IoError(at_line(esrc, et.line_numbers[r]) + "edge joins different directions");
    }
    net.edges.push_back({from->second, to->second, d});
  }
  try {
    net.validate();
  } catch (const GraphError& e) {
    throw IoError(ssrc + ": " + e.what());
  }
  net.derive_upstream_neighbors();
  return net;
}

std::string sensors_to_csv(const SensorNetwork& net) {
  std::string s = "sensor_id,position_m,direction,lanes\n";
  for (std::size_t i = 0; i < net.size(); ++i) {
    s += net.sensor_ids[i] + "," + format_double(net.positions_m[i]) + "," + net.directions[i] + "," +
         std::to_string(net.lanes[i]) + "\n";
  }
  return s;
}

std::string edges_to_csv(const SensorNetwork& net) {
  std::string s = "from_id,to_id,distance_m\n";
  for (const Edge& e : net.edges) {
    s += net.sensor_ids[e.from] + "," + net.sensor_ids[e.to] + "," + format_double(e.distance_m) + "\n";
  }
  return s;
}

LoadedSeries load_series(const fs::path& readings_csv, const SensorNetwork& net, std::string_view kind,
                         std::size_t interval_seconds, bool require_all, bool allow_negative) {
  const std::string src = readings_csv.string() + " (" + std::string(kind) + ")";
  const CsvTable t = parse_csv(read_file(readings_csv), kReadingHeader, src);
  if (t.rows.empty()) throw IoError(src + ": no readings");
  const auto step = static_cast<std::int64_t>(interval_seconds);

  struct Reading {
    std::int64_t time;
    double value;
    std::size_t line;
  };
  std::vector<std::vector<Reading>> per(net.size());
  std::optional<std::int64_t> origin;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const auto idx = net.index_of(row[1]);
    if (!idx) throw IoError(at_line(src, t.line_numbers[r]) + "unknown sensor id '" + row[1] + "'");
    std::int64_t ts = 0;
    try {
      ts = parse_iso8601(row[0]);
    } catch (const IoError& e) {
      throw IoError(at_line(src, t.line_numbers[r]) + e.what());
    }
    if (!origin) origin = ts;
    if (((ts - *origin) % step + step) % step != 0) {
      throw IoError(at_line(src, t.line_numbers[r]) + "timestamp " + row[0] + " is off the " +
                    std::to_string(interval_seconds) + " s grid");
    }
    const double v = cell_double(t, r, 2, src);
    if (v < 0.0 && !allow_negative) throw IoError(at_line(src, t.line_numbers[r]) + "negative value " + row[2]);
    per[*idx].push_back({ts, v, t.line_numbers[r]});
  }

  LoadedSeries out;
  std::int64_t lo = std::numeric_limits<std::int64_t>::min(), hi = std::numeric_limits<std::int64_t>::max();
  for (std::size_t i = 0; i < net.size(); ++i) {
    auto& rs = per[i];
    if (rs.empty()) {
      if (require_all) throw IoError(src + ": no readings for sensor '" + net.sensor_ids[i] + "'");
      continue;
    }
    std::ranges::sort(rs, {}, &Reading::time);
    for (std::size_t k = 1; k < rs.size(); ++k) {
      if (rs[k].time == rs[k - 1].time) {
        throw IoError(at_line(src, rs[k].line) + "duplicate reading for sensor '" + net.sensor_ids[i] + "' at " +
                      format_iso8601(rs[k].time));
      }
    }
    lo = std::max(lo, rs.front().time);
    hi = std::min(hi, rs.back().time);
    out.present.push_back(i);
  }
  if (out.present.empty() || lo > hi) throw IoError(src + ": sensor time spans do not overlap");

  const auto T = static_cast<std::size_t>((hi - lo) / step + 1);
  out.grid = {lo, step};
  out.values = SeriesMatrix(net.size(), T);
  for (std::size_t i : out.present) {
    const auto& rs = per[i];
    // Last reading at or before the window start; it exists because lo is the
    // largest first timestamp.
    std::size_t k = static_cast<std::size_t>(std::ranges::upper_bound(rs, lo, {}, &Reading::time) - rs.begin()) - 1;
    std::optional<std::size_t> gap_start;
    for (std::size_t c = 0; c < T; ++c) {
      const std::int64_t tc = lo + static_cast<std::int64_t>(c) * step;
      while (k + 1 < rs.size() && rs[k + 1].time <= tc) ++k;
      if (rs[k].time == tc) {
        out.values(i, c) = rs[k].value;
        if (gap_start) {
          out.gaps.push_back({net.sensor_ids[i], *gap_start, c - *gap_start});
          gap_start.reset();
        }
      } else {
        const Reading& a = rs[k];
        const Reading& b = rs[k + 1];  // exists: tc < hi <= last time
        const double w = static_cast<double>(tc - a.time) / static_cast<double>(b.time - a.time);
        out.values(i, c) = a.value + w * (b.value - a.value);
        if (!gap_start) gap_start = c;
      }
    }
  }
  return out;
}

std::string series_to_csv(const SensorNetwork& net, const SeriesMatrix& values, const TimeGrid& grid,
                          std::span<const std::size_t> rows) {
  std::vector<std::size_t> all;
  if (rows.empty()) {
    all.resize(net.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    rows = all;
  }
  std::string s = "timestamp_iso8601,sensor_id,value\n";
  s.reserve(values.cols * rows.size() * 40);
  for (std::size_t c = 0; c < values.cols; ++c) {
    const std::string ts = format_iso8601(grid.start + static_cast<std::int64_t>(c) * grid.interval);
    for (std::size_t i : rows) {
      s += ts;
      s += ',';
      s += net.sensor_ids[i];
      s += ',';
      s += format_double(values(i, c));
      s += '\n';
    }
  }
  return s;
}

std::string flags_to_csv(const SensorNetwork& net, const GroundTruthFlags& f) {
  std::string s = "sensor_id,ramp_flanking,bottleneck_exposed,bottleneck_pair\n";
  for (std::size_t i = 0; i < net.size(); ++i) {
    s += net.sensor_ids[i] + "," + std::to_string(f.ramp_flanking[i]) + "," + std::to_string(f.bottleneck_exposed[i]) +
         "," + std::to_string(f.bottleneck_pair[i]) + "\n";
  }
  return s;
}

GroundTruthFlags load_flags(const fs::path& flags_csv, const SensorNetwork& net) {
  const std::string src = flags_csv.string();
  const CsvTable t = parse_csv(read_file(flags_csv), kFlagHeader, src);
  GroundTruthFlags f;
  f.ramp_flanking.assign(net.size(), 0);
  f.bottleneck_exposed.assign(net.size(), 0);
  f.bottleneck_pair.assign(net.size(), 0);
  std::vector<std::uint8_t> seen(net.size(), 0);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto idx = net.index_of(t.rows[r][0]);
    if (!idx) throw IoError(at_line(src, t.line_numbers[r]) + "unknown sensor id '" + t.rows[r][0] + "'");
    if (seen[*idx]++) throw IoError(at_line(src, t.line_numbers[r]) + "duplicate sensor id '" + t.rows[r][0] + "'");
    f.ramp_flanking[*idx] = cell_flag(t, r, 1, src);
    f.bottleneck_exposed[*idx] = cell_flag(t, r, 2, src);
    f.bottleneck_pair[*idx] = cell_flag(t, r, 3, src);
  }
  return f;
}

void save_dataset(const fs::path& dir, const DatasetBundle& d) {
  fs::create_directories(dir);
  write_file_atomic(dir / "sensors.csv", sensors_to_csv(d.net));
  write_file_atomic(dir / "edges.csv", edges_to_csv(d.net));
  write_file_atomic(dir / "volume.csv", series_to_csv(d.net, d.volume, d.grid));
  write_file_atomic(dir / "speed.csv", series_to_csv(d.net, d.speed, d.grid));
  if (d.flags) write_file_atomic(dir / "flags.csv", flags_to_csv(d.net, *d.flags));
}

DatasetBundle load_dataset(const fs::path& dir) {
  DatasetBundle d;
  d.net = load_network(dir / "sensors.csv", dir / "edges.csv");
  LoadedSeries vol = load_series(dir / "volume.csv", d.net, "volume");
  LoadedSeries spd = load_series(dir / "speed.csv", d.net, "speed");
  if (vol.grid.start != spd.grid.start || vol.values.cols != spd.values.cols) {
    throw IoError(dir.string() + ": volume and speed cover different time spans");
  }
  d.volume = std::move(vol.values);
  d.speed = std::move(spd.values);
  d.grid = vol.grid;
  if (fs::exists(dir / "flags.csv")) d.flags = load_flags(dir / "flags.csv", d.net);
  return d;
}

std::vector<std::string> load_id_list(const fs::path& path) {
  const std::string text = read_file(path);
  std::vector<std::string> ids;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto b = line.find_first_not_of(" \t"), e = line.find_last_not_of(" \t");
    if (b == std::string::npos || line[b] == '#') continue;
    ids.push_back(line.substr(b, e - b + 1));
  }
  return ids;
}

std::string id_list_to_text(std::span<const std::string> ids) {
  std::string s;
  for (const auto& id : ids) s += id + "\n";
  return s;
}

std::vector<std::size_t> resolve_ids(const SensorNetwork& net, std::span<const std::string> ids) {
  std::vector<std::size_t> out;
  std::vector<std::uint8_t> seen(net.size(), 0);
  for (const auto& id : ids) {
    const auto idx = net.index_of(id);
    if (!idx) throw IoError("unknown sensor id '" + id + "'");
    if (seen[*idx]++) throw IoError("sensor id '" + id + "' listed twice");
    out.push_back(*idx);
  }
  return out;
}

namespace {

std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

std::optional<double> opt_cell(const CsvTable& t, std::size_t r, std::size_t c, const std::string& src) {
  if (t.rows[r][c].empty()) return std::nullopt;
  return cell_double(t, r, c, src);
}

}  // namespace

std::string diagnostics_to_csv(const DiagnosticsReport& report) {
  std::string s = "sensor_id,wdssi,tai,category,skipped_steps\n";
  for (const auto& d : report.sensors) {
    s += d.sensor_id + "," + opt(d.wdssi) + "," + opt(d.tai) + "," + std::string(category_name(d.category)) + "," +
         std::to_string(d.skipped_steps) + "\n";
  }
  return s;
}

DiagnosticsReport load_diagnostics(const fs::path& csv) {
  const std::string src = csv.string();
  const CsvTable t = parse_csv(read_file(csv), kDiagHeader, src);
  DiagnosticsReport rep;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    SensorDiagnostics d;
    d.sensor_id = t.rows[r][0];
    d.wdssi = opt_cell(t, r, 1, src);
    d.tai = opt_cell(t, r, 2, src);
    try {
      d.category = parse_category(t.rows[r][3]);
    } catch (const std::exception& e) {
      throw IoError(at_line(src, t.line_numbers[r]) + e.what());
    }
    const auto& k = t.rows[r][4];
    const auto [p, ec] = std::from_chars(k.data(), k.data() + k.size(), d.skipped_steps);
    if (ec != std::errc{} || p != k.data() + k.size()) {
      throw IoError(at_line(src, t.line_numbers[r]) + "skipped_steps must be a nonnegative integer");
    }
    if (rep.find(d.sensor_id)) throw IoError(at_line(src, t.line_numbers[r]) + "duplicate sensor id '" + d.sensor_id + "'");
    rep.sensors.push_back(std::move(d));
  }
  return rep;
}

std::string eval_report_to_csv(const EvalReport& rep) {
  std::string s = "metric,category,value\n";
  auto row = [&](const char* metric, const std::string& cat, const std::string& v) {
    s += std::string(metric) + "," + cat + "," + v + "\n";
  };
  auto emit = [&](const std::string& cat, const std::optional<Metrics>& m, double share) {
    if (m) {
      row("mae", cat, format_double(m->mae));
      row("rmse", cat, format_double(m->rmse));
      row("mape", cat, opt(m->mape));
      row("wmape", cat, opt(m->wmape));
      row("entries", cat, std::to_string(m->count));
      row("mape_entries", cat, std::to_string(m->mape_count));
      row("mape_skipped", cat, std::to_string(m->mape_skipped));
      row("truth_sum", cat, format_double(m->truth_sum));
    }
    row("sensor_share", cat, format_double(share));
  };
  emit("overall", rep.overall, 1.0);
  for (auto c : kAllCategories) {
    emit(std::string(category_name(c)), rep.category(c), rep.sensor_share[static_cast<std::size_t>(c)]);
  }
  return s;
}

std::string residuals_to_csv(const EvalReport& rep) {
  std::string s = "sensor_id,category,mae,rmse,bias,wmape\n";
  for (const auto& r : rep.sensors) {
    s += r.sensor_id + "," + std::string(category_name(r.category)) + "," + format_double(r.mae) + "," +
         format_double(r.rmse) + "," + format_double(r.bias) + "," + opt(r.wmape) + "\n";
  }
  return s;
}

namespace {

std::size_t cell_count(const CsvTable& t, std::size_t r, std::size_t c, const std::string& src) {
  const auto& k = t.rows[r][c];
  std::size_t v = 0;
  const auto [p, ec] = std::from_chars(k.data(), k.data() + k.size(), v);
  if (ec != std::errc{} || p != k.data() + k.size()) {
    throw IoError(at_line(src, t.line_numbers[r]) + "expected a nonnegative integer, got '" + k + "'");
  }
  return v;
}

}  // namespace

EvalReport load_eval_report(const fs::path& csv) {
  static constexpr std::string_view header[] = {"metric", "category", "value"};
  const std::string src = csv.string();
  const CsvTable t = parse_csv(read_file(csv), header, src);
  // Slot 4 holds the overall metrics.
  std::array<std::optional<Metrics>, 5> metrics;
  std::array<bool, 5> share_seen{};
  EvalReport rep;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    std::size_t slot = 4;
    if (row[1] != "overall") {
      try {
        slot = static_cast<std::size_t>(parse_category(row[1]));
      } catch (const std::exception& e) {
        throw IoError(at_line(src, t.line_numbers[r]) + e.what());
      }
    }
    const std::string& metric = row[0];
    if (metric == "sensor_share") {
      const double v = cell_double(t, r, 2, src);
      if (slot < 4) rep.sensor_share[slot] = v;
      share_seen[slot] = true;
      continue;
    }
    Metrics& m = metrics[slot] ? *metrics[slot] : metrics[slot].emplace();
    if (metric == "mae") {
      m.mae = cell_double(t, r, 2, src);
    } else if (metric == "rmse") {
      m.rmse = cell_double(t, r, 2, src);
    } else if (metric == "mape") {
      m.mape = opt_cell(t, r, 2, src);
    } else if (metric == "wmape") {
      m.wmape = opt_cell(t, r, 2, src);
    } else if (metric == "entries") {
      m.count = cell_count(t, r, 2, src);
    } else if (metric == "mape_entries") {
      m.mape_count = cell_count(t, r, 2, src);
    } else if (metric == "mape_skipped") {
      m.mape_skipped = cell_count(t, r, 2, src);
    } else if (metric == "truth_sum") {
      m.truth_sum = cell_double(t, r, 2, src);
    } else {
      throw IoError(at_line(src, t.line_numbers[r]) + "unknown metric '" + metric + "'");
    }
  }
  if (!metrics[4]) throw IoError(src + ": no overall metrics");
  for (std::size_t k = 0; k < 5; ++k)
    if (!share_seen[k]) throw IoError(src + ": missing sensor_share row");
  rep.overall = *metrics[4];
  for (std::size_t k = 0; k < 4; ++k) rep.by_category[k] = metrics[k];
  return rep;
}

std::vector<SensorResidual> load_residuals(const fs::path& csv) {
  static constexpr std::string_view header[] = {"sensor_id", "category", "mae", "rmse", "bias", "wmape"};
  const std::string src = csv.string();
  const CsvTable t = parse_csv(read_file(csv), header, src);
  std::vector<SensorResidual> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    SensorResidual s;
    s.sensor_id = t.rows[r][0];
    try {
      s.category = parse_category(t.rows[r][1]);
    } catch (const std::exception& e) {
      throw IoError(at_line(src, t.line_numbers[r]) + e.what());
    }
    s.mae = cell_double(t, r, 2, src);
    s.rmse = cell_double(t, r, 3, src);
    s.bias = cell_double(t, r, 4, src);
    s.wmape = opt_cell(t, r, 5, src);
    out.push_back(std::move(s));
  }
  return out;
}

std::string loss_log_to_csv(std::span<const LossLogRow> rows) {
  std::string s = "epoch,train_loss,val_mae\n";
  for (const auto& r : rows) s += std::to_string(r.epoch) + "," + format_double(r.train_loss) + "," + opt(r.val_mae) + "\n";
  return s;
}

std::vector<LossLogRow> load_loss_log(const fs::path& csv) {
  static constexpr std::string_view header[] = {"epoch", "train_loss", "val_mae"};
  const std::string src = csv.string();
  const CsvTable t = parse_csv(read_file(csv), header, src);
  std::vector<LossLogRow> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    out.push_back({cell_count(t, r, 0, src), cell_double(t, r, 1, src), opt_cell(t, r, 2, src)});
  }
  return out;
}

Histogram Histogram::of(std::string quantity, std::span<const double> values, double lo, double hi, std::size_t bins) {
  if (bins == 0 || !(hi > lo)) throw std::invalid_argument("histogram: need bins >= 1 and hi > lo");
  Histogram h{std::move(quantity), lo, hi, std::vector<std::size_t>(bins, 0)};
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double v : values) {
    if (!(v >= lo && v <= hi)) continue;
    const auto k = std::min(bins - 1, static_cast<std::size_t>((v - lo) / width));
    ++h.counts[k];
  }
  return h;
}

std::string histograms_to_csv(std::span<const Histogram> hists) {
  std::string s = "quantity,bin_lo,bin_hi,count\n";
  for (const auto& h : hists) {
    const double width = (h.hi - h.lo) / static_cast<double>(h.counts.size());
    for (std::size_t k = 0; k < h.counts.size(); ++k) {
      const double a = h.lo + width * static_cast<double>(k);
      const double b = k + 1 == h.counts.size() ? h.hi : h.lo + width * static_cast<double>(k + 1);
      s += h.quantity + "," + format_double(a) + "," + format_double(b) + "," + std::to_string(h.counts[k]) + "\n";
    }
  }
  return s;
}

std::vector<Histogram> load_histograms(const fs::path& csv) {
  static constexpr std::string_view header[] = {"quantity", "bin_lo", "bin_hi", "count"};
  const std::string src = csv.string();
  const CsvTable t = parse_csv(read_file(csv), header, src);
  std::vector<Histogram> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& q = t.rows[r][0];
    const double a = cell_double(t, r, 1, src), b = cell_double(t, r, 2, src);
    if (!(b > a)) throw IoError(at_line(src, t.line_numbers[r]) + "empty bin");
    if (out.empty() || out.back().quantity != q) {
      out.push_back({q, a, b, {}});
    } else if (out.back().hi != a) {
      throw IoError(at_line(src, t.line_numbers[r]) + "bins of '" + q + "' are not contiguous");
    }
    out.back().hi = b;
    out.back().counts.push_back(cell_count(t, r, 3, src));
  }
  return out;
}

}  // namespace flowkrig
