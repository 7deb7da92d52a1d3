#include "flowkrig/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <limits>
#include <sstream>

#include "flowkrig/io.hpp"

namespace flowkrig {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || v.empty()) {
    throw ConfigError(std::string(key) + ": expected a non-negative integer, got '" + std::string(v) + "'");
  }
  return out;
}

std::size_t to_size(std::string_view key, std::string_view v) { return static_cast<std::size_t>(to_u64(key, v)); }

double to_real(std::string_view key, std::string_view v) {
  try {
    return parse_double(v);
  } catch (const IoError&) {
    throw ConfigError(std::string(key) + ": expected a number, got '" + std::string(v) + "'");
  }
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(std::string(key) + ": expected true or false, got '" + std::string(v) + "'");
}

std::string bool_text(bool b) { return b ? "true" : "false"; }

template <class T>
std::string opt_text(const std::optional<T>& v) {
  if (!v) return "";
  if constexpr (std::is_floating_point_v<T>) {
    return format_double(*v);
  } else {
    return std::to_string(*v);
  }
}

struct Entry {
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define FK_SIZE(name, field)                                                              \
  Entry {                                                                                 \
    name, [](RunConfig& c, std::string_view v) { c.field = to_size(name, v); },           \
        [](const RunConfig& c) { return std::to_string(c.field); }                        \
  }
#define FK_REAL(name, field)                                                              \
  Entry {                                                                                 \
    name, [](RunConfig& c, std::string_view v) { c.field = to_real(name, v); },           \
        [](const RunConfig& c) { return format_double(c.field); }                         \
  }
#define FK_OPT_REAL(name, field)                                                          \
  Entry {                                                                                 \
    name,                                                                                 \
        [](RunConfig& c, std::string_view v) {                                            \
          c.field = v.empty() ? std::nullopt : std::optional<double>(to_real(name, v));   \
        },                                                                                \
        [](const RunConfig& c) { return opt_text(c.field); }                              \
  }
#define FK_BOOL(name, field)                                                              \
  Entry {                                                                                 \
    name, [](RunConfig& c, std::string_view v) { c.field = to_bool(name, v); },           \
        [](const RunConfig& c) { return bool_text(c.field); }                             \
  }
#define FK_BOTTLENECK(name, field)                                                        \
  Entry {                                                                                 \
    name, [](RunConfig& c, std::string_view v) { c.synth.bottleneck->field = to_real(name, v); }, \
        [](const RunConfig& c) { return format_double(c.synth.bottleneck->field); }       \
  }

const std::vector<Entry>& table() {
  static const std::vector<Entry> t = {
      {"seed",
       [](RunConfig& c, std::string_view v) {
         c.seed = v.empty() ? std::nullopt : std::optional<std::uint64_t>(to_u64("seed", v));
       },
       [](const RunConfig& c) { return opt_text(c.seed); }},
      {"model.diffusion_steps",
       [](RunConfig& c, std::string_view v) {
         const std::size_t k = to_size("model.diffusion_steps", v);
         if (k > std::numeric_limits<unsigned>::max()) throw ConfigError("model.diffusion_steps: value too large");
         c.model.diffusion_steps = static_cast<unsigned>(k);
       },
       [](const RunConfig& c) { return std::to_string(c.model.diffusion_steps); }},
      FK_SIZE("model.hidden_dim", model.hidden_dim),
      FK_SIZE("model.num_tdcn_layers", model.num_tdcn_layers),
      FK_SIZE("model.tcn_kernel", model.tcn_kernel),
      FK_SIZE("model.num_tcn_layers", model.num_tcn_layers),
      FK_SIZE("model.seq_len", model.seq_len),
      FK_SIZE("model.topk", model.topk),
      FK_REAL("model.leaky_slope", model.leaky_slope),
      {"model.attention_scale",
       [](RunConfig& c, std::string_view v) {
         try {
           c.model.attention_scale = parse_attention_scale(std::string(v));
         } catch (const std::invalid_argument& e) {
           throw ConfigError(std::string("model.attention_scale: ") + e.what());
         }
       },
       [](const RunConfig& c) { return attention_scale_name(c.model.attention_scale); }},
      FK_SIZE("train.batch_size", train.batch_size),
      FK_SIZE("train.batches_per_epoch", train.batches_per_epoch),
      FK_SIZE("train.max_epochs", train.max_epochs),
      FK_REAL("train.mask_ratio", train.mask_ratio),
      FK_SIZE("train.mask_count", train.mask_count),
      FK_REAL("train.lr", train.lr),
      FK_REAL("train.lambda", train.lambda),
      FK_SIZE("train.patience", train.patience),
      FK_REAL("train.val_fraction", train.val_fraction),
      FK_SIZE("train.val_windows", train.val_windows),
      FK_OPT_REAL("train.expected_missing_rate", expected_missing_rate),
      FK_OPT_REAL("graph.delta", graph_delta),
      FK_OPT_REAL("graph.epsilon", graph_epsilon),
      FK_REAL("diagnostics.wdssi_threshold", diagnostics.wdssi_threshold),
      FK_REAL("diagnostics.tai_threshold", diagnostics.tai_threshold),
      FK_OPT_REAL("diagnostics.epsilon", diagnostics_epsilon),
      {"diagnostics.tai_window",
       [](RunConfig& c, std::string_view v) {
         if (v.empty()) {
           c.diagnostics.tai_window.reset();
           return;
         }
         const auto colon = v.find(':');
         if (colon == std::string_view::npos) {
           throw ConfigError("diagnostics.tai_window: expected begin:end in steps of the day, got '" +
                             std::string(v) + "'");
         }
         c.diagnostics.tai_window = DailyWindow{to_size("diagnostics.tai_window", trim(v.substr(0, colon))),
                                                to_size("diagnostics.tai_window", trim(v.substr(colon + 1)))};
       },
       [](const RunConfig& c) {
         const auto& w = c.diagnostics.tai_window;
         return w ? std::to_string(w->begin) + ":" + std::to_string(w->end) : std::string();
       }},
      FK_SIZE("synth.days", synth.days),
      {"synth.lanes", [](RunConfig& c, std::string_view v) {
         const std::size_t n = to_size("synth.lanes", v);
         if (n > 16) throw ConfigError("synth.lanes: at most 16 lanes");
         c.synth.lanes = static_cast<int>(n);
       },
       [](const RunConfig& c) { return std::to_string(c.synth.lanes); }},
      FK_BOOL("synth.auxiliary_lane", synth.auxiliary_lane),
      FK_REAL("synth.mainline_peak_veh_h", synth.mainline_peak_veh_h),
      FK_REAL("synth.am_peak_hour", synth.am_peak_hour),
      FK_REAL("synth.pm_peak_hour", synth.pm_peak_hour),
      FK_REAL("synth.daily_variation", synth.daily_variation),
      FK_REAL("synth.noise_std", synth.noise_std),
      FK_REAL("synth.speed_noise_std", synth.speed_noise_std),
      FK_BOOL("synth.ramps", synth_ramps),
      FK_OPT_REAL("synth.ramp_peak_veh_h", ramp_peak_veh_h),
      FK_BOOL("synth.bottleneck", synth_bottleneck),
      FK_BOTTLENECK("synth.bottleneck_capacity_drop", capacity_drop),
      FK_BOTTLENECK("synth.bottleneck_start_hour", start_hour),
      FK_BOTTLENECK("synth.bottleneck_end_hour", end_hour),
      FK_REAL("synth.step_seconds", synth.step_seconds),
      {"synth.start_time",
       [](RunConfig& c, std::string_view v) {
         try {
           c.synth.start_time = parse_iso8601(v);
         } catch (const IoError& e) {
           throw ConfigError(std::string("synth.start_time: ") + e.what());
         }
       },
       [](const RunConfig& c) { return format_iso8601(c.synth.start_time); }},
  };
  return t;
}

#undef FK_SIZE
#undef FK_REAL
#undef FK_OPT_REAL
#undef FK_BOOL
#undef FK_BOTTLENECK

double median_edge_length(const SensorNetwork& net) {
  if (net.edges.empty()) throw ConfigError("the network has no edges; set diagnostics.epsilon explicitly");
  std::vector<double> d;
  for (const auto& e : net.edges) d.push_back(e.distance_m);
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid;
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  for (const auto& e : table()) {
    if (e.key == key) {
      e.set(*this, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void RunConfig::validate() const {
  try {
    model.validate();
    train_config().validate();
    synth_config().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (expected_missing_rate && !(*expected_missing_rate > 0.0 && *expected_missing_rate < 1.0)) {
    throw ConfigError("train.expected_missing_rate must be in (0, 1)");
  }
  if (graph_delta && !(*graph_delta > 0.0)) throw ConfigError("graph.delta must be positive");
  if (graph_epsilon && !(*graph_epsilon > 0.0)) throw ConfigError("graph.epsilon must be positive");
  if (diagnostics_epsilon && !(*diagnostics_epsilon > 0.0)) throw ConfigError("diagnostics.epsilon must be positive");
  if (const auto& w = diagnostics.tai_window; w && w->begin >= w->end) {
    throw ConfigError("diagnostics.tai_window must have begin < end");
  }
}

SynthConfig RunConfig::synth_config() const {
  SynthConfig c = synth;
  if (!synth_ramps) c.ramps.clear();
  if (ramp_peak_veh_h)
    for (auto& r : c.ramps) r.peak_veh_h = *ramp_peak_veh_h;
  if (!synth_bottleneck) c.bottleneck.reset();
  if (seed) c.seed = *seed;
  return c;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  if (seed) t.seed = *seed;
  return t;
}

KernelParams RunConfig::training_kernel(const SensorNetwork& net) const {
  KernelParams kp{};
  if (!graph_delta || !graph_epsilon) kp = default_kernel_params(travel_distances(net));
  if (graph_delta) kp.delta = *graph_delta;
  if (graph_epsilon) kp.epsilon = *graph_epsilon;
  return kp;
}

KernelParams RunConfig::diagnostics_kernel(const SensorNetwork& net) const {
  KernelParams kp = training_kernel(net);
  kp.epsilon = diagnostics_epsilon ? *diagnostics_epsilon : 1.2 * median_edge_length(net);
  return kp;
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& e : table()) out.push_back(e.key);
    return out;
  }();
  return k;
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& e : table()) s += e.key + " = " + e.get(*this) + "\n";
  return s;
}

RunConfig RunConfig::parse(std::string_view text, const std::string& source) {
  RunConfig c;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> seen;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view l = line;
    if (const auto hash = l.find('#'); hash != std::string_view::npos) l = l.substr(0, hash);
    l = trim(l);
    if (l.empty()) continue;
    const auto eq = l.find('=');
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string_view::npos) throw ConfigError(where + "expected key = value");
    const std::string key(trim(l.substr(0, eq)));
    if (std::ranges::find(seen, key) != seen.end()) throw ConfigError(where + "duplicate key '" + key + "'");
    seen.push_back(key);
    try {
      c.set(key, l.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return c;
}

}  // namespace flowkrig
