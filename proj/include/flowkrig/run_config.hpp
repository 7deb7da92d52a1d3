#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "flowkrig/diagnostics.hpp"
#include "flowkrig/graph.hpp"
#include "flowkrig/model.hpp"
#include "flowkrig/synth.hpp"
#include "flowkrig/train.hpp"

namespace flowkrig {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Settings for every subcommand, read from `key = value` lines.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SynthConfig synth = SynthConfig::corridor();
  bool synth_ramps = true;
  bool synth_bottleneck = true;
  std::optional<double> ramp_peak_veh_h;

  DiagnosticsConfig diagnostics;
  /// Cutoff of the diagnostic neighbor kernel; unset means 1.2 x the median
  /// edge length, which keeps immediate neighbors only.
  std::optional<double> diagnostics_epsilon;

  /// Training kernel; unset values come from the distance statistics.
  std::optional<double> graph_delta;
  std::optional<double> graph_epsilon;

  /// Missing rate expected at test time; unset means the unobserved share of
  /// the network given to `train`.
  std::optional<double> expected_missing_rate;

  std::optional<std::uint64_t> seed;

  /// Applies one setting. Unknown keys and malformed values throw ConfigError.
  void set(std::string_view key, std::string_view value);
  void validate() const;

  SynthConfig synth_config() const;
  KernelParams training_kernel(const SensorNetwork& net) const;
  KernelParams diagnostics_kernel(const SensorNetwork& net) const;
  TrainConfig train_config() const;

  /// Every accepted key, in the order `to_text` writes them.
  static const std::vector<std::string>& keys();
  /// All settings as text that `parse` reads back to the same values.
  std::string to_text() const;
  static RunConfig parse(std::string_view text, const std::string& source = "config");
};

}  // namespace flowkrig
