#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flowkrig/io.hpp"

namespace flowkrig {

/// Greenshields fundamental diagram per lane: v = vf (1 - rho / rho_jam).
struct Greenshields {
  double free_flow_kmh = 100.0;
  double jam_density = 120.0;  // veh/km/lane

  double critical_density() const { return jam_density / 2.0; }
  double capacity() const { return free_flow_kmh * jam_density / 4.0; }  // veh/h/lane
  double speed(double rho) const { return free_flow_kmh * (1.0 - rho / jam_density); }
  double flow(double rho) const { return rho * speed(rho); }
};

struct RampSpec {
  std::string direction;
  std::size_t cell = 0;
  bool on = true;           // on-ramp feeds the cell, off-ramp drains it
  double peak_veh_h = 0.0;  // demand at the profile peak
};

struct BottleneckSpec {
  std::string direction;
  std::size_t cell = 0;
  double capacity_drop = 0.5;  // fraction of capacity removed while active
  double start_hour = 7.0;
  double end_hour = 9.0;
};

struct SynthConfig {
  std::size_t cells_per_direction = 48;
  double cell_length_km = 0.5;
  std::size_t first_sensor_interface = 2;
  std::size_t sensor_spacing_cells = 3;
  std::size_t sensors_per_direction = 15;
  std::vector<std::string> directions{"EB", "WB"};
  std::vector<RampSpec> ramps;
  std::optional<BottleneckSpec> bottleneck;
  Greenshields fd;
  int lanes = 3;
  bool auxiliary_lane = true;  // one extra lane from each on-ramp to the next off-ramp
  std::size_t days = 7;
  double mainline_peak_veh_h = 3000.0;
  double am_peak_hour = 8.0;
  double pm_peak_hour = 17.5;
  double daily_variation = 0.05;  // std of the per-day demand multiplier
  double noise_std = 2.0;         // vehicles per interval
  double speed_noise_std = 1.0;   // km/h
  double step_seconds = 15.0;
  std::size_t interval_seconds = 300;
  std::int64_t start_time = 1704067200;  // 2024-01-01T00:00:00Z
  std::uint64_t seed = 1;

  /// 30 sensors over two directions, an on/off ramp pair per direction with
  /// a sensor between them, and a 7-9 AM bottleneck near the end of "EB".
  static SynthConfig corridor();

  std::size_t steps_per_interval() const;
  std::size_t intervals_per_day() const { return 86400 / interval_seconds; }
  /// Sensor k of a direction sits on interface first + k * spacing.
  std::size_t sensor_interface(std::size_t k) const { return first_sensor_interface + k * sensor_spacing_cells; }
  void validate() const;
};

/// Fraction of the peak demand at hour-of-day h (AM and PM peaks on a
/// daytime plateau).
double demand_profile(double hour, const SynthConfig& cfg);

/// One direction of the cell transmission model. Interface k sits between
/// cell k-1 and cell k; interface 0 is the entry and interface C the exit.
class CtmDirection {
 public:
  CtmDirection(const SynthConfig& cfg, const std::string& direction);

  /// Advances one step. Demands are veh/h at the current time of day.
  void step(double hour, double demand_scale);

  std::size_t cells() const { return density_.size(); }
  const std::vector<double>& density() const { return density_; }  // veh/km/lane
  const std::vector<int>& lanes() const { return lanes_; }
  /// Mainline flux across each interface during the last step, veh/h.
  const std::vector<double>& interface_flow() const { return flux_; }
  const std::vector<double>& ramp_inflow() const { return on_; }    // per cell, veh/h
  const std::vector<double>& ramp_outflow() const { return off_; }  // per cell, veh/h
  double speed(std::size_t cell) const;
  bool bottleneck_active(double hour) const;
  std::optional<std::size_t> bottleneck_cell() const;

 private:
  const SynthConfig& cfg_;
  std::string dir_;
  std::vector<double> density_, flux_, on_, off_;
  std::vector<int> lanes_;
  std::vector<double> on_peak_, off_peak_, ramp_queue_;
  double source_queue_ = 0.0;
  std::optional<BottleneckSpec> bottleneck_;
};

/// Deterministic two-direction corridor with per-interval volumes (interface
/// counts) and harmonic-mean cell speeds, plus measurement noise.
DatasetBundle synthesize_corridor(const SynthConfig& cfg);

}  // namespace flowkrig
