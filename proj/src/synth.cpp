#include "flowkrig/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "flowkrig/rng.hpp"

namespace flowkrig {

SynthConfig SynthConfig::corridor() {
  SynthConfig c;
  c.mainline_peak_veh_h = 5000.0;
  c.am_peak_hour = 7.25;
  // The sensor between each on/off pair reads mainline plus ramp volume;
  // its neighbors read mainline only.
  const double ramp = 1.2 * c.mainline_peak_veh_h;
  const std::size_t eb_mid = c.sensor_interface(3), wb_mid = c.sensor_interface(5);
  c.ramps = {{"EB", eb_mid - 1, true, ramp},
             {"EB", eb_mid, false, ramp},
             {"WB", wb_mid - 1, true, ramp},
             {"WB", wb_mid, false, ramp}};
  c.bottleneck = BottleneckSpec{"EB", c.sensor_interface(13) + 1, 0.75, 7.0, 9.0};
  return c;
}

std::size_t SynthConfig::steps_per_interval() const {
  return static_cast<std::size_t>(std::llround(static_cast<double>(interval_seconds) / step_seconds));
}

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("synth config: " + m); };
  if (cells_per_direction == 0) fail("cells_per_direction must be positive");
  if (directions.empty()) fail("at least one direction is required");
  if (!(cell_length_km > 0.0) || !(step_seconds > 0.0)) fail("cell length and step must be positive");
  if (fd.free_flow_kmh * step_seconds / 3600.0 > cell_length_km) {
    fail("step too long for the cell length (vehicles would skip a cell)");
  }
  if (interval_seconds == 0 || 86400 % interval_seconds != 0) fail("interval must divide a day");
  const double spi = static_cast<double>(interval_seconds) / step_seconds;
  if (std::abs(spi - std::round(spi)) > 1e-9) fail("interval must be a whole number of steps");
  if (lanes < 1) fail("lanes must be >= 1");
  if (days == 0) fail("days must be positive");
  if (sensors_per_direction == 0 || sensor_spacing_cells == 0) fail("need at least one sensor and positive spacing");
  if (sensor_interface(sensors_per_direction - 1) > cells_per_direction) fail("sensors extend past the last cell");
  if (!(mainline_peak_veh_h >= 0.0) || !(noise_std >= 0.0) || !(speed_noise_std >= 0.0) || !(daily_variation >= 0.0)) {
    fail("demands and noise levels must be nonnegative");
  }
  // Peak demand must fit through an unobstructed cell.
  if (mainline_peak_veh_h * 1.3 > fd.capacity() * lanes) fail("mainline demand exceeds corridor capacity");
  for (const auto& r : ramps) {
    if (std::ranges::find(directions, r.direction) == directions.end()) fail("ramp on unknown direction " + r.direction);
    if (r.cell >= cells_per_direction) fail("ramp cell out of range");
    if (!(r.peak_veh_h >= 0.0)) fail("ramp demand must be nonnegative");
  }
  if (bottleneck) {
    const auto& b = *bottleneck;
    if (std::ranges::find(directions, b.direction) == directions.end()) fail("bottleneck on unknown direction");
    if (b.cell >= cells_per_direction) fail("bottleneck cell out of range");
    if (!(b.capacity_drop > 0.0 && b.capacity_drop < 1.0)) fail("capacity drop must be in (0, 1)");
    if (!(b.start_hour >= 0.0 && b.start_hour < b.end_hour && b.end_hour <= 24.0)) fail("bad bottleneck hours");
  }
}

double demand_profile(double h, const SynthConfig& cfg) {
  auto bump = [](double x, double mu, double w) { return std::exp(-((x - mu) / w) * ((x - mu) / w)); };
  auto logistic = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  const double daytime = logistic((h - 6.0) / 0.7) - logistic((h - 22.0) / 0.7);
  return 0.08 + 0.25 * daytime + 0.67 * bump(h, cfg.am_peak_hour, 1.0) + 0.6 * bump(h, cfg.pm_peak_hour, 1.3);
}

CtmDirection::CtmDirection(const SynthConfig& cfg, const std::string& direction) : cfg_(cfg), dir_(direction) {
  const std::size_t C = cfg.cells_per_direction;
  density_.assign(C, 0.0);
  flux_.assign(C + 1, 0.0);
  on_.assign(C, 0.0);
  off_.assign(C, 0.0);
  on_peak_.assign(C, 0.0);
  off_peak_.assign(C, 0.0);
  ramp_queue_.assign(C, 0.0);
  lanes_.assign(C, cfg.lanes);
  std::vector<std::size_t> ons, offs;
  for (const auto& r : cfg.ramps) {
    if (r.direction != direction) continue;
    (r.on ? on_peak_ : off_peak_)[r.cell] += r.peak_veh_h;
    (r.on ? ons : offs).push_back(r.cell);
  }
  if (cfg.auxiliary_lane) {
    std::ranges::sort(offs);
    for (std::size_t on : ons) {
      const auto next_off = std::ranges::lower_bound(offs, on);
      if (next_off == offs.end()) continue;
      for (std::size_t c = on; c <= *next_off; ++c) lanes_[c] = cfg.lanes + 1;
    }
  }
  if (cfg.bottleneck && cfg.bottleneck->direction == direction) bottleneck_ = cfg.bottleneck;
}

double CtmDirection::speed(std::size_t cell) const { return cfg_.fd.speed(density_[cell]); }

bool CtmDirection::bottleneck_active(double hour) const {
  return bottleneck_ && hour >= bottleneck_->start_hour && hour < bottleneck_->end_hour;
}

std::optional<std::size_t> CtmDirection::bottleneck_cell() const {
  return bottleneck_ ? std::optional(bottleneck_->cell) : std::nullopt;
}

void CtmDirection::step(double hour, double demand_scale) {
  const Greenshields& fd = cfg_.fd;
  const std::size_t C = density_.size();
  const double dt = cfg_.step_seconds / 3600.0;  // hours
  const double rho_c = fd.critical_density();
  const double profile = demand_profile(hour, cfg_) * demand_scale;

  std::vector<double> send(C), recv(C);
  for (std::size_t i = 0; i < C; ++i) {
    send[i] = lanes_[i] * fd.flow(std::min(density_[i], rho_c));
    recv[i] = lanes_[i] * fd.flow(std::max(density_[i], rho_c));
    if (bottleneck_active(hour) && i == bottleneck_->cell) {
      const double cap = (1.0 - bottleneck_->capacity_drop) * fd.capacity() * lanes_[i];
      send[i] = std::min(send[i], cap);
      recv[i] = std::min(recv[i], cap);
    }
  }

  // Point queue at the entry.
  const double demand = cfg_.mainline_peak_veh_h * profile;
  flux_[0] = std::min(demand + source_queue_ / dt, recv[0]);
  source_queue_ = std::max(0.0, source_queue_ + (demand - flux_[0]) * dt);

  for (std::size_t i = 0; i < C; ++i) {
    off_[i] = std::min(off_peak_[i] * profile, send[i]);
    on_[i] = 0.0;
  }
  for (std::size_t k = 1; k < C; ++k) flux_[k] = std::min(send[k - 1] - off_[k - 1], recv[k]);
  flux_[C] = send[C - 1] - off_[C - 1];
  // On-ramps merge into whatever receiving capacity the mainline leaves.
  for (std::size_t i = 0; i < C; ++i) {
    if (on_peak_[i] == 0.0) continue;
    const double r = on_peak_[i] * profile;
    on_[i] = std::max(0.0, std::min(r + ramp_queue_[i] / dt, recv[i] - flux_[i]));
    ramp_queue_[i] = std::max(0.0, ramp_queue_[i] + (r - on_[i]) * dt);
  }
  for (std::size_t i = 0; i < C; ++i) {
    density_[i] += dt / (cfg_.cell_length_km * lanes_[i]) * (flux_[i] + on_[i] - flux_[i + 1] - off_[i]);
    density_[i] = std::clamp(density_[i], 0.0, fd.jam_density);
  }
}

DatasetBundle synthesize_corridor(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t S = cfg.sensors_per_direction, D = cfg.directions.size();
  const std::size_t per_day = cfg.intervals_per_day(), T = per_day * cfg.days, spi = cfg.steps_per_interval();

  std::vector<double> day_scale(cfg.days);
  for (double& s : day_scale) s = std::clamp(1.0 + cfg.daily_variation * rng.normal(), 0.8, 1.2);

  DatasetBundle out;
  SensorNetwork& net = out.net;
  const double spacing_m = static_cast<double>(cfg.sensor_spacing_cells) * cfg.cell_length_km * 1000.0;
  for (std::size_t d = 0; d < D; ++d) {
    std::vector<int> lanes = CtmDirection(cfg, cfg.directions[d]).lanes();
    for (std::size_t k = 0; k < S; ++k) {
      const std::size_t iface = cfg.sensor_interface(k);
      char id[32];
      std::snprintf(id, sizeof id, "%s%02zu", cfg.directions[d].c_str(), k);
      net.sensor_ids.push_back(id);
      // Odd directions run the other way along the shared axis.
      const double x = static_cast<double>(iface) * cfg.cell_length_km * 1000.0;
      net.positions_m.push_back(d % 2 == 0 ? x : static_cast<double>(cfg.cells_per_direction) * cfg.cell_length_km * 1000.0 - x);
      net.directions.push_back(cfg.directions[d]);
      net.lanes.push_back(lanes[std::min(iface, cfg.cells_per_direction - 1)]);
      if (k > 0) net.edges.push_back({d * S + k - 1, d * S + k, spacing_m});
    }
  }
  net.validate();
  net.derive_upstream_neighbors();

  out.volume = SeriesMatrix(net.size(), T);
  out.speed = SeriesMatrix(net.size(), T);
  out.grid = {cfg.start_time, static_cast<std::int64_t>(cfg.interval_seconds)};
  GroundTruthFlags flags;
  flags.ramp_flanking.assign(net.size(), 0);
  flags.bottleneck_exposed.assign(net.size(), 0);
  flags.bottleneck_pair.assign(net.size(), 0);

  // Exposure: congested for at least 30 minutes per day on average while the
  // bottleneck is active.
  const double congested_steps_needed = 1800.0 / cfg.step_seconds * static_cast<double>(cfg.days);
  for (std::size_t d = 0; d < D; ++d) {
    CtmDirection ctm(cfg, cfg.directions[d]);
    // Spin up from an empty road on the midnight demand.
    for (double t = 0.0; t < 2.0 * 3600.0; t += cfg.step_seconds) ctm.step(0.0, day_scale[0]);

    std::vector<double> congested(S, 0.0);
    std::vector<double> inv_speed(S);
    for (std::size_t c = 0; c < T; ++c) {
      const std::size_t day = c / per_day;
      std::fill(inv_speed.begin(), inv_speed.end(), 0.0);
      std::vector<std::uint8_t> stopped(S, 0);
      for (std::size_t s = 0; s < spi; ++s) {
        const double sec = static_cast<double>(c % per_day) * static_cast<double>(cfg.interval_seconds) +
                           static_cast<double>(s) * cfg.step_seconds;
        const double hour = sec / 3600.0;
        ctm.step(hour, day_scale[day]);
        for (std::size_t k = 0; k < S; ++k) {
          const std::size_t iface = cfg.sensor_interface(k), cell = std::min(iface, ctm.cells() - 1);
          out.volume(d * S + k, c) += ctm.interface_flow()[iface] * cfg.step_seconds / 3600.0;
          const double v = ctm.speed(cell);
          if (v > 0.0) {
            inv_speed[k] += 1.0 / v;
          } else {
            stopped[k] = 1;
          }
          if (ctm.bottleneck_active(hour) && ctm.density()[cell] > cfg.fd.critical_density() + 1e-9) congested[k] += 1.0;
        }
      }
      for (std::size_t k = 0; k < S; ++k) {
        out.speed(d * S + k, c) = stopped[k] ? 0.0 : static_cast<double>(spi) / inv_speed[k];
      }
    }
    for (std::size_t k = 0; k < S; ++k) flags.bottleneck_exposed[d * S + k] = congested[k] >= congested_steps_needed;

    // A ramp flanks the two sensors on either side of its cell.
    for (const auto& r : cfg.ramps) {
      if (r.direction != cfg.directions[d] || r.peak_veh_h == 0.0) continue;
      for (std::size_t k = 0; k < S; ++k) {
        const std::size_t iface = cfg.sensor_interface(k);
        const bool before = iface <= r.cell && (k + 1 == S || cfg.sensor_interface(k + 1) > r.cell);
        const bool after = iface > r.cell && (k == 0 || cfg.sensor_interface(k - 1) <= r.cell);
        if (before || after) flags.ramp_flanking[d * S + k] = 1;
      }
    }
  }
  for (std::size_t i = 0; i < net.size(); ++i) {
    const auto up = net.upstream_neighbor[i];
    flags.bottleneck_pair[i] = flags.bottleneck_exposed[i] && up && flags.bottleneck_exposed[*up];
  }

  // Measurement noise only; the latent dynamics above are noise-free.
  for (double& v : out.volume.data) v = std::max(0.0, v + cfg.noise_std * rng.normal());
  for (double& v : out.speed.data) v = std::max(0.0, v + cfg.speed_noise_std * rng.normal());
  out.flags = std::move(flags);
  return out;
}

}  // namespace flowkrig
