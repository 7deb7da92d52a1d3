// flowkrig: synthesize, diagnose, train, estimate, evaluate.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "flowkrig/checkpoint.hpp"
#include "flowkrig/diagnostics.hpp"
#include "flowkrig/evaluation.hpp"
#include "flowkrig/io.hpp"
#include "flowkrig/run_config.hpp"
#include "flowkrig/synth.hpp"
#include "flowkrig/train.hpp"

namespace fs = std::filesystem;
using namespace flowkrig;

namespace {

struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key = value settings file")->check(CLI::ExistingFile);
    cmd->add_option("--set", overrides, "override one setting, key=value (repeatable)");
    cmd->add_option("--seed", seed, "random seed (falls back to FLOWKRIG_SEED, then the config file)");
  }

  bool given() const { return !config_path.empty() || !overrides.empty(); }

  RunConfig resolve() const {
    RunConfig c = config_path.empty() ? RunConfig{} : RunConfig::parse(read_file(config_path), config_path);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
      c.set(o.substr(0, eq), o.substr(eq + 1));
    }
    if (seed) {
      c.seed = *seed;
    } else if (const char* env = std::getenv("FLOWKRIG_SEED"); env && *env) {
      c.set("seed", env);
    }
    c.validate();
    return c;
  }
};

/// "report.csv" -> "report_<suffix>.csv" next to it.
fs::path sibling(const fs::path& p, const std::string& suffix) {
  fs::path out = p;
  out.replace_filename(p.stem().string() + "_" + suffix + ".csv");
  return out;
}

std::size_t steps_per_day(const TimeGrid& g) {
  if (g.interval <= 0 || 86400 % g.interval != 0) {
    throw IoError("interval of " + std::to_string(g.interval) + " s does not divide a day");
  }
  return static_cast<std::size_t>(86400 / g.interval);
}

/// Network and speed for every sensor; volume only where readings exist.
struct PartialData {
  SensorNetwork net;
  SeriesMatrix volume, speed;
  TimeGrid grid;
  std::vector<std::size_t> volume_rows;
};

PartialData load_partial(const fs::path& dir) {
  PartialData d;
  d.net = load_network(dir / "sensors.csv", dir / "edges.csv");
  LoadedSeries spd = load_series(dir / "speed.csv", d.net, "speed");
  LoadedSeries vol = load_series(dir / "volume.csv", d.net, "volume", 300, false);
  if (vol.grid.start != spd.grid.start || vol.values.cols != spd.values.cols) {
    throw IoError(dir.string() + ": volume and speed cover different time spans");
  }
  d.volume = std::move(vol.values);
  d.speed = std::move(spd.values);
  d.grid = spd.grid;
  d.volume_rows = std::move(vol.present);
  return d;
}

void require_volume(const PartialData& d, std::span<const std::size_t> rows, const std::string& what) {
  for (std::size_t r : rows)
    if (std::ranges::find(d.volume_rows, r) == d.volume_rows.end()) {
      throw IoError(what + " sensor " + d.net.sensor_ids[r] + " has no volume readings");
    }
}

std::vector<std::size_t> complement(std::size_t n, std::span<const std::size_t> rows) {
  std::vector<std::uint8_t> in(n, 0);
  for (std::size_t r : rows) in[r] = 1;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i)
    if (!in[i]) out.push_back(i);
  return out;
}

std::string percent(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * *v);
  return buf;
}

int run_synth(const ConfigFlags& flags, const fs::path& out) {
  const RunConfig rc = flags.resolve();
  const DatasetBundle d = synthesize_corridor(rc.synth_config());
  save_dataset(out, d);
  write_file_atomic(out / "run_config.txt", rc.to_text());
  std::cout << "wrote " << d.net.size() << " sensors x " << d.volume.cols << " steps to " << out.string() << "\n";
  return 0;
}

int run_diagnose(const ConfigFlags& flags, const fs::path& data, const fs::path& out, fs::path hist_out) {
  const RunConfig rc = flags.resolve();
  const DatasetBundle d = load_dataset(data);
  DiagnosticsConfig dc = rc.diagnostics;
  dc.steps_per_day = steps_per_day(d.grid);
  const Matrix w = undirected_neighbor_weights(build_adjacency_set(d.net, rc.diagnostics_kernel(d.net)).a_tilde);
  const DiagnosticsReport rep = diagnose(d.net, d.volume, w, dc);

  std::vector<double> wd, ta;
  for (const auto& s : rep.sensors) {
    if (s.wdssi) wd.push_back(*s.wdssi);
    if (s.tai) ta.push_back(*s.tai);
  }
  double wd_hi = 1.0;
  for (double v : wd) wd_hi = std::max(wd_hi, std::ceil(v * 10.0) / 10.0);
  const std::vector<Histogram> hists{Histogram::of("wdssi", wd, 0.0, wd_hi, 20), Histogram::of("tai", ta, 0.0, 1.0, 20)};

  if (hist_out.empty()) hist_out = sibling(out, "hist");
  write_file_atomic(out, diagnostics_to_csv(rep));
  write_file_atomic(hist_out, histograms_to_csv(hists));
  const auto c = rep.counts();
  std::cout << "udt " << c[0] << ", dt_eq " << c[1] << ", dt_neq " << c[2] << ", unclassified " << c[3] << "\n";
  return 0;
}

int run_train(const ConfigFlags& flags, const fs::path& data, const fs::path& observed_ids, const fs::path& out,
              fs::path loss_out, bool quiet) {
  const RunConfig rc = flags.resolve();
  const PartialData d = load_partial(data);
  const std::vector<std::size_t> observed = resolve_ids(d.net, load_id_list(observed_ids));
  require_volume(d, observed, "observed");

  const TrainConfig tc = rc.train_config();
  const double missing =
      rc.expected_missing_rate.value_or(1.0 - static_cast<double>(observed.size()) / static_cast<double>(d.net.size()));
  if (tc.mask_count == 0 && std::abs(tc.mask_ratio - missing) > 1e-9) {
    std::cerr << "warning: train.mask_ratio " << tc.mask_ratio << " differs from the expected test missing rate "
              << missing << "; matching them usually gives the lowest test error\n";
  }

  const KernelParams kp = rc.training_kernel(d.net);
  TrainHooks hooks;
  std::vector<LossLogRow> log;
  hooks.on_epoch = [&](const EpochRecord& e) {
    log.push_back({e.epoch, e.train_loss, e.val_mae});
    if (!quiet) {
      std::cerr << "epoch " << e.epoch << "  train_loss " << e.train_loss;
      if (e.val_mae) std::cerr << "  val_mae " << *e.val_mae;
      std::cerr << "\n";
    }
  };
  const TrainResult r = train(d.net, d.volume, d.speed, observed, kp, rc.model, tc, hooks);

  if (loss_out.empty()) loss_out = sibling(out, "loss");
  save_model(out, r.model);
  write_file_atomic(loss_out, loss_log_to_csv(log));
  std::cout << "trained " << r.epochs.size() << " epochs, best epoch " << r.best_epoch << ", "
            << r.model.state.parameter_count() << " parameters -> " << out.string() << "\n";
  return 0;
}

void check_model_matches(const ModelConfig& ckpt, const ModelConfig& cfg) {
  auto differ = [](const char* key, auto a, auto b) {
    if (a != b) {
      throw ConfigError(std::string("checkpoint was trained with ") + key + " = " + std::to_string(a) +
                        " but the config says " + std::to_string(b));
    }
  };
  differ("model.diffusion_steps", ckpt.diffusion_steps, cfg.diffusion_steps);
  differ("model.hidden_dim", ckpt.hidden_dim, cfg.hidden_dim);
  differ("model.num_tdcn_layers", ckpt.num_tdcn_layers, cfg.num_tdcn_layers);
  differ("model.tcn_kernel", ckpt.tcn_kernel, cfg.tcn_kernel);
  differ("model.num_tcn_layers", ckpt.num_tcn_layers, cfg.num_tcn_layers);
  differ("model.seq_len", ckpt.seq_len, cfg.seq_len);
  differ("model.topk", ckpt.effective_topk(), cfg.effective_topk());
}

int run_estimate(const ConfigFlags& flags, const fs::path& data, const fs::path& model_path,
                 const fs::path& unobserved_ids, const fs::path& out, const std::string& method) {
  const PartialData d = load_partial(data);
  const std::vector<std::size_t> unobserved = resolve_ids(d.net, load_id_list(unobserved_ids));
  if (unobserved.empty()) throw ConfigError("the unobserved id list is empty");
  const std::vector<std::size_t> observed = complement(d.net.size(), unobserved);
  if (observed.empty()) throw ConfigError("every sensor is listed as unobserved");
  require_volume(d, observed, "observed");

  SeriesMatrix est;
  if (method == "knn") {
    const RunConfig rc = flags.resolve();
    const KnnResult k = knn_estimate(d.net, d.volume, build_adjacency_set(d.net, rc.training_kernel(d.net)).a_tilde,
                                     observed);
    for (std::size_t r : k.unestimable)
      std::cerr << "warning: " << d.net.sensor_ids[r] << " has no observed same-direction sensor; estimate is 0\n";
    est = k.estimate;
  } else {
    if (model_path.empty()) throw ConfigError("--model is required unless --method knn");
    const TrainedModel m = load_model(model_path);
    if (flags.given()) check_model_matches(m.config, flags.resolve().model);
    est = estimate_volumes(m, d.net, d.volume, d.speed, observed);
  }
  write_file_atomic(out, series_to_csv(d.net, est, d.grid, unobserved));
  std::cout << "estimated " << unobserved.size() << " sensors x " << est.cols << " steps -> " << out.string() << "\n";
  return 0;
}

int run_evaluate(const fs::path& truth_dir, const fs::path& est_path, const fs::path& diag_path, const fs::path& out,
                 fs::path residual_out) {
  const DatasetBundle truth = load_dataset(truth_dir);
  const LoadedSeries est =
      load_series(est_path, truth.net, "estimate", static_cast<std::size_t>(truth.grid.interval), false, true);
  if (est.grid.start != truth.grid.start || est.values.cols != truth.volume.cols) {
    throw IoError(est_path.string() + ": estimates do not cover the same time span as the truth");
  }
  if (!est.gaps.empty()) {
    throw IoError(est_path.string() + ": estimate for " + est.gaps.front().sensor_id + " has missing steps");
  }
  const DiagnosticsReport diag = load_diagnostics(diag_path);
  const EvalReport rep = decompose_errors(truth.net, truth.volume, est.values, est.present, diag);

  if (residual_out.empty()) residual_out = sibling(out, "residuals");
  write_file_atomic(out, eval_report_to_csv(rep));
  write_file_atomic(residual_out, residuals_to_csv(rep));
  std::printf("%-14s %10s %10s %10s %10s %8s\n", "category", "MAE", "RMSE", "MAPE", "WMAPE", "sensors");
  auto row = [&](const std::string& name, const Metrics& m, double share) {
    std::printf("%-14s %10.3f %10.3f %10s %10s %7.0f%%\n", name.c_str(), m.mae, m.rmse, percent(m.mape).c_str(),
                percent(m.wmape).c_str(), 100.0 * share);
  };
  row("overall", rep.overall, 1.0);
  for (FlowCategory c : kAllCategories)
    if (const auto& m = rep.category(c)) row(std::string(category_name(c)), *m, rep.sensor_share[static_cast<std::size_t>(c)]);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Traffic volume kriging at unsensored locations"};
  app.require_subcommand(1);

  ConfigFlags synth_flags, diag_flags, train_flags, est_flags;
  std::string out, data, hist_out, observed, loss_out, model, unobserved, method = "stcagcn", truth, est, diag,
      residual_out;
  bool quiet = false;

  auto* synth = app.add_subcommand("synth", "simulate the two-direction test corridor");
  synth_flags.attach(synth);
  synth->add_option("--out", out, "output directory")->required();

  auto* dg = app.add_subcommand("diagnose", "WDSSI, TAI and flow category per sensor");
  diag_flags.attach(dg);
  dg->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  dg->add_option("--out", out, "report CSV")->required();
  dg->add_option("--histograms", hist_out, "histogram CSV (default: <out>_hist.csv)");

  auto* tr = app.add_subcommand("train", "train STCAGCN on the observed sensors");
  train_flags.attach(tr);
  tr->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--observed", observed, "observed sensor ids, one per line")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", out, "checkpoint path")->required();
  tr->add_option("--loss-log", loss_out, "per-epoch loss CSV (default: <out>_loss.csv)");
  tr->add_flag("--quiet", quiet, "no per-epoch progress");

  auto* es = app.add_subcommand("estimate", "estimate volumes at unobserved sensors");
  est_flags.attach(es);
  es->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  es->add_option("--model", model, "checkpoint path")->check(CLI::ExistingFile);
  es->add_option("--unobserved", unobserved, "sensor ids to estimate, one per line")->required()->check(CLI::ExistingFile);
  es->add_option("--out", out, "estimate CSV")->required();
  es->add_option("--method", method, "stcagcn or knn")->check(CLI::IsMember({"stcagcn", "knn"}));

  auto* ev = app.add_subcommand("evaluate", "error metrics overall and per flow category");
  ev->add_option("--truth", truth, "dataset directory with true volumes")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--est", est, "estimate CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("--diagnostics", diag, "diagnostics report CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", out, "metrics CSV")->required();
  ev->add_option("--residuals", residual_out, "per-sensor residual CSV (default: <out>_residuals.csv)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return run_synth(synth_flags, out);
    if (dg->parsed()) return run_diagnose(diag_flags, data, out, hist_out);
    if (tr->parsed()) return run_train(train_flags, data, observed, out, loss_out, quiet);
    if (es->parsed()) return run_estimate(est_flags, data, model, unobserved, out, method);
    if (ev->parsed()) return run_evaluate(truth, est, diag, out, residual_out);
  } catch (const std::exception& e) {
    std::cerr << "flowkrig: error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
