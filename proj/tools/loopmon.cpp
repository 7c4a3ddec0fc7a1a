// loopmon command line: corridor-world dataset generation, training for both
// anomaly monitors, threshold calibration, episode monitoring, report
// evaluation, and report plotting.
//
// Exit codes: 0 success, 2 invalid arguments, 3 data or format errors,
// 4 training divergence.
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "loopmon/cfam.hpp"
#include "loopmon/checkpoint.hpp"
#include "loopmon/configfile.hpp"
#include "loopmon/dataio.hpp"
#include "loopmon/errors.hpp"
#include "loopmon/image.hpp"
#include "loopmon/monitor.hpp"
#include "loopmon/plot.hpp"
#include "loopmon/sfam.hpp"
#include "loopmon/sim.hpp"

namespace fs = std::filesystem;

namespace {

using namespace loopmon;

// Episode directories under a dataset root: the root itself when it is an
// episode, otherwise its episode subdirectories in name order.
std::vector<std::string> discover_episodes(const std::string& root) {
  if (fs::is_regular_file(fs::path(root) / "episode.csv")) return {root};
  std::vector<std::string> dirs;
  if (!fs::is_directory(root))
    throw std::invalid_argument("no such dataset directory: " + root);
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory() &&
        fs::is_regular_file(entry.path() / "episode.csv"))
      dirs.push_back(entry.path().string());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty())
    throw std::invalid_argument("no episodes found under " + root);
  return dirs;
}

Frame fit_frame(const Frame& f, int h, int w) {
  return f.dim(1) == h && f.dim(2) == w ? f : resize_bilinear(f, h, w);
}

void fit_episode(Episode& ep, int h, int w) {
  for (auto& r : ep.records) r.frame = fit_frame(r.frame, h, w);
  ep.meta.height = h;
  ep.meta.width = w;
}

std::string zero4(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", i);
  return buf;
}

// ---- datagen ---------------------------------------------------------------

struct DatagenOpts {
  std::string out;
  std::string world;
  int count = 8;
  int length = 300;
  std::uint64_t seed = 1;
  int late_right = 0;
  int early_left = 0;
  int duration = 30;
};

void run_datagen(const DatagenOpts& o) {
  WorldConfig wc;
  if (!o.world.empty()) wc = world_from_config(KeyValues::load(o.world));
  if (o.count < 0 || o.length < 1 || o.duration < 1)
    throw std::invalid_argument("datagen: bad count, length, or duration");
  fs::create_directories(o.out);
  world_to_config(wc).save((fs::path(o.out) / "world.kv").string());
  for (int i = 0; i < o.count; ++i) {
    const Episode ep = simulate_episode(wc, o.seed + std::uint64_t(i),
                                        o.length);
    save_episode(ep, (fs::path(o.out) / ("ep_" + zero4(i))).string());
  }
  std::printf("wrote %d nominal episodes of %d frames to %s\n", o.count,
              o.length, o.out.c_str());

  struct Plan {
    AnomalyScenario::Kind kind;
    int count;
    std::uint64_t base;
  };
  const std::vector<Plan> plans = {
      {AnomalyScenario::Kind::late_right, o.late_right, 10000},
      {AnomalyScenario::Kind::early_left, o.early_left, 20000}};
  for (const auto& plan : plans) {
    int made = 0;
    for (std::uint64_t attempt = 0; made < plan.count && attempt < 500;
         ++attempt) {
      const std::uint64_t seed = o.seed + plan.base + attempt;
      const Episode nominal = simulate_episode(wc, seed, o.length);
      AnomalyScenario scenario;
      try {
        scenario = find_override_window(nominal, plan.kind, o.duration);
      } catch (const std::invalid_argument&) {
        continue;  // this episode never shows the pattern; try the next seed
      }
      const Episode executed = inject_anomaly(nominal, scenario, wc, seed);
      const fs::path dir =
          fs::path(o.out) /
          (std::string(to_string(plan.kind)) + "_" + zero4(made));
      save_episode(nominal, (dir / "nominal").string());
      save_episode(executed, (dir / "executed").string());
      KeyValues sc;
      sc.set("kind", to_string(plan.kind));
      sc.set("start_t", scenario.start_t);
      sc.set("end_t", scenario.end_t);
      sc.set("seed", (unsigned long long)(seed));
      sc.save((dir / "scenario.kv").string());
      ++made;
    }
    if (made < plan.count)
      throw std::invalid_argument(
          std::string("datagen: world settings never produce a ") +
          to_string(plan.kind) + " override window");
    if (plan.count > 0)
      std::printf("wrote %d %s episode pairs\n", made, to_string(plan.kind));
  }
}

// ---- training --------------------------------------------------------------

struct TrainOpts {
  std::string data;
  std::string config;
  std::string out;
  std::uint64_t seed = 1;
  int window_stride = 1;
};

void run_train_cfam(const TrainOpts& o) {
  CfamConfig cfg;
  if (!o.config.empty()) cfg = cfam_config_from(KeyValues::load(o.config));
  cfg.validate();
  std::vector<std::pair<Frame, float>> pairs;
  for (const auto& dir : discover_episodes(o.data)) {
    const Episode ep = load_episode(dir);
    for (std::size_t t = 0; t + 1 < ep.records.size(); ++t)
      pairs.emplace_back(
          fit_frame(ep.records[t].frame, cfg.image_size, cfg.image_size),
          float(ep.records[t + 1].u));
  }
  std::printf("training cfam on %zu frame/command pairs\n", pairs.size());
  auto result = train_cfam(pairs, cfg, o.seed);
  for (const auto& log : result.log)
    std::printf("epoch %d loss_d %.6f loss_g %.6f\n", log.epoch, log.loss_d,
                log.loss_g);
  save_checkpoint(o.out, Checkpoint<float>{"cfam", "", cfam_config_to(cfg),
                                           std::move(result.params)});
  std::printf("saved cfam checkpoint to %s\n", o.out.c_str());
}

void run_train_sfam(const TrainOpts& o) {
  SfamConfig cfg;
  if (!o.config.empty()) cfg = sfam_config_from(KeyValues::load(o.config));
  cfg.validate();
  if (o.window_stride < 1)
    throw std::invalid_argument("train-sfam: window stride must be >= 1");
  std::vector<TrainingWindow> windows;
  for (const auto& dir : discover_episodes(o.data)) {
    Episode ep = load_episode(dir);
    fit_episode(ep, cfg.height, cfg.width);
    const auto wins = make_windows(ep);
    for (std::size_t i = 0; i < wins.size();
         i += std::size_t(o.window_stride))
      windows.push_back(wins[i]);
  }
  std::printf("training sfam on %zu windows\n", windows.size());
  auto result = train_sfam<float>(windows, cfg, o.seed);
  for (const auto& log : result.stage1)
    std::printf("stage1 epoch %d loss %.6f\n", log.epoch, log.loss);
  for (const auto& log : result.stage2)
    std::printf("stage2 epoch %d loss_critic %.6f loss_gen %.6f\n", log.epoch,
                log.loss_critic, log.loss_gen);
  const std::string stage = cfg.stage2_epochs > 0 ? "stage2" : "stage1";
  save_checkpoint(o.out, Checkpoint<float>{"sfam", stage, sfam_config_to(cfg),
                                           std::move(result.params)});
  std::printf("saved sfam %s checkpoint to %s\n", stage.c_str(),
              o.out.c_str());
}

// ---- calibrate / monitor / eval / plot --------------------------------------

struct CalibrateOpts {
  std::string data;
  std::string cfam, sfam;
  std::string out;
  double percentile = 99.0;
  bool resize = false;
};

void run_calibrate(const CalibrateOpts& o) {
  MonitorModels models = load_monitor_models(o.cfam, o.sfam);
  MonitorConfig mc;
  mc.resize = o.resize;
  std::vector<MonitorReport> reports;
  for (const auto& dir : discover_episodes(o.data))
    reports.push_back(run_monitor(load_episode(dir), models, mc));
  const Thresholds th = calibrate_threshold(reports, o.percentile);
  KeyValues kv;
  kv.set("tau_cfam", th.tau_cfam);
  kv.set("tau_sfam", th.tau_sfam);
  kv.set("percentile", o.percentile);
  if (!o.out.empty()) kv.save(o.out);
  std::fputs(kv.canonical().c_str(), stdout);
}

struct MonitorOpts {
  std::string episode;
  std::string nominal, executed;
  std::string cfam, sfam;
  std::string thresholds;
  std::string out;
  double tau_cfam = 0.0;
  double tau_sfam = 0.0;
  int k = 3;
  int n = 5;
  bool resize = false;
};

void run_monitor_cmd(const MonitorOpts& o) {
  const bool single = !o.episode.empty();
  const bool paired = !o.nominal.empty() || !o.executed.empty();
  if (single == paired || (paired && (o.nominal.empty() || o.executed.empty())))
    throw std::invalid_argument(
        "monitor: pass either --episode or both --nominal and --executed");
  MonitorModels models = load_monitor_models(o.cfam, o.sfam);
  MonitorConfig mc;
  mc.tau_cfam = o.tau_cfam;
  mc.tau_sfam = o.tau_sfam;
  if (!o.thresholds.empty()) {
    const KeyValues kv = KeyValues::load(o.thresholds);
    mc.tau_cfam = kv.get_double("tau_cfam");
    mc.tau_sfam = kv.get_double("tau_sfam");
  }
  mc.window_k = o.k;
  mc.window_n = o.n;
  mc.resize = o.resize;
  const MonitorReport report =
      single ? run_monitor(load_episode(o.episode), models, mc)
             : run_monitor(load_episode(o.nominal), load_episode(o.executed),
                           models, mc);
  save_report(o.out, report);
  int cflags = 0, sflags = 0, ctrig = 0, strig = 0;
  for (const auto& f : report.frames) {
    cflags += f.cfam_flag;
    sflags += f.sfam_flag;
    ctrig += f.cfam_trigger;
    strig += f.sfam_trigger;
  }
  std::printf(
      "monitored %zu frames: cfam %d flags / %d triggers, sfam %d flags / %d "
      "triggers\n",
      report.frames.size(), cflags, ctrig, sflags, strig);
  std::printf("wrote report to %s\n", o.out.c_str());
}

struct EvalOpts {
  std::string report;
  std::string episode;
  std::string out;
};

void run_eval(const EvalOpts& o) {
  const Metrics m = evaluate(load_report(o.report), load_episode(o.episode));
  const KeyValues kv = metrics_to_keyvalues(m);
  if (!o.out.empty()) kv.save(o.out);
  std::fputs(kv.canonical().c_str(), stdout);
}

struct PlotOpts {
  std::string report;
  std::string out;
};

void run_plot(const PlotOpts& o) {
  write_report_plots(o.out, load_report(o.report));
  std::printf("wrote %scfam.png and %ssfam.png\n", o.out.c_str(),
              o.out.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"runtime anomaly monitoring for learning-based vehicle control"};
  app.require_subcommand(1);

  DatagenOpts dg;
  auto* datagen = app.add_subcommand(
      "datagen", "simulate corridor-world episodes, optionally with anomalies");
  datagen->add_option("--out", dg.out, "output dataset directory")->required();
  datagen->add_option("--world", dg.world, "world config file (key = value)");
  datagen->add_option("--count", dg.count, "nominal episode count");
  datagen->add_option("--length", dg.length, "frames per episode");
  datagen->add_option("--seed", dg.seed, "base seed");
  datagen->add_option("--late-right", dg.late_right,
                      "late-right anomaly episode pairs");
  datagen->add_option("--early-left", dg.early_left,
                      "early-left anomaly episode pairs");
  datagen->add_option("--anomaly-duration", dg.duration,
                      "override window length in frames");
  datagen->callback([&] { run_datagen(dg); });

  TrainOpts tc;
  auto* train_c = app.add_subcommand("train-cfam",
                                     "train the command-frame monitor");
  train_c->add_option("--data", tc.data, "dataset directory")->required();
  train_c->add_option("--config", tc.config, "cfam config file");
  train_c->add_option("--out", tc.out, "checkpoint output path")->required();
  train_c->add_option("--seed", tc.seed, "training seed");
  train_c->callback([&] { run_train_cfam(tc); });

  TrainOpts ts;
  auto* train_s = app.add_subcommand("train-sfam",
                                     "train the state-frame monitor");
  train_s->add_option("--data", ts.data, "dataset directory")->required();
  train_s->add_option("--config", ts.config, "sfam config file");
  train_s->add_option("--out", ts.out, "checkpoint output path")->required();
  train_s->add_option("--seed", ts.seed, "training seed");
  train_s->add_option("--window-stride", ts.window_stride,
                      "keep every k-th training window");
  train_s->callback([&] { run_train_sfam(ts); });

  CalibrateOpts cal;
  auto* calibrate = app.add_subcommand(
      "calibrate", "calibrate thresholds on nominal episodes");
  calibrate->add_option("--data", cal.data, "nominal dataset directory")
      ->required();
  calibrate->add_option("--cfam", cal.cfam, "cfam checkpoint")->required();
  calibrate->add_option("--sfam", cal.sfam, "sfam checkpoint")->required();
  calibrate->add_option("--percentile", cal.percentile,
                        "nearest-rank percentile in (0, 100]");
  calibrate->add_option("--out", cal.out, "thresholds output file");
  calibrate->add_flag("--resize", cal.resize,
                      "resize frames to each model's input size");
  calibrate->callback([&] { run_calibrate(cal); });

  MonitorOpts mon;
  auto* monitor = app.add_subcommand("monitor",
                                     "score an episode with both monitors");
  monitor->add_option("--episode", mon.episode, "episode directory");
  monitor->add_option("--nominal", mon.nominal,
                      "nominal episode of a linked pair");
  monitor->add_option("--executed", mon.executed,
                      "executed episode of a linked pair");
  monitor->add_option("--cfam", mon.cfam, "cfam checkpoint")->required();
  monitor->add_option("--sfam", mon.sfam, "sfam checkpoint")->required();
  monitor->add_option("--thresholds", mon.thresholds,
                      "thresholds file from calibrate");
  monitor->add_option("--tau-cfam", mon.tau_cfam, "cfam threshold");
  monitor->add_option("--tau-sfam", mon.tau_sfam, "sfam threshold");
  monitor->add_option("--k", mon.k, "flags required within the window");
  monitor->add_option("--n", mon.n, "trigger window length");
  monitor->add_flag("--resize", mon.resize,
                    "resize frames to each model's input size");
  monitor->add_option("--out", mon.out, "report CSV output path")->required();
  monitor->callback([&] { run_monitor_cmd(mon); });

  EvalOpts ev;
  auto* eval = app.add_subcommand("eval",
                                  "evaluate a report against labels");
  eval->add_option("--report", ev.report, "report CSV")->required();
  eval->add_option("--episode", ev.episode, "labeled episode directory")
      ->required();
  eval->add_option("--out", ev.out, "metrics output file");
  eval->callback([&] { run_eval(ev); });

  PlotOpts pl;
  auto* plot = app.add_subcommand("plot", "render report PNGs");
  plot->add_option("--report", pl.report, "report CSV")->required();
  plot->add_option("--out", pl.out, "output path prefix")->required();
  plot->callback([&] { run_plot(pl); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
