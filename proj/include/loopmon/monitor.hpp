// End-to-end runtime monitoring. Scores every frame of an episode with both
// anomaly monitors, turns deviations into flags with per-monitor thresholds,
// smooths flags into triggers with a k-of-n sliding window, calibrates
// thresholds as nearest-rank percentiles of nominal deviations, and
// evaluates reports against labeled episodes.
//
// Report row conventions: row t carries the CFAM deviation of the command
// issued at time t given frame t (absent for the last row, which has no
// issued command), and the SFAM deviation of the transition into frame t,
// predicted from the four preceding frames (absent for the first four rows).
// Anomaly labels mark issue times, so both columns align with the labels up
// to the one-step lag of the SFAM target.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "loopmon/cfam.hpp"
#include "loopmon/checkpoint.hpp"
#include "loopmon/dataio.hpp"
#include "loopmon/errors.hpp"
#include "loopmon/image.hpp"
#include "loopmon/metrics.hpp"
#include "loopmon/sfam.hpp"

namespace loopmon {

struct MonitorConfig {
  double tau_cfam = 0.0;
  double tau_sfam = 0.0;
  int window_k = 3;  // trigger when >= k of the last n flags are set
  int window_n = 5;
  bool resize = false;  // resize frames to each model's input size

  void validate() const {
    if (!(tau_cfam >= 0.0) || !(tau_sfam >= 0.0))
      throw std::invalid_argument("monitor config: thresholds must be >= 0");
    if (window_k < 1 || window_n < window_k)
      throw std::invalid_argument("monitor config: need 1 <= k <= n");
  }
};

// Loaded model pair plus the action grid both monitors sweep over.
struct MonitorModels {
  CfamConfig cfam_cfg;
  ParamSet<float> cfam_params;
  SfamConfig sfam_cfg;
  ParamSet<float> sfam_params;
  ActionGrid grid;
};

inline MonitorModels load_monitor_models(const std::string& cfam_path,
                                         const std::string& sfam_path) {
  MonitorModels m;
  auto cck = load_checkpoint<float>(cfam_path);
  if (cck.module != "cfam")
    throw FormatError("monitor: " + cfam_path + " is not a cfam checkpoint");
  m.cfam_cfg = cfam_config_from(cck.config);
  m.cfam_cfg.validate();
  m.cfam_params = std::move(cck.params);
  auto sck = load_checkpoint<float>(sfam_path);
  if (sck.module != "sfam")
    throw FormatError("monitor: " + sfam_path + " is not a sfam checkpoint");
  m.sfam_cfg = sfam_config_from(sck.config);
  m.sfam_cfg.validate();
  m.sfam_params = std::move(sck.params);
  m.grid = m.sfam_cfg.grid();
  return m;
}

struct FrameScore {
  int t = 0;
  double cfam_dev = std::numeric_limits<double>::quiet_NaN();
  double sfam_dev = std::numeric_limits<double>::quiet_NaN();
  bool cfam_scored = false;
  bool sfam_scored = false;
  bool cfam_flag = false;
  bool sfam_flag = false;
  bool cfam_trigger = false;
  bool sfam_trigger = false;
};

struct MonitorReport {
  std::vector<FrameScore> frames;
};

// out[t] is set when at least k of flags[max(0, t-n+1) .. t] are set.
inline std::vector<std::uint8_t> trigger_kn(
    const std::vector<std::uint8_t>& flags, int k, int n) {
  if (k < 1 || n < k)
    throw std::invalid_argument("trigger_kn: need 1 <= k <= n");
  std::vector<std::uint8_t> out(flags.size(), 0);
  int count = 0;
  for (std::size_t t = 0; t < flags.size(); ++t) {
    count += flags[t] ? 1 : 0;
    if (t >= std::size_t(n)) count -= flags[t - std::size_t(n)] ? 1 : 0;
    out[t] = count >= k ? 1 : 0;
  }
  return out;
}

// Recomputes flags and triggers from the stored deviations; unscored frames
// never flag.
inline void apply_thresholds(MonitorReport& report, const MonitorConfig& mc) {
  mc.validate();
  const std::size_t n = report.frames.size();
  std::vector<std::uint8_t> cflags(n), sflags(n);
  for (std::size_t t = 0; t < n; ++t) {
    auto& f = report.frames[t];
    f.cfam_flag = f.cfam_scored && f.cfam_dev > mc.tau_cfam;
    f.sfam_flag = f.sfam_scored && f.sfam_dev > mc.tau_sfam;
    cflags[t] = f.cfam_flag ? 1 : 0;
    sflags[t] = f.sfam_flag ? 1 : 0;
  }
  const auto ctrig = trigger_kn(cflags, mc.window_k, mc.window_n);
  const auto strig = trigger_kn(sflags, mc.window_k, mc.window_n);
  for (std::size_t t = 0; t < n; ++t) {
    report.frames[t].cfam_trigger = ctrig[t] != 0;
    report.frames[t].sfam_trigger = strig[t] != 0;
  }
}

namespace monitordetail {

inline Frame fit_frame(const Frame& f, int h, int w, bool resize,
                       const char* who) {
  if (f.ndim() != 3 || f.dim(0) != 3)
    throw std::invalid_argument(std::string(who) + ": frames must be (3,H,W)");
  if (f.dim(1) == h && f.dim(2) == w) return f;
  if (!resize)
    throw std::invalid_argument(std::string(who) +
                                ": frame size does not match the model and "
                                "resizing is not enabled");
  return resize_bilinear(f, h, w);
}

}  // namespace monitordetail

// Scores a linked episode pair: CFAM sees the first episode's frames with
// the second episode's commands, SFAM sees the second episode's frames with
// the first episode's commands. Passing the same episode twice scores a
// single stream.
inline MonitorReport run_monitor(const Episode& frames_for_cfam,
                                 const Episode& frames_for_sfam,
                                 MonitorModels& models,
                                 const MonitorConfig& mc) {
  mc.validate();
  models.cfam_cfg.validate();
  models.sfam_cfg.validate();
  const std::size_t len = frames_for_cfam.records.size();
  if (len == 0 || frames_for_sfam.records.size() != len)
    throw std::invalid_argument(
        "run_monitor: episodes must be non-empty and the same length");
  MonitorReport report;
  report.frames.resize(len);
  for (std::size_t t = 0; t < len; ++t)
    report.frames[t].t = int(t);
  const auto& crec = frames_for_cfam.records;
  const auto& srec = frames_for_sfam.records;
  for (std::size_t t = 0; t + 1 < len; ++t) {
    const Frame x =
        monitordetail::fit_frame(crec[t].frame, models.cfam_cfg.image_size,
                                 models.cfam_cfg.image_size, mc.resize,
                                 "run_monitor");
    const auto profile =
        energy_sweep(x, models.grid, models.cfam_params, models.cfam_cfg);
    report.frames[t].cfam_dev =
        cfam_deviation(double(srec[t + 1].u), profile);
    report.frames[t].cfam_scored = true;
  }
  for (std::size_t j = 4; j < len; ++j) {
    const std::size_t a = j - 1;  // prediction window anchor
    std::vector<Frame> fr;
    fr.reserve(4);
    for (std::size_t k = 0; k < 4; ++k)
      fr.push_back(monitordetail::fit_frame(
          srec[a - 3 + k].frame, models.sfam_cfg.height,
          models.sfam_cfg.width, mc.resize, "run_monitor"));
    const std::vector<double> cmds = {double(crec[a - 2].u),
                                      double(crec[a - 1].u),
                                      double(crec[a].u)};
    const auto preds = conditioned_predictions(fr, cmds, models.grid,
                                               models.sfam_params,
                                               models.sfam_cfg);
    const Frame target = monitordetail::fit_frame(
        srec[j].frame, models.sfam_cfg.height, models.sfam_cfg.width,
        mc.resize, "run_monitor");
    const auto profile = dissimilarity_profile(preds, target, models.grid,
                                               models.sfam_cfg.ssim_kernel);
    report.frames[j].sfam_dev = sfam_deviation(profile, double(crec[j].u));
    report.frames[j].sfam_scored = true;
  }
  apply_thresholds(report, mc);
  return report;
}

inline MonitorReport run_monitor(const Episode& episode, MonitorModels& models,
                                 const MonitorConfig& mc) {
  return run_monitor(episode, episode, models, mc);
}

// ---- report persistence ----------------------------------------------------

inline constexpr const char* kReportCsvHeader =
    "t,cfam_dev,sfam_dev,cfam_flag,sfam_flag,cfam_trigger,sfam_trigger";

inline std::string report_csv(const MonitorReport& report) {
  std::string out = kReportCsvHeader;
  out += "\n";
  for (const auto& f : report.frames) {
    out += std::to_string(f.t);
    out += ",";
    out += f.cfam_scored ? detail::format_g17(f.cfam_dev) : "nan";
    out += ",";
    out += f.sfam_scored ? detail::format_g17(f.sfam_dev) : "nan";
    for (bool b : {f.cfam_flag, f.sfam_flag, f.cfam_trigger, f.sfam_trigger}) {
      out += ",";
      out += b ? "1" : "0";
    }
    out += "\n";
  }
  return out;
}

inline void save_report(const std::string& path, const MonitorReport& report) {
  std::ofstream out(path);
  if (!out) throw FormatError("report: cannot write " + path);
  out << report_csv(report);
  if (!out) throw FormatError("report: write failed for " + path);
}

inline MonitorReport parse_report_csv(const std::string& text,
                                      const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kReportCsvHeader)
    throw FormatError(origin + ": bad report header");
  MonitorReport report;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      fields.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    const std::string where = origin + ":" + std::to_string(lineno);
    if (fields.size() != 7)
      throw FormatError(where + ": expected 7 fields");
    FrameScore f;
    try {
      std::size_t pos = 0;
      f.t = std::stoi(fields[0], &pos);
      if (pos != fields[0].size()) throw std::invalid_argument("t");
    } catch (const std::exception&) {
      throw FormatError(where + ": bad frame index " + fields[0]);
    }
    if (f.t != int(report.frames.size()))
      throw FormatError(where + ": frame indices must count up from 0");
    auto dev = [&](const std::string& s, double& out, bool& scored) {
      if (s == "nan") {
        scored = false;
        return;
      }
      try {
        std::size_t pos = 0;
        out = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("dev");
      } catch (const std::exception&) {
        throw FormatError(where + ": bad deviation " + s);
      }
      scored = true;
    };
    dev(fields[1], f.cfam_dev, f.cfam_scored);
    dev(fields[2], f.sfam_dev, f.sfam_scored);
    auto bit = [&](const std::string& s) {
      if (s == "0") return false;
      if (s == "1") return true;
      throw FormatError(where + ": flags must be 0 or 1, got " + s);
    };
    f.cfam_flag = bit(fields[3]);
    f.sfam_flag = bit(fields[4]);
    f.cfam_trigger = bit(fields[5]);
    f.sfam_trigger = bit(fields[6]);
    report.frames.push_back(f);
  }
  return report;
}

inline MonitorReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("report: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_report_csv(ss.str(), path);
}

// ---- threshold calibration -------------------------------------------------

// Smallest value with at least p percent of the pool at or below it.
inline double percentile_nearest_rank(std::vector<double> pool, double p) {
  if (!(p > 0.0 && p <= 100.0))
    throw std::invalid_argument(
        "percentile_nearest_rank: percentile must be in (0, 100]");
  if (pool.empty())
    throw std::invalid_argument("percentile_nearest_rank: empty pool");
  std::sort(pool.begin(), pool.end());
  auto rank = std::size_t(std::ceil(p / 100.0 * double(pool.size())));
  rank = std::max<std::size_t>(rank, 1);
  rank = std::min(rank, pool.size());
  return pool[rank - 1];
}

struct Thresholds {
  double tau_cfam = 0.0;
  double tau_sfam = 0.0;
};

// Per-monitor nearest-rank percentile over the deviations pooled from all
// reports, which should come from nominal episodes.
inline Thresholds calibrate_threshold(const std::vector<MonitorReport>& reports,
                                      double percentile) {
  if (!(percentile > 0.0 && percentile <= 100.0))
    throw std::invalid_argument(
        "calibrate_threshold: percentile must be in (0, 100]");
  std::vector<double> cpool, spool;
  for (const auto& r : reports)
    for (const auto& f : r.frames) {
      if (f.cfam_scored) cpool.push_back(f.cfam_dev);
      if (f.sfam_scored) spool.push_back(f.sfam_dev);
    }
  if (cpool.empty() || spool.empty())
    throw std::invalid_argument("calibrate_threshold: empty deviation pool");
  if (cpool.size() + spool.size() < 100)
    throw std::invalid_argument(
        "calibrate_threshold: need at least 100 scored frames");
  return {percentile_nearest_rank(std::move(cpool), percentile),
          percentile_nearest_rank(std::move(spool), percentile)};
}

// ---- evaluation against labeled episodes -----------------------------------

struct MonitorStats {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;  // frame-level flags
  double precision = 1.0, recall = 1.0;
  int spans = 0;           // maximal labeled anomaly runs
  int spans_detected = 0;  // spans with a trigger before the next span
  std::vector<int> latencies;  // first-trigger delay per detected span
  double latency_mean = 0.0;
  double false_trigger_rate = 0.0;  // triggered fraction of scored nominal
};

struct Metrics {
  MonitorStats cfam;
  MonitorStats sfam;
};

inline Metrics evaluate(const MonitorReport& report, const Episode& episode) {
  const std::size_t len = report.frames.size();
  if (len == 0 || episode.records.size() != len)
    throw std::invalid_argument(
        "evaluate: report and labeled episode must be non-empty and the same "
        "length");
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // [begin, end)
  for (std::size_t t = 0; t < len; ++t) {
    if (!episode.records[t].anomaly) continue;
    if (spans.empty() || spans.back().second != t)
      spans.emplace_back(t, t + 1);
    else
      spans.back().second = t + 1;
  }
  auto stats = [&](auto scored, auto flag, auto trigger) {
    MonitorStats s;
    std::int64_t nominal_scored = 0, nominal_triggered = 0;
    for (std::size_t t = 0; t < len; ++t) {
      if (!scored(t)) continue;
      const bool label = episode.records[t].anomaly;
      if (flag(t))
        ++(label ? s.tp : s.fp);
      else
        ++(label ? s.fn : s.tn);
      if (!label) {
        ++nominal_scored;
        nominal_triggered += trigger(t) ? 1 : 0;
      }
    }
    s.precision = s.tp + s.fp > 0 ? double(s.tp) / double(s.tp + s.fp) : 1.0;
    s.recall = s.tp + s.fn > 0 ? double(s.tp) / double(s.tp + s.fn) : 1.0;
    s.spans = int(spans.size());
    for (std::size_t i = 0; i < spans.size(); ++i) {
      const std::size_t begin = spans[i].first;
      const std::size_t stop = i + 1 < spans.size() ? spans[i + 1].first : len;
      for (std::size_t t = begin; t < stop; ++t)
        if (trigger(t)) {
          ++s.spans_detected;
          s.latencies.push_back(int(t - begin));
          break;
        }
    }
    for (int l : s.latencies) s.latency_mean += l;
    if (!s.latencies.empty()) s.latency_mean /= double(s.latencies.size());
    if (nominal_scored > 0)
      s.false_trigger_rate =
          double(nominal_triggered) / double(nominal_scored);
    return s;
  };
  const auto& fr = report.frames;
  Metrics m;
  m.cfam = stats([&](std::size_t t) { return fr[t].cfam_scored; },
                 [&](std::size_t t) { return fr[t].cfam_flag; },
                 [&](std::size_t t) { return fr[t].cfam_trigger; });
  m.sfam = stats([&](std::size_t t) { return fr[t].sfam_scored; },
                 [&](std::size_t t) { return fr[t].sfam_flag; },
                 [&](std::size_t t) { return fr[t].sfam_trigger; });
  return m;
}

inline KeyValues metrics_to_keyvalues(const Metrics& m) {
  KeyValues kv;
  auto put = [&](const std::string& prefix, const MonitorStats& s) {
    kv.set(prefix + ".tp", long(s.tp));
    kv.set(prefix + ".fp", long(s.fp));
    kv.set(prefix + ".tn", long(s.tn));
    kv.set(prefix + ".fn", long(s.fn));
    kv.set(prefix + ".precision", s.precision);
    kv.set(prefix + ".recall", s.recall);
    kv.set(prefix + ".spans", s.spans);
    kv.set(prefix + ".spans_detected", s.spans_detected);
    kv.set(prefix + ".latency_mean", s.latency_mean);
    kv.set(prefix + ".false_trigger_rate", s.false_trigger_rate);
    std::string joined;
    for (int l : s.latencies) {
      if (!joined.empty()) joined += ",";
      joined += std::to_string(l);
    }
    kv.set(prefix + ".latencies", joined);
  };
  put("cfam", m.cfam);
  put("sfam", m.sfam);
  return kv;
}

}  // namespace loopmon
