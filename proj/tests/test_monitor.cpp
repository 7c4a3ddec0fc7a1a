// Monitor pipeline tests: k-of-n triggering against a brute-force oracle,
// nearest-rank percentile calibration, threshold application and its
// monotonicity, report CSV round-trips, end-to-end scoring row coverage on
// tiny models, and evaluation of reports against labeled episodes.
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "doctest.h"
#include "loopmon/cfam.hpp"
#include "loopmon/dataio.hpp"
#include "loopmon/errors.hpp"
#include "loopmon/monitor.hpp"
#include "loopmon/rng.hpp"
#include "loopmon/sfam.hpp"

namespace {

using loopmon::Episode;
using loopmon::FormatError;
using loopmon::Frame;
using loopmon::MonitorConfig;
using loopmon::MonitorModels;
using loopmon::MonitorReport;
using loopmon::Rng;
using loopmon::TrainingWindow;

std::vector<std::uint8_t> brute_force_kn(const std::vector<std::uint8_t>& flags,
                                         int k, int n) {
  std::vector<std::uint8_t> out(flags.size(), 0);
  for (std::size_t t = 0; t < flags.size(); ++t) {
    int count = 0;
    for (std::size_t i = t >= std::size_t(n) ? t - std::size_t(n) + 1 : 0;
         i <= t; ++i)
      count += flags[i] ? 1 : 0;
    out[t] = count >= k ? 1 : 0;
  }
  return out;
}

Frame rand_frame(Rng& rng, int h, int w) {
  Frame f({3, h, w});
  for (auto& v : f.data) v = float(rng.uniform(0.0, 1.0));
  return f;
}

Episode rand_episode(Rng& rng, int length, int h, int w) {
  Episode ep;
  ep.meta.height = h;
  ep.meta.width = w;
  for (int t = 0; t < length; ++t) {
    loopmon::EpisodeRecord r;
    r.t = t;
    r.timestamp = 0.1 * t;
    r.frame = rand_frame(rng, h, w);
    r.u = rng.uniform(-0.5, 0.5);
    ep.records.push_back(std::move(r));
  }
  return ep;
}

// Zero-epoch training runs initialize weights without optimizing, which is
// all the pipeline tests need.
MonitorModels tiny_models(int h, int w) {
  loopmon::CfamConfig ccfg;
  ccfg.image_size = h;
  ccfg.conv_channels = {4, 8};
  ccfg.noise_dim = 6;
  ccfg.hidden_dim = 12;
  ccfg.batch_size = 2;
  ccfg.epochs = 0;
  Rng rng(11);
  std::vector<std::pair<Frame, float>> pairs;
  pairs.emplace_back(rand_frame(rng, h, h), 0.1f);
  pairs.emplace_back(rand_frame(rng, h, h), -0.2f);

  loopmon::SfamConfig scfg;
  scfg.height = h;
  scfg.width = w;
  scfg.channels = {3, 4};
  scfg.critic_channels = {2, 2, 2, 2, 2, 2, 2, 2, 2};
  scfg.grid_lo = -0.6;
  scfg.grid_hi = 0.6;
  scfg.grid_n = 5;
  scfg.batch_size = 2;
  scfg.stage1_epochs = 0;
  scfg.stage2_epochs = 0;
  TrainingWindow win;
  for (int k = 0; k < 4; ++k) {
    win.frames[std::size_t(k)] = rand_frame(rng, h, w);
    win.commands[std::size_t(k)] = float(0.05 * k);
  }
  win.target = rand_frame(rng, h, w);

  MonitorModels m;
  m.cfam_cfg = ccfg;
  m.cfam_params = loopmon::train_cfam(pairs, ccfg, 5).params;
  m.sfam_cfg = scfg;
  const std::vector<TrainingWindow> wins = {win};
  m.sfam_params = loopmon::train_sfam<float>(wins, scfg, 5).params;
  m.grid = scfg.grid();
  return m;
}

// Report with formulaic deviations: cfam scored except the last row, sfam
// scored from row 4 on.
MonitorReport formula_report(int length, double scale) {
  MonitorReport rep;
  rep.frames.resize(std::size_t(length));
  for (int t = 0; t < length; ++t) {
    auto& f = rep.frames[std::size_t(t)];
    f.t = t;
    if (t + 1 < length) {
      f.cfam_scored = true;
      f.cfam_dev = scale * ((t * 7) % 11);
    }
    if (t >= 4) {
      f.sfam_scored = true;
      f.sfam_dev = scale * ((t * 5) % 13);
    }
  }
  return rep;
}

Episode labeled_episode(int length,
                        const std::vector<std::pair<int, int>>& spans) {
  Episode ep;
  ep.records.resize(std::size_t(length));
  for (int t = 0; t < length; ++t) ep.records[std::size_t(t)].t = t;
  for (auto [b, e] : spans)
    for (int t = b; t < e; ++t) ep.records[std::size_t(t)].anomaly = true;
  return ep;
}

// All rows scored, flags and triggers driven by caller-provided row sets.
MonitorReport flag_report(int length, const std::vector<int>& flag_rows,
                          const std::vector<int>& trigger_rows) {
  MonitorReport rep;
  rep.frames.resize(std::size_t(length));
  for (int t = 0; t < length; ++t) {
    auto& f = rep.frames[std::size_t(t)];
    f.t = t;
    f.cfam_scored = f.sfam_scored = true;
    f.cfam_dev = f.sfam_dev = 0.0;
  }
  for (int t : flag_rows) {
    rep.frames[std::size_t(t)].cfam_flag = true;
    rep.frames[std::size_t(t)].sfam_flag = true;
  }
  for (int t : trigger_rows) {
    rep.frames[std::size_t(t)].cfam_trigger = true;
    rep.frames[std::size_t(t)].sfam_trigger = true;
  }
  return rep;
}

}  // namespace

TEST_CASE("monitor config validates thresholds and window") {
  MonitorConfig mc;
  CHECK_NOTHROW(mc.validate());
  CHECK(mc.window_k == 3);
  CHECK(mc.window_n == 5);

  auto reject = [](auto mutate) {
    MonitorConfig bad;
    mutate(bad);
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  };
  reject([](MonitorConfig& c) { c.tau_cfam = -1e-9; });
  reject([](MonitorConfig& c) { c.tau_sfam = -0.5; });
  reject([](MonitorConfig& c) {
    c.tau_cfam = std::numeric_limits<double>::quiet_NaN();
  });
  reject([](MonitorConfig& c) { c.window_k = 0; });
  reject([](MonitorConfig& c) { c.window_k = 6; });
  reject([](MonitorConfig& c) { c.window_n = 0; });
}

TEST_CASE("k-of-n triggering matches a brute-force oracle") {
  Rng rng(404);
  for (int trial = 0; trial < 1000; ++trial) {
    const int length = 1 + int(rng.uniform(0.0, 60.0));
    const int n = 1 + int(rng.uniform(0.0, 8.0));
    const int k = 1 + int(rng.uniform(0.0, double(n)));
    std::vector<std::uint8_t> flags(static_cast<std::size_t>(length));
    for (auto& f : flags) f = rng.uniform(0.0, 1.0) < 0.35 ? 1 : 0;
    const auto fast = loopmon::trigger_kn(flags, std::min(k, n), n);
    const auto slow = brute_force_kn(flags, std::min(k, n), n);
    REQUIRE(fast == slow);
  }

  CHECK(loopmon::trigger_kn({}, 3, 5).empty());
  const std::vector<std::uint8_t> quiet(40, 0);
  const auto none = loopmon::trigger_kn(quiet, 1, 1);
  CHECK(std::count(none.begin(), none.end(), 1) == 0);
  const std::vector<std::uint8_t> some = {1, 0, 1, 1, 0};
  CHECK(loopmon::trigger_kn(some, 1, 1) == some);
  CHECK_THROWS_AS(loopmon::trigger_kn(some, 0, 5), std::invalid_argument);
  CHECK_THROWS_AS(loopmon::trigger_kn(some, 3, 2), std::invalid_argument);
}

TEST_CASE("nearest-rank percentile behaves on the reference pool") {
  std::vector<double> pool;
  for (int i = 100; i >= 1; --i) pool.push_back(double(i));
  CHECK(loopmon::percentile_nearest_rank(pool, 99.0) == 99.0);
  CHECK(loopmon::percentile_nearest_rank(pool, 100.0) == 100.0);
  CHECK(loopmon::percentile_nearest_rank(pool, 50.0) == 50.0);
  CHECK(loopmon::percentile_nearest_rank(pool, 1.0) == 1.0);
  CHECK(loopmon::percentile_nearest_rank(pool, 0.3) == 1.0);
  CHECK(loopmon::percentile_nearest_rank({7.0}, 42.0) == 7.0);
  CHECK(loopmon::percentile_nearest_rank({3.0, 3.0, 3.0, 9.0}, 75.0) == 3.0);

  CHECK_THROWS_AS(loopmon::percentile_nearest_rank({1.0}, 0.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(loopmon::percentile_nearest_rank({1.0}, -5.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(loopmon::percentile_nearest_rank({1.0}, 100.5),
                  std::invalid_argument);
  CHECK_THROWS_AS(loopmon::percentile_nearest_rank(
                      {1.0}, std::numeric_limits<double>::quiet_NaN()),
                  std::invalid_argument);
  CHECK_THROWS_AS(loopmon::percentile_nearest_rank({}, 50.0),
                  std::invalid_argument);
}

TEST_CASE("calibrate_threshold pools scored deviations per monitor") {
  std::vector<MonitorReport> reports = {formula_report(80, 0.01),
                                        formula_report(60, 0.02)};
  std::vector<double> cpool, spool;
  for (const auto& r : reports)
    for (const auto& f : r.frames) {
      if (f.cfam_scored) cpool.push_back(f.cfam_dev);
      if (f.sfam_scored) spool.push_back(f.sfam_dev);
    }
  REQUIRE(cpool.size() + spool.size() >= 100);

  const auto th = loopmon::calibrate_threshold(reports, 95.0);
  CHECK(th.tau_cfam == loopmon::percentile_nearest_rank(cpool, 95.0));
  CHECK(th.tau_sfam == loopmon::percentile_nearest_rank(spool, 95.0));

  // Nearest-rank guarantee: at most (100 - p)% of the pool sits above tau.
  for (double p : {80.0, 95.0, 99.0, 100.0}) {
    const auto t = loopmon::calibrate_threshold(reports, p);
    const auto above = [&](const std::vector<double>& pool, double tau) {
      return std::count_if(pool.begin(), pool.end(),
                           [&](double v) { return v > tau; });
    };
    CHECK(double(above(cpool, t.tau_cfam)) <=
          (100.0 - p) / 100.0 * double(cpool.size()) + 1.0);
    CHECK(double(above(spool, t.tau_sfam)) <=
          (100.0 - p) / 100.0 * double(spool.size()) + 1.0);
  }

  CHECK_THROWS_AS(loopmon::calibrate_threshold(reports, 0.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(loopmon::calibrate_threshold(reports, 101.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(loopmon::calibrate_threshold({}, 99.0),
                  std::invalid_argument);
  // A five-frame episode scores frames but far fewer than one hundred.
  CHECK_THROWS_AS(loopmon::calibrate_threshold({formula_report(5, 1.0)}, 99.0),
                  std::invalid_argument);
  // No sfam rows at all leaves that pool empty.
  MonitorReport cfam_only = formula_report(200, 1.0);
  for (auto& f : cfam_only.frames) f.sfam_scored = false;
  CHECK_THROWS_AS(loopmon::calibrate_threshold({cfam_only}, 99.0),
                  std::invalid_argument);
}

TEST_CASE("apply_thresholds is monotone and ignores unscored rows") {
  MonitorReport rep = formula_report(40, 0.1);
  MonitorConfig mc;
  mc.window_k = 2;
  mc.window_n = 4;

  mc.tau_cfam = mc.tau_sfam = 1e9;
  loopmon::apply_thresholds(rep, mc);
  for (const auto& f : rep.frames) {
    CHECK_FALSE(f.cfam_flag);
    CHECK_FALSE(f.sfam_flag);
    CHECK_FALSE(f.cfam_trigger);
    CHECK_FALSE(f.sfam_trigger);
  }

  // All-zero deviations with tau = 0 stay quiet: flags need dev > tau.
  MonitorReport zeros = formula_report(40, 0.0);
  mc.tau_cfam = mc.tau_sfam = 0.0;
  loopmon::apply_thresholds(zeros, mc);
  for (const auto& f : zeros.frames) {
    CHECK_FALSE(f.cfam_flag);
    CHECK_FALSE(f.cfam_trigger);
    CHECK_FALSE(f.sfam_flag);
    CHECK_FALSE(f.sfam_trigger);
  }

  // Lowering a threshold never clears a flag or a trigger.
  std::vector<double> taus = {0.9, 0.6, 0.3, 0.0};
  MonitorReport prev = rep;
  bool first = true;
  for (double tau : taus) {
    MonitorReport cur = rep;
    MonitorConfig cfg = mc;
    cfg.tau_cfam = cfg.tau_sfam = tau;
    loopmon::apply_thresholds(cur, cfg);
    if (!first) {
      for (std::size_t t = 0; t < cur.frames.size(); ++t) {
        if (prev.frames[t].cfam_flag) CHECK(cur.frames[t].cfam_flag);
        if (prev.frames[t].sfam_flag) CHECK(cur.frames[t].sfam_flag);
        if (prev.frames[t].cfam_trigger) CHECK(cur.frames[t].cfam_trigger);
        if (prev.frames[t].sfam_trigger) CHECK(cur.frames[t].sfam_trigger);
      }
    }
    prev = cur;
    first = false;
  }

  // Unscored rows never flag, even with a deviation recorded.
  MonitorReport odd = formula_report(10, 1.0);
  odd.frames[2].cfam_scored = false;
  odd.frames[2].cfam_dev = 100.0;
  MonitorConfig zero;
  loopmon::apply_thresholds(odd, zero);
  CHECK_FALSE(odd.frames[2].cfam_flag);

  MonitorConfig bad;
  bad.window_k = 0;
  CHECK_THROWS_AS(loopmon::apply_thresholds(odd, bad), std::invalid_argument);
}

TEST_CASE("report csv round-trips and rejects malformed input") {
  MonitorReport rep = formula_report(12, 0.125);
  MonitorConfig mc;
  mc.tau_cfam = 0.2;
  mc.tau_sfam = 0.3;
  loopmon::apply_thresholds(rep, mc);

  const std::string csv = loopmon::report_csv(rep);
  CHECK(csv.rfind("t,cfam_dev,sfam_dev,cfam_flag,sfam_flag,cfam_trigger,"
                  "sfam_trigger\n",
                  0) == 0);

  const std::string path = "report_roundtrip.csv";
  loopmon::save_report(path, rep);
  const MonitorReport back = loopmon::load_report(path);
  std::remove(path.c_str());
  REQUIRE(back.frames.size() == rep.frames.size());
  for (std::size_t t = 0; t < rep.frames.size(); ++t) {
    const auto& a = rep.frames[t];
    const auto& b = back.frames[t];
    CHECK(a.t == b.t);
    CHECK(a.cfam_scored == b.cfam_scored);
    CHECK(a.sfam_scored == b.sfam_scored);
    if (a.cfam_scored) CHECK(a.cfam_dev == b.cfam_dev);
    if (a.sfam_scored) CHECK(a.sfam_dev == b.sfam_dev);
    CHECK(a.cfam_flag == b.cfam_flag);
    CHECK(a.sfam_flag == b.sfam_flag);
    CHECK(a.cfam_trigger == b.cfam_trigger);
    CHECK(a.sfam_trigger == b.sfam_trigger);
  }
  CHECK(loopmon::report_csv(back) == csv);

  auto parse = [](const std::string& text) {
    return loopmon::parse_report_csv(text, "mem");
  };
  CHECK_THROWS_AS(parse("t,cfam_dev\n"), FormatError);
  const std::string head =
      std::string(loopmon::kReportCsvHeader) + "\n";
  CHECK_NOTHROW(parse(head));
  CHECK_THROWS_AS(parse(head + "0,1,1,0,0,0\n"), FormatError);
  CHECK_THROWS_AS(parse(head + "x,1,1,0,0,0,0\n"), FormatError);
  CHECK_THROWS_AS(parse(head + "0,oops,1,0,0,0,0\n"), FormatError);
  CHECK_THROWS_AS(parse(head + "0,1,1,2,0,0,0\n"), FormatError);
  CHECK_THROWS_AS(parse(head + "1,1,1,0,0,0,0\n"), FormatError);
  CHECK_THROWS_AS(parse(head + "0,1,1,0,0,0,0\n2,1,1,0,0,0,0\n"), FormatError);
  CHECK_NOTHROW(parse(head + "0,nan,nan,0,0,0,0\n"));
  CHECK_THROWS_AS(loopmon::load_report("no_such_report.csv"), FormatError);
}

TEST_CASE("run_monitor scores the expected rows on tiny models") {
  MonitorModels models = tiny_models(16, 16);
  Rng rng(77);
  const Episode ep = rand_episode(rng, 12, 16, 16);
  MonitorConfig mc;
  mc.tau_cfam = mc.tau_sfam = 0.05;

  const MonitorReport rep = loopmon::run_monitor(ep, models, mc);
  REQUIRE(rep.frames.size() == 12);
  for (int t = 0; t < 12; ++t) {
    const auto& f = rep.frames[std::size_t(t)];
    CHECK(f.t == t);
    CHECK(f.cfam_scored == (t < 11));
    CHECK(f.sfam_scored == (t >= 4));
    if (f.cfam_scored) {
      CHECK(std::isfinite(f.cfam_dev));
      CHECK(f.cfam_dev >= 0.0);
    }
    if (f.sfam_scored) {
      CHECK(std::isfinite(f.sfam_dev));
      CHECK(f.sfam_dev >= 0.0);
    }
  }

  SUBCASE("five-frame episode scores exactly one sfam row") {
    Episode five = ep;
    five.records.resize(5);
    const MonitorReport r5 = loopmon::run_monitor(five, models, mc);
    int scored = 0;
    for (const auto& f : r5.frames) scored += f.sfam_scored ? 1 : 0;
    CHECK(scored == 1);
    CHECK(r5.frames[4].sfam_scored);
  }

  SUBCASE("deterministic and equal to the self-paired overload") {
    const MonitorReport again = loopmon::run_monitor(ep, models, mc);
    CHECK(loopmon::report_csv(again) == loopmon::report_csv(rep));
    const MonitorReport paired = loopmon::run_monitor(ep, ep, models, mc);
    CHECK(loopmon::report_csv(paired) == loopmon::report_csv(rep));
  }

  SUBCASE("linked pair routes commands and frames to the right monitor") {
    Episode executed = ep;
    for (auto& r : executed.records) r.u += 0.31;
    const MonitorReport pair =
        loopmon::run_monitor(ep, executed, models, mc);
    // CFAM scores the executed commands, so its deviations move.
    bool cfam_moved = false;
    for (std::size_t t = 0; t + 1 < rep.frames.size(); ++t)
      cfam_moved = cfam_moved ||
                   pair.frames[t].cfam_dev != rep.frames[t].cfam_dev;
    CHECK(cfam_moved);
    // SFAM conditions on the nominal commands and the (unchanged) executed
    // frames, so its deviations stay put.
    for (std::size_t t = 4; t < rep.frames.size(); ++t)
      CHECK(pair.frames[t].sfam_dev == rep.frames[t].sfam_dev);
  }

  SUBCASE("frame size mismatches require the resize flag") {
    Rng rng2(78);
    const Episode big = rand_episode(rng2, 8, 20, 24);
    CHECK_THROWS_AS(loopmon::run_monitor(big, models, mc),
                    std::invalid_argument);
    MonitorConfig with_resize = mc;
    with_resize.resize = true;
    const MonitorReport r = loopmon::run_monitor(big, models, with_resize);
    CHECK(r.frames[0].cfam_scored);
    CHECK(r.frames[7].sfam_scored);
  }

  SUBCASE("input validation") {
    Episode empty;
    CHECK_THROWS_AS(loopmon::run_monitor(empty, models, mc),
                    std::invalid_argument);
    Episode shorter = ep;
    shorter.records.resize(6);
    CHECK_THROWS_AS(loopmon::run_monitor(ep, shorter, models, mc),
                    std::invalid_argument);
    Episode grey = ep;
    grey.records[3].frame = Frame({1, 16, 16});
    CHECK_THROWS_AS(loopmon::run_monitor(grey, models, mc),
                    std::invalid_argument);
    MonitorConfig bad = mc;
    bad.tau_sfam = -1.0;
    CHECK_THROWS_AS(loopmon::run_monitor(ep, models, bad),
                    std::invalid_argument);
  }
}

TEST_CASE("evaluate computes confusion, spans, latency, and trigger rates") {
  const int length = 30;
  const Episode labeled =
      labeled_episode(length, {{10, 15}, {20, 24}});

  SUBCASE("perfect report") {
    std::vector<int> rows;
    for (int t = 10; t < 15; ++t) rows.push_back(t);
    for (int t = 20; t < 24; ++t) rows.push_back(t);
    const auto m =
        loopmon::evaluate(flag_report(length, rows, rows), labeled);
    for (const auto* s : {&m.cfam, &m.sfam}) {
      CHECK(s->tp == 9);
      CHECK(s->fp == 0);
      CHECK(s->fn == 0);
      CHECK(s->tn == 21);
      CHECK(s->precision == 1.0);
      CHECK(s->recall == 1.0);
      CHECK(s->spans == 2);
      CHECK(s->spans_detected == 2);
      CHECK(s->latency_mean == 0.0);
      CHECK(s->false_trigger_rate == 0.0);
      CHECK(s->tp + s->fp + s->tn + s->fn == length);
    }
  }

  SUBCASE("silent report has zero recall") {
    const auto m = loopmon::evaluate(flag_report(length, {}, {}), labeled);
    CHECK(m.cfam.recall == 0.0);
    CHECK(m.cfam.precision == 1.0);  // vacuous: no alarms raised
    CHECK(m.cfam.tp == 0);
    CHECK(m.cfam.fn == 9);
    CHECK(m.cfam.spans_detected == 0);
    CHECK(m.cfam.latency_mean == 0.0);
  }

  SUBCASE("latency averages first-trigger delays per span") {
    const auto m = loopmon::evaluate(
        flag_report(length, {13, 14, 21}, {13, 14, 21}), labeled);
    CHECK(m.cfam.spans_detected == 2);
    REQUIRE(m.cfam.latencies == std::vector<int>{3, 1});
    CHECK(m.cfam.latency_mean == 2.0);
    CHECK(m.cfam.tp == 3);
    CHECK(m.cfam.fn == 6);
    CHECK(m.cfam.recall == doctest::Approx(3.0 / 9.0));
  }

  SUBCASE("a trigger after the next span starts is not attributed back") {
    const Episode two = labeled_episode(length, {{5, 8}, {10, 13}});
    const auto m = loopmon::evaluate(flag_report(length, {12}, {12}), two);
    CHECK(m.cfam.spans == 2);
    CHECK(m.cfam.spans_detected == 1);
    REQUIRE(m.cfam.latencies == std::vector<int>{2});
  }

  SUBCASE("nominal episodes contribute only false-positive statistics") {
    const Episode nominal = labeled_episode(length, {});
    const auto m = loopmon::evaluate(
        flag_report(length, {2, 9, 17}, {2, 9, 17}), nominal);
    CHECK(m.cfam.spans == 0);
    CHECK(m.cfam.fp == 3);
    CHECK(m.cfam.tn == 27);
    CHECK(m.cfam.precision == 0.0);
    CHECK(m.cfam.recall == 1.0);  // vacuous: nothing to detect
    CHECK(m.cfam.false_trigger_rate == doctest::Approx(3.0 / 30.0));
  }

  SUBCASE("unscored rows are left out of the confusion counts") {
    MonitorReport rep = flag_report(length, {11, 12}, {11, 12});
    for (int t = 0; t < 4; ++t) rep.frames[std::size_t(t)].sfam_scored = false;
    const auto m = loopmon::evaluate(rep, labeled);
    CHECK(m.cfam.tp + m.cfam.fp + m.cfam.tn + m.cfam.fn == length);
    CHECK(m.sfam.tp + m.sfam.fp + m.sfam.tn + m.sfam.fn == length - 4);
    CHECK(m.sfam.tn == m.cfam.tn - 4);
  }

  SUBCASE("metrics serialize to flat key-value text") {
    const auto m = loopmon::evaluate(
        flag_report(length, {13, 14, 21}, {13, 14, 21}), labeled);
    const auto kv = loopmon::metrics_to_keyvalues(m);
    CHECK(kv.get_int("cfam.tp") == 3);
    CHECK(kv.get_int("sfam.spans") == 2);
    CHECK(kv.get_double("cfam.latency_mean") == 2.0);
    CHECK(kv.get_string("cfam.latencies") == "3,1");
    const auto quiet = loopmon::metrics_to_keyvalues(
        loopmon::evaluate(flag_report(length, {}, {}), labeled));
    CHECK(quiet.get_string("cfam.latencies").empty());
  }

  SUBCASE("report and episode must match") {
    CHECK_THROWS_AS(loopmon::evaluate(flag_report(10, {}, {}), labeled),
                    std::invalid_argument);
    CHECK_THROWS_AS(loopmon::evaluate(MonitorReport{}, Episode{}),
                    std::invalid_argument);
  }
}
