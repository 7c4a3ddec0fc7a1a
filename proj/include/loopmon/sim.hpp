// Synthetic corridor world: seeded layout, 2-D raycast renderer with
// checkerboard floor and striped walls for motion cues, a pure-pursuit
// centerline controller, kinematic vehicle update, and anomaly injection by
// re-simulation with overridden commands.
//
// Conventions fixed here and relied on everywhere else:
//   * positive steering = right turn; the world frame is y-down so
//     heading += turn_gain * u * dt turns the view to the right for u > 0.
//   * records[t].u is the command EXECUTED during (t-1, t], i.e. the command
//     that produced frame t; records[0].u = 0. This makes window command
//     u_{t+1} the command that drives x_t into x_{t+1}, which the prediction
//     monitor's action conditioning requires.
//   * anomaly labels mark issue times: records[t].anomaly is true iff the
//     command issued at time t (recorded in records[t+1].u) was overridden,
//     so labels cover exactly [start_t, end_t) and frames first differ from
//     the nominal run at start_t + 1.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "loopmon/configfile.hpp"
#include "loopmon/dataio.hpp"
#include "loopmon/errors.hpp"
#include "loopmon/image.hpp"
#include "loopmon/rng.hpp"

namespace loopmon {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

struct WorldConfig {
  int img_w = 64;
  int img_h = 64;
  double half_width = 1.0;    // corridor half width, m
  double speed = 1.0;         // m/s, constant per episode
  double dt = 0.1;            // s per frame
  double fov_deg = 90.0;
  double cam_height = 0.45;   // m above the floor
  double wall_height = 1.2;   // m
  double lookahead = 1.3;     // pure-pursuit lookahead, m
  double steer_gain = 1.4;    // controller proportional gain
  double turn_gain = 2.2;     // rad/s of heading change per unit command
  double noise = 0.004;       // uniform controller noise amplitude
  double checker = 0.5;       // floor checker tile size, m
  double stripe = 0.5;        // wall stripe period, m
  double max_steer = 0.6;
  double collision_eps = 0.05;
  // Corridor layout: explicit (length, turn-after in radians) segments, or
  // empty for a seeded automatic layout of auto_segments turns.
  std::vector<std::pair<double, double>> segments;
  int auto_segments = 6;
};

struct AnomalyScenario {
  enum class Kind { late_right, early_left };
  Kind kind = Kind::late_right;
  int start_t = 0;
  int end_t = 0;
};

inline const char* to_string(AnomalyScenario::Kind k) {
  return k == AnomalyScenario::Kind::late_right ? "late-right" : "early-left";
}

// ---- config file mapping ----------------------------------------------------

inline WorldConfig world_from_config(const KeyValues& kv) {
  WorldConfig c;
  c.img_w = kv.get_int("image_width", c.img_w);
  c.img_h = kv.get_int("image_height", c.img_h);
  c.half_width = kv.get_double("half_width", c.half_width);
  c.speed = kv.get_double("speed", c.speed);
  c.dt = kv.get_double("dt", c.dt);
  c.fov_deg = kv.get_double("fov_deg", c.fov_deg);
  c.cam_height = kv.get_double("cam_height", c.cam_height);
  c.wall_height = kv.get_double("wall_height", c.wall_height);
  c.lookahead = kv.get_double("lookahead", c.lookahead);
  c.steer_gain = kv.get_double("steer_gain", c.steer_gain);
  c.turn_gain = kv.get_double("turn_gain", c.turn_gain);
  c.noise = kv.get_double("noise", c.noise);
  c.checker = kv.get_double("checker", c.checker);
  c.stripe = kv.get_double("stripe", c.stripe);
  c.max_steer = kv.get_double("max_steer", c.max_steer);
  c.collision_eps = kv.get_double("collision_eps", c.collision_eps);
  c.auto_segments = kv.get_int("auto_segments", c.auto_segments);
  const std::string segs = kv.get_string("segments", "auto");
  if (segs != "auto") {
    c.segments.clear();
    std::size_t pos = 0;
    while (pos < segs.size()) {
      auto comma = segs.find(',', pos);
      if (comma == std::string::npos) comma = segs.size();
      const std::string item = segs.substr(pos, comma - pos);
      const auto colon = item.find(':');
      if (colon == std::string::npos)
        throw FormatError("world config: segment item needs length:turn_deg: " +
                          item);
      const auto full_stod = [&item](const std::string& tok) {
        std::size_t used = 0;
        double v = 0.0;
        try {
          v = std::stod(tok, &used);
        } catch (const std::exception&) {
          throw FormatError("world config: bad segment item: " + item);
        }
        if (used != tok.size())
          throw FormatError("world config: bad segment item: " + item);
        return v;
      };
      const double len = full_stod(item.substr(0, colon));
      const double deg = full_stod(item.substr(colon + 1));
      c.segments.emplace_back(len, deg * M_PI / 180.0);
      pos = comma + 1;
    }
    if (c.segments.empty())
      throw FormatError("world config: empty segment list");
  }
  if (c.img_w < 32 || c.img_h < 32)
    throw FormatError("world config: image size must be at least 32x32");
  if (c.half_width <= 0.2 || c.speed <= 0.0 || c.dt <= 0.0)
    throw FormatError("world config: non-positive geometry or timing");
  return c;
}

inline KeyValues world_to_config(const WorldConfig& c) {
  KeyValues kv;
  kv.set("image_width", c.img_w);
  kv.set("image_height", c.img_h);
  kv.set("half_width", c.half_width);
  kv.set("speed", c.speed);
  kv.set("dt", c.dt);
  kv.set("fov_deg", c.fov_deg);
  kv.set("cam_height", c.cam_height);
  kv.set("wall_height", c.wall_height);
  kv.set("lookahead", c.lookahead);
  kv.set("steer_gain", c.steer_gain);
  kv.set("turn_gain", c.turn_gain);
  kv.set("noise", c.noise);
  kv.set("checker", c.checker);
  kv.set("stripe", c.stripe);
  kv.set("max_steer", c.max_steer);
  kv.set("collision_eps", c.collision_eps);
  kv.set("auto_segments", c.auto_segments);
  if (c.segments.empty()) {
    kv.set("segments", "auto");
  } else {
    std::string s;
    for (std::size_t i = 0; i < c.segments.size(); ++i) {
      if (i) s += ",";
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.17g:%.17g", c.segments[i].first,
                    c.segments[i].second * 180.0 / M_PI);
      s += buf;
    }
    kv.set("segments", s);
  }
  return kv;
}

// ---- corridor geometry --------------------------------------------------------

struct WallSeg {
  Vec2 a, b;
};

struct Corridor {
  std::vector<Vec2> center;     // polyline vertices
  std::vector<double> cum;      // cumulative arc length at each vertex
  std::vector<WallSeg> walls;   // both offset sides plus end caps
  double total = 0.0;
};

namespace simdetail {

inline double wrap_angle(double a) {
  while (a > M_PI) a -= 2.0 * M_PI;
  while (a <= -M_PI) a += 2.0 * M_PI;
  return a;
}

inline Vec2 right_normal(Vec2 d) { return {-d.y, d.x}; }

}  // namespace simdetail

inline Corridor build_corridor(const WorldConfig& cfg, Rng& layout_rng) {
  std::vector<std::pair<double, double>> segs = cfg.segments;
  if (segs.empty()) {
    // Seeded layout: a leading straight, then alternating turns so the
    // corridor never self-intersects, then a closing straight.
    segs.emplace_back(8.0, 0.0);
    double sign = layout_rng.uniform() < 0.5 ? 1.0 : -1.0;
    for (int i = 0; i < cfg.auto_segments; ++i) {
      segs.back().second = sign * layout_rng.uniform(0.35, 0.95);
      segs.emplace_back(layout_rng.uniform(6.0, 10.0), 0.0);
      sign = -sign;
    }
    segs.emplace_back(8.0, 0.0);
  }
  for (const auto& [len, turn] : segs) {
    if (!(len >= 1.0))
      throw std::invalid_argument("corridor: segment shorter than 1 m");
    if (std::abs(turn) > 1.5)
      throw std::invalid_argument("corridor: turn angle beyond +-86 degrees");
  }
  if (cfg.half_width * 2.5 > segs.front().first)
    throw std::invalid_argument("corridor: width too large for segments");

  Corridor cor;
  Vec2 p{0.0, 0.0};
  double dir = 0.0;
  cor.center.push_back(p);
  std::vector<double> seg_dirs;
  for (const auto& [len, turn] : segs) {
    seg_dirs.push_back(dir);
    p.x += len * std::cos(dir);
    p.y += len * std::sin(dir);
    cor.center.push_back(p);
    dir += turn;
  }
  cor.cum.assign(cor.center.size(), 0.0);
  for (std::size_t i = 1; i < cor.center.size(); ++i) {
    const double dx = cor.center[i].x - cor.center[i - 1].x;
    const double dy = cor.center[i].y - cor.center[i - 1].y;
    cor.cum[i] = cor.cum[i - 1] + std::hypot(dx, dy);
  }
  cor.total = cor.cum.back();

  // Offset points with clamped miter joins.
  const std::size_t nv = cor.center.size();
  std::vector<Vec2> left(nv), right(nv);
  for (std::size_t i = 0; i < nv; ++i) {
    Vec2 n;
    if (i == 0) {
      n = simdetail::right_normal(
          {std::cos(seg_dirs.front()), std::sin(seg_dirs.front())});
    } else if (i == nv - 1) {
      n = simdetail::right_normal(
          {std::cos(seg_dirs.back()), std::sin(seg_dirs.back())});
    } else {
      const Vec2 n0 = simdetail::right_normal(
          {std::cos(seg_dirs[i - 1]), std::sin(seg_dirs[i - 1])});
      const Vec2 n1 = simdetail::right_normal(
          {std::cos(seg_dirs[i]), std::sin(seg_dirs[i])});
      Vec2 m{n0.x + n1.x, n0.y + n1.y};
      const double mlen = std::hypot(m.x, m.y);
      if (mlen < 1e-9) {
        n = n1;
      } else {
        m.x /= mlen;
        m.y /= mlen;
        const double cosh = m.x * n1.x + m.y * n1.y;
        const double scale = 1.0 / std::max(0.5, cosh);
        n = {m.x * scale, m.y * scale};
      }
    }
    right[i] = {cor.center[i].x + cfg.half_width * n.x,
                cor.center[i].y + cfg.half_width * n.y};
    left[i] = {cor.center[i].x - cfg.half_width * n.x,
               cor.center[i].y - cfg.half_width * n.y};
  }
  for (std::size_t i = 0; i + 1 < nv; ++i) {
    cor.walls.push_back({right[i], right[i + 1]});
    cor.walls.push_back({left[i], left[i + 1]});
  }
  cor.walls.push_back({left.front(), right.front()});  // start cap
  cor.walls.push_back({left.back(), right.back()});    // end cap
  return cor;
}

inline Vec2 corridor_point(const Corridor& cor, double s) {
  if (s <= 0.0) return cor.center.front();
  if (s >= cor.total) return cor.center.back();
  std::size_t i = 1;
  while (i < cor.cum.size() && cor.cum[i] < s) ++i;
  const double seg = cor.cum[i] - cor.cum[i - 1];
  const double f = (s - cor.cum[i - 1]) / seg;
  return {cor.center[i - 1].x + f * (cor.center[i].x - cor.center[i - 1].x),
          cor.center[i - 1].y + f * (cor.center[i].y - cor.center[i - 1].y)};
}

// Arc-length of the closest centerline point to `p`.
inline double corridor_progress(const Corridor& cor, Vec2 p) {
  double best_d = std::numeric_limits<double>::max();
  double best_s = 0.0;
  for (std::size_t i = 0; i + 1 < cor.center.size(); ++i) {
    const Vec2 a = cor.center[i], b = cor.center[i + 1];
    const double vx = b.x - a.x, vy = b.y - a.y;
    const double len2 = vx * vx + vy * vy;
    double f = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
    f = f < 0.0 ? 0.0 : (f > 1.0 ? 1.0 : f);
    const double qx = a.x + f * vx - p.x, qy = a.y + f * vy - p.y;
    const double d = qx * qx + qy * qy;
    if (d < best_d) {
      best_d = d;
      best_s = cor.cum[i] + f * std::sqrt(len2);
    }
  }
  return best_s;
}

inline double distance_to_wall(const Corridor& cor, Vec2 p) {
  double best = std::numeric_limits<double>::max();
  for (const auto& wseg : cor.walls) {
    const double vx = wseg.b.x - wseg.a.x, vy = wseg.b.y - wseg.a.y;
    const double len2 = vx * vx + vy * vy;
    double f = len2 > 0 ? ((p.x - wseg.a.x) * vx + (p.y - wseg.a.y) * vy) / len2
                        : 0.0;
    f = f < 0.0 ? 0.0 : (f > 1.0 ? 1.0 : f);
    const double qx = wseg.a.x + f * vx - p.x, qy = wseg.a.y + f * vy - p.y;
    best = std::min(best, std::hypot(qx, qy));
  }
  return best;
}

// ---- rendering ---------------------------------------------------------------

namespace simdetail {

// Forward-depth raycast against the wall set: the ray is pos + t * d where
// d = forward + ax * right (unnormalized), so the parameter t equals the
// perpendicular (projection-plane) depth used for screen-height math.
struct WallHit {
  double depth = std::numeric_limits<double>::max();
  double along = 0.0;  // world arc position along the wall, for stripes
  bool hit = false;
};

inline WallHit cast_ray(const Corridor& cor, Vec2 pos, Vec2 d) {
  WallHit best;
  for (const auto& w : cor.walls) {
    const double ex = w.b.x - w.a.x, ey = w.b.y - w.a.y;
    const double denom = d.x * ey - d.y * ex;
    if (std::abs(denom) < 1e-12) continue;
    const double rx = w.a.x - pos.x, ry = w.a.y - pos.y;
    const double t = (rx * ey - ry * ex) / denom;
    const double s = (rx * d.y - ry * d.x) / denom;
    if (t > 1e-9 && s >= 0.0 && s <= 1.0 && t < best.depth) {
      best.depth = t;
      best.along = s * std::hypot(ex, ey);
      best.hit = true;
    }
  }
  return best;
}

inline std::uint8_t quantize_pixel(double v) {
  const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return std::uint8_t(std::lround(c * 255.0));
}

}  // namespace simdetail

inline Frame render_view(const Corridor& cor, const WorldConfig& cfg, Vec2 pos,
                         double heading, const std::array<double, 3>& tint) {
  const int W = cfg.img_w, H = cfg.img_h;
  const double f = (W / 2.0) / std::tan(cfg.fov_deg * M_PI / 360.0);
  const double cx = W / 2.0, cy = H / 2.0;
  const Vec2 fwd{std::cos(heading), std::sin(heading)};
  const Vec2 rgt{-fwd.y, fwd.x};
  Tensor<std::uint8_t> img({3, H, W});
  const std::int64_t plane = std::int64_t(H) * W;

  for (int x = 0; x < W; ++x) {
    const double ax = (x + 0.5 - cx) / f;
    const Vec2 d{fwd.x + ax * rgt.x, fwd.y + ax * rgt.y};
    const auto hit = simdetail::cast_ray(cor, pos, d);
    const double depth = hit.hit ? hit.depth : 1e9;
    const double y_top = cy - f * (cfg.wall_height - cfg.cam_height) / depth;
    const double y_bot = cy + f * cfg.cam_height / depth;
    const double shade_w = 1.0 / (1.0 + 0.22 * depth);
    const int band =
        hit.hit ? (int(std::floor(hit.along / cfg.stripe)) & 1) : 0;
    const double stripe_mul = band ? 0.82 : 1.0;

    for (int y = 0; y < H; ++y) {
      const double yc = y + 0.5 - cy;
      double r, g, b;
      if (yc >= y_top - cy && yc <= y_bot - cy) {
        // wall slice
        r = 0.62 * stripe_mul * shade_w;
        g = 0.30 * stripe_mul * shade_w;
        b = 0.24 * stripe_mul * shade_w;
      } else if (yc > 0.0 && yc > y_bot - cy) {
        // floor: project to the ground plane and checker it
        const double t = cfg.cam_height * f / yc;
        const Vec2 gpt{pos.x + t * d.x, pos.y + t * d.y};
        const int cell = (int(std::floor(gpt.x / cfg.checker)) +
                          int(std::floor(gpt.y / cfg.checker))) &
                         1;
        const double shade = 1.0 / (1.0 + 0.18 * t);
        const double base = cell ? 0.56 : 0.36;
        r = base * shade;
        g = (base + 0.02) * shade;
        b = base * shade;
      } else {
        // ceiling
        const double t =
            yc < -1e-9 ? (cfg.wall_height - cfg.cam_height) * f / (-yc) : 1e9;
        const double shade = 1.0 / (1.0 + 0.10 * t);
        r = 0.18 + 0.10 * shade;
        g = 0.20 + 0.10 * shade;
        b = 0.27 + 0.10 * shade;
      }
      img[std::int64_t(y) * W + x] = simdetail::quantize_pixel(r * tint[0]);
      img[plane + std::int64_t(y) * W + x] =
          simdetail::quantize_pixel(g * tint[1]);
      img[2 * plane + std::int64_t(y) * W + x] =
          simdetail::quantize_pixel(b * tint[2]);
    }
  }
  return to_unit(img);
}

// ---- controller and vehicle -----------------------------------------------------

struct VehicleState {
  Vec2 pos;
  double heading = 0.0;
  bool crashed = false;
};

// Pure pursuit toward a lookahead point on the centerline; positive output
// turns right (y-down world).
inline double pure_pursuit(const Corridor& cor, const WorldConfig& cfg,
                           const VehicleState& st) {
  const double s = corridor_progress(cor, st.pos);
  const Vec2 target = corridor_point(cor, s + cfg.lookahead);
  const double want = std::atan2(target.y - st.pos.y, target.x - st.pos.x);
  const double err = simdetail::wrap_angle(want - st.heading);
  const double u = cfg.steer_gain * err;
  return u < -cfg.max_steer ? -cfg.max_steer
                            : (u > cfg.max_steer ? cfg.max_steer : u);
}

inline void advance_vehicle(const Corridor& cor, const WorldConfig& cfg,
                            VehicleState& st, double u) {
  if (st.crashed) return;
  st.heading = simdetail::wrap_angle(st.heading + cfg.turn_gain * u * cfg.dt);
  st.pos.x += cfg.speed * cfg.dt * std::cos(st.heading);
  st.pos.y += cfg.speed * cfg.dt * std::sin(st.heading);
  if (distance_to_wall(cor, st.pos) < cfg.collision_eps) st.crashed = true;
}

// ---- episode simulation -----------------------------------------------------------

namespace simdetail {

inline Episode simulate_impl(const WorldConfig& cfg, std::uint64_t seed,
                             int length, const AnomalyScenario* scenario,
                             std::vector<VehicleState>* trajectory = nullptr) {
  if (length < 5)
    throw std::invalid_argument("simulate_episode: length must be >= 5");
  if (scenario) {
    if (scenario->start_t < 0 || scenario->start_t >= scenario->end_t ||
        scenario->end_t > length)
      throw std::invalid_argument(
          "inject_anomaly: override window outside episode");
  }
  Rng root(seed);
  Rng layout_rng = root.fork(1);
  Rng tint_rng = root.fork(2);
  Rng noise_rng = root.fork(3);
  const Corridor cor = build_corridor(cfg, layout_rng);
  const std::array<double, 3> tint{tint_rng.uniform(0.92, 1.08),
                                   tint_rng.uniform(0.92, 1.08),
                                   tint_rng.uniform(0.92, 1.08)};

  VehicleState st;
  const double s0 = std::min(1.0, cor.total / 10.0);
  st.pos = corridor_point(cor, s0);
  {
    const Vec2 ahead = corridor_point(cor, s0 + 0.5);
    st.heading = std::atan2(ahead.y - st.pos.y, ahead.x - st.pos.x);
  }

  Episode ep;
  ep.meta.height = cfg.img_h;
  ep.meta.width = cfg.img_w;
  ep.meta.steer_lo = -cfg.max_steer;
  ep.meta.steer_hi = cfg.max_steer;
  ep.meta.source = EpisodeSource::synthetic;
  ep.records.reserve(std::size_t(length));

  EpisodeRecord first;
  first.t = 0;
  first.timestamp = 0.0;
  first.frame_name = detail::frame_file_name(0);
  first.frame = render_view(cor, cfg, st.pos, st.heading, tint);
  first.u = 0.0;
  ep.records.push_back(std::move(first));
  if (trajectory) trajectory->push_back(st);

  for (int t = 1; t < length; ++t) {
    const int issue = t - 1;
    double u = pure_pursuit(cor, cfg, st) +
               noise_rng.uniform(-cfg.noise, cfg.noise);
    u = u < -cfg.max_steer ? -cfg.max_steer
                           : (u > cfg.max_steer ? cfg.max_steer : u);
    if (scenario && issue >= scenario->start_t && issue < scenario->end_t)
      u = scenario->kind == AnomalyScenario::Kind::late_right ? 0.0 : -0.2;
    advance_vehicle(cor, cfg, st, u);
    EpisodeRecord r;
    r.t = t;
    r.timestamp = t * cfg.dt;
    r.frame_name = detail::frame_file_name(t);
    r.frame = render_view(cor, cfg, st.pos, st.heading, tint);
    r.u = u;
    ep.records.push_back(std::move(r));
    if (trajectory) trajectory->push_back(st);
  }
  if (scenario)
    for (int t = scenario->start_t; t < scenario->end_t; ++t)
      ep.records[std::size_t(t)].anomaly = true;
  return ep;
}

}  // namespace simdetail

inline Episode simulate_episode(const WorldConfig& cfg, std::uint64_t seed,
                                int length) {
  return simdetail::simulate_impl(cfg, seed, length, nullptr);
}

// Same simulation, additionally returning the vehicle state at each frame
// (used by trajectory-level diagnostics and tests).
inline Episode simulate_with_trajectory(const WorldConfig& cfg,
                                        std::uint64_t seed, int length,
                                        const AnomalyScenario* scenario,
                                        std::vector<VehicleState>& traj) {
  traj.clear();
  return simdetail::simulate_impl(cfg, seed, length, scenario, &traj);
}

// Re-simulates the episode with commands overridden at issue times in
// [start_t, end_t): late-right holds u = 0 (suppressing a right turn),
// early-left applies u = -0.2 (turning left where the corridor is straight).
inline Episode inject_anomaly(const Episode& nominal,
                              const AnomalyScenario& scenario,
                              const WorldConfig& cfg, std::uint64_t seed) {
  if (nominal.length() < 5)
    throw std::invalid_argument("inject_anomaly: episode too short");
  return simdetail::simulate_impl(cfg, seed, nominal.length(), &scenario);
}

// Picks an override window suited to the scenario kind from the nominal
// command stream: late-right starts where the controller first commits to a
// right turn; early-left starts in the middle of a straight stretch.
inline AnomalyScenario find_override_window(const Episode& nominal,
                                            AnomalyScenario::Kind kind,
                                            int duration) {
  const int n = nominal.length();
  // issued[t] = command issued at time t (produces frame t+1).
  std::vector<double> issued(std::size_t(std::max(0, n - 1)));
  for (int t = 0; t + 1 < n; ++t)
    issued[std::size_t(t)] = nominal.records[std::size_t(t + 1)].u;

  AnomalyScenario sc;
  sc.kind = kind;
  if (kind == AnomalyScenario::Kind::late_right) {
    for (int t = 5; t + 3 < int(issued.size()); ++t) {
      if (issued[std::size_t(t)] > 0.15 && issued[std::size_t(t + 1)] > 0.15 &&
          issued[std::size_t(t + 2)] > 0.15) {
        sc.start_t = t;
        sc.end_t = std::min(n, t + duration);
        return sc;
      }
    }
    throw std::invalid_argument(
        "find_override_window: no right turn in episode");
  }
  int run = 0;
  for (int t = 5; t < int(issued.size()); ++t) {
    if (std::abs(issued[std::size_t(t)]) < 0.03) {
      if (++run >= 8) {
        sc.start_t = t;
        sc.end_t = std::min(n, t + duration);
        return sc;
      }
    } else {
      run = 0;
    }
  }
  throw std::invalid_argument(
      "find_override_window: no straight stretch in episode");
}

}  // namespace loopmon
