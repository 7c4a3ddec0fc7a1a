// Episode persistence and training-window extraction. An episode on disk is
// a directory holding `episode.csv` (header `t,timestamp,image,steering,
// anomaly`), one 8-bit PNG per frame, and an optional `meta.txt`.
#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "loopmon/configfile.hpp"
#include "loopmon/errors.hpp"
#include "loopmon/image.hpp"
#include "loopmon/tensor.hpp"

namespace loopmon {

struct EpisodeRecord {
  int t = 0;
  double timestamp = 0.0;
  std::string frame_name;  // file name within the episode directory
  Frame frame;             // (3, H, W) in [0,1]
  double u = 0.0;          // executed steering command
  bool anomaly = false;
};

enum class EpisodeSource { synthetic, indoor_format, udacity_format };

inline const char* to_string(EpisodeSource s) {
  switch (s) {
    case EpisodeSource::synthetic: return "synthetic";
    case EpisodeSource::indoor_format: return "indoor-format";
    default: return "udacity-format";
  }
}

inline EpisodeSource episode_source_from(const std::string& s) {
  if (s == "synthetic") return EpisodeSource::synthetic;
  if (s == "indoor-format") return EpisodeSource::indoor_format;
  if (s == "udacity-format") return EpisodeSource::udacity_format;
  throw FormatError("episode: unknown source tag " + s);
}

struct EpisodeMeta {
  int height = 0;
  int width = 0;
  double steer_lo = -1.0;
  double steer_hi = 1.0;
  EpisodeSource source = EpisodeSource::indoor_format;
};

struct Episode {
  std::vector<EpisodeRecord> records;
  EpisodeMeta meta;

  int length() const { return int(records.size()); }
};

// (x_{t-3:t}, u_{t-2:t+1}, x_{t+1}) consumed by the prediction monitor.
struct TrainingWindow {
  std::array<Frame, 4> frames;
  std::array<double, 4> commands;
  Frame target;
  int t = 0;  // anchor index in the source episode
};

inline constexpr const char* kEpisodeCsvHeader =
    "t,timestamp,image,steering,anomaly";

namespace detail {

inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_field_double(const std::string& s, const std::string& ctx) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw FormatError(ctx + ": not a number: " + s);
  }
  if (pos != s.size()) throw FormatError(ctx + ": not a number: " + s);
  return v;
}

inline std::string frame_file_name(int t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%06d.png", t);
  return buf;
}

}  // namespace detail

inline void save_episode(const Episode& ep, const std::string& directory) {
  namespace fs = std::filesystem;
  fs::create_directories(directory);
  std::ofstream csv(fs::path(directory) / "episode.csv");
  if (!csv) throw FormatError("save_episode: cannot write manifest in " +
                              directory);
  csv << kEpisodeCsvHeader << "\n";
  for (const auto& r : ep.records) {
    const std::string name =
        r.frame_name.empty() ? detail::frame_file_name(r.t) : r.frame_name;
    csv << r.t << "," << detail::format_g17(r.timestamp) << "," << name << ","
        << detail::format_g17(r.u) << "," << (r.anomaly ? 1 : 0) << "\n";
    write_frame_png((fs::path(directory) / name).string(), r.frame);
  }
  if (!csv) throw FormatError("save_episode: manifest write failed");
  csv.close();

  std::ofstream meta(fs::path(directory) / "meta.txt");
  meta << "height = " << ep.meta.height << "\n";
  meta << "width = " << ep.meta.width << "\n";
  meta << "steer_lo = " << detail::format_g17(ep.meta.steer_lo) << "\n";
  meta << "steer_hi = " << detail::format_g17(ep.meta.steer_hi) << "\n";
  meta << "source = " << to_string(ep.meta.source) << "\n";
}

inline Episode load_episode(const std::string& directory) {
  namespace fs = std::filesystem;
  const fs::path dir(directory);
  std::ifstream csv(dir / "episode.csv");
  if (!csv)
    throw FormatError("load_episode: missing manifest episode.csv in " +
                      directory);
  std::string line;
  if (!std::getline(csv, line))
    throw FormatError("load_episode: empty manifest in " + directory);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kEpisodeCsvHeader)
    throw FormatError("load_episode: bad manifest header: " + line);

  Episode ep;
  int index = 0;
  int prev_t = -1;
  while (std::getline(csv, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    const std::string ctx =
        "load_episode: record " + std::to_string(index) + " in " + directory;
    if (f.size() != 5) throw FormatError(ctx + ": expected 5 fields");
    EpisodeRecord r;
    r.t = int(detail::parse_field_double(f[0], ctx));
    if (r.t <= prev_t)
      throw FormatError(ctx + ": frame index not strictly increasing");
    prev_t = r.t;
    r.timestamp = detail::parse_field_double(f[1], ctx);
    r.frame_name = f[2];
    r.u = detail::parse_field_double(f[3], ctx);
    const std::string& an = f[4];
    if (an == "1" || an == "true") r.anomaly = true;
    else if (an == "0" || an == "false") r.anomaly = false;
    else throw FormatError(ctx + ": bad anomaly flag: " + an);
    const fs::path img = dir / r.frame_name;
    if (!fs::exists(img))
      throw FormatError(ctx + ": missing image file " + r.frame_name);
    try {
      r.frame = read_frame_png(img.string());
    } catch (const FormatError& e) {
      throw FormatError(ctx + ": " + e.what());
    }
    ep.records.push_back(std::move(r));
    ++index;
  }
  if (ep.records.empty())
    throw FormatError("load_episode: no records in " + directory);

  ep.meta.height = ep.records[0].frame.dim(1);
  ep.meta.width = ep.records[0].frame.dim(2);
  for (const auto& r : ep.records)
    if (r.frame.dim(1) != ep.meta.height || r.frame.dim(2) != ep.meta.width)
      throw FormatError("load_episode: frame size mismatch at record t=" +
                        std::to_string(r.t));
  const fs::path metafile = dir / "meta.txt";
  if (fs::exists(metafile)) {
    const auto kv = KeyValues::load(metafile.string());
    ep.meta.steer_lo = kv.get_double("steer_lo", -1.0);
    ep.meta.steer_hi = kv.get_double("steer_hi", 1.0);
    ep.meta.source =
        episode_source_from(kv.get_string("source", "indoor-format"));
  }
  return ep;
}

// Loads a Udacity-style CSV table (columns include timestamp, filename,
// angle; extra columns ignored). Image paths are resolved relative to the
// CSV's directory.
inline Episode load_udacity_episode(const std::string& csv_path) {
  namespace fs = std::filesystem;
  std::ifstream csv(csv_path);
  if (!csv) throw FormatError("load_udacity: cannot open " + csv_path);
  std::string line;
  if (!std::getline(csv, line))
    throw FormatError("load_udacity: empty table " + csv_path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv_line(line);
  int col_ts = -1, col_file = -1, col_angle = -1;
  for (int i = 0; i < int(header.size()); ++i) {
    if (header[i] == "timestamp") col_ts = i;
    if (header[i] == "filename" || header[i] == "image") col_file = i;
    if (header[i] == "angle" || header[i] == "steering" ||
        header[i] == "steering_angle")
      col_angle = i;
  }
  if (col_ts < 0 || col_file < 0 || col_angle < 0)
    throw FormatError(
        "load_udacity: table must have timestamp, filename and angle "
        "columns: " +
        csv_path);

  const fs::path base = fs::path(csv_path).parent_path();
  Episode ep;
  ep.meta.source = EpisodeSource::udacity_format;
  int index = 0;
  while (std::getline(csv, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    const std::string ctx =
        "load_udacity: record " + std::to_string(index) + " in " + csv_path;
    if (int(f.size()) <= std::max({col_ts, col_file, col_angle}))
      throw FormatError(ctx + ": too few fields");
    EpisodeRecord r;
    r.t = index;
    r.timestamp = detail::parse_field_double(f[std::size_t(col_ts)], ctx);
    r.frame_name = f[std::size_t(col_file)];
    r.u = detail::parse_field_double(f[std::size_t(col_angle)], ctx);
    const fs::path img = base / r.frame_name;
    if (!fs::exists(img))
      throw FormatError(ctx + ": missing image file " + r.frame_name);
    r.frame = read_frame_png(img.string());
    ep.records.push_back(std::move(r));
    ++index;
  }
  if (ep.records.empty())
    throw FormatError("load_udacity: no records in " + csv_path);
  ep.meta.height = ep.records[0].frame.dim(1);
  ep.meta.width = ep.records[0].frame.dim(2);
  double lo = ep.records[0].u, hi = ep.records[0].u;
  for (const auto& r : ep.records) {
    lo = std::min(lo, r.u);
    hi = std::max(hi, r.u);
  }
  ep.meta.steer_lo = lo;
  ep.meta.steer_hi = hi;
  return ep;
}

// One window per t in [3, length-2]: frames x_{t-3..t}, commands u_{t-2..t+1},
// target x_{t+1}.
inline std::vector<TrainingWindow> make_windows(const Episode& ep) {
  const int n = ep.length();
  if (n < 5)
    throw std::invalid_argument("make_windows: episode needs >= 5 records");
  std::vector<TrainingWindow> out;
  out.reserve(std::size_t(n - 4));
  for (int t = 3; t <= n - 2; ++t) {
    TrainingWindow w;
    for (int k = 0; k < 4; ++k) {
      w.frames[std::size_t(k)] = ep.records[std::size_t(t - 3 + k)].frame;
      w.commands[std::size_t(k)] = ep.records[std::size_t(t - 2 + k)].u;
    }
    w.target = ep.records[std::size_t(t + 1)].frame;
    w.t = t;
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace loopmon
