// Report plots: one PNG per monitor showing the deviation series as a
// polyline with flagged frames marked and triggered stretches shaded. The
// renderer is a small fixed-palette rasterizer, so identical reports always
// produce identical bytes.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "loopmon/image.hpp"
#include "loopmon/monitor.hpp"
#include "loopmon/tensor.hpp"

namespace loopmon {

namespace plotdetail {

struct Canvas {
  Tensor<std::uint8_t> img;  // (3, H, W)

  Canvas(int h, int w) : img({3, h, w}) {
    std::fill(img.data.begin(), img.data.end(), std::uint8_t(255));
  }

  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    if (x < 0 || y < 0 || x >= img.dim(2) || y >= img.dim(1)) return;
    img.at(0, y, x) = r;
    img.at(1, y, x) = g;
    img.at(2, y, x) = b;
  }

  void line(int x0, int y0, int x1, int y1, std::uint8_t r, std::uint8_t g,
            std::uint8_t b) {
    const int steps = std::max(std::abs(x1 - x0), std::abs(y1 - y0)) + 1;
    for (int i = 0; i < steps; ++i) {
      const double a = steps == 1 ? 0.0 : double(i) / double(steps - 1);
      set(int(std::lround(x0 + a * (x1 - x0))),
          int(std::lround(y0 + a * (y1 - y0))), r, g, b);
    }
  }

  void fill_rect(int x0, int y0, int x1, int y1, std::uint8_t r,
                 std::uint8_t g, std::uint8_t b) {
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) set(x, y, r, g, b);
  }
};

}  // namespace plotdetail

// Renders one monitor's columns from a report. `which` selects "cfam" or
// "sfam".
inline Tensor<std::uint8_t> render_report_series(const MonitorReport& report,
                                                 const std::string& which) {
  if (which != "cfam" && which != "sfam")
    throw std::invalid_argument("render_report_series: unknown monitor " +
                                which);
  const std::size_t len = report.frames.size();
  if (len == 0)
    throw std::invalid_argument("render_report_series: empty report");
  const bool cfam = which == "cfam";
  auto scored = [&](std::size_t t) {
    return cfam ? report.frames[t].cfam_scored : report.frames[t].sfam_scored;
  };
  auto dev = [&](std::size_t t) {
    return cfam ? report.frames[t].cfam_dev : report.frames[t].sfam_dev;
  };
  auto flag = [&](std::size_t t) {
    return cfam ? report.frames[t].cfam_flag : report.frames[t].sfam_flag;
  };
  auto trigger = [&](std::size_t t) {
    return cfam ? report.frames[t].cfam_trigger
                : report.frames[t].sfam_trigger;
  };

  const int width = 720, height = 300;
  const int x0 = 50, x1 = width - 20, y0 = 20, y1 = height - 30;
  plotdetail::Canvas canvas(height, width);

  double vmax = 0.0;
  for (std::size_t t = 0; t < len; ++t)
    if (scored(t)) vmax = std::max(vmax, dev(t));
  if (vmax <= 0.0) vmax = 1.0;
  auto px = [&](std::size_t t) {
    return len == 1 ? x0
                    : x0 + int(std::lround(double(t) * (x1 - x0) /
                                           double(len - 1)));
  };
  auto py = [&](double v) {
    return y1 - int(std::lround(std::clamp(v / vmax, 0.0, 1.0) * (y1 - y0)));
  };

  for (std::size_t t = 0; t < len; ++t)  // triggered stretches first
    if (trigger(t)) {
      const int xa = px(t), xb = t + 1 < len ? px(t + 1) : px(t);
      canvas.fill_rect(xa, y0, std::max(xa, xb - 1), y1, 255, 220, 220);
    }
  canvas.line(x0, y1, x1, y1, 0, 0, 0);  // axes
  canvas.line(x0, y0, x0, y1, 0, 0, 0);
  for (std::size_t t = 0; t + 1 < len; ++t)  // deviation polyline
    if (scored(t) && scored(t + 1))
      canvas.line(px(t), py(dev(t)), px(t + 1), py(dev(t + 1)), 30, 60, 160);
  for (std::size_t t = 0; t < len; ++t)  // flagged frames
    if (scored(t) && flag(t)) {
      const int x = px(t), y = py(dev(t));
      canvas.fill_rect(x - 1, y - 1, x + 1, y + 1, 200, 30, 30);
    }
  return canvas.img;
}

// Writes <prefix>cfam.png and <prefix>sfam.png.
inline void write_report_plots(const std::string& prefix,
                               const MonitorReport& report) {
  for (const char* which : {"cfam", "sfam"})
    write_png_rgb8(prefix + which + ".png",
                   render_report_series(report, which));
}

}  // namespace loopmon
