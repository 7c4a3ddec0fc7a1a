// Image-similarity and action-grid primitives shared by both monitors.
// SSIM uses a uniform box window, stride 1, valid placements, dynamic range
// L = 1, biased (population) variances, per-channel averaging. All SSIM
// arithmetic runs in double regardless of the frame's scalar type.
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "loopmon/tensor.hpp"

namespace loopmon {

struct ActionGrid {
  double lo = 0.0;
  double hi = 0.0;
  int n = 0;
  std::vector<double> values;
};

inline ActionGrid make_action_grid(double lo, double hi, int n) {
  if (!(lo < hi))
    throw std::invalid_argument("make_action_grid: lo must be < hi");
  if (n < 2) throw std::invalid_argument("make_action_grid: need N >= 2");
  ActionGrid g;
  g.lo = lo;
  g.hi = hi;
  g.n = n;
  g.values.resize(std::size_t(n));
  const double step = (hi - lo) / double(n - 1);
  for (int i = 0; i < n; ++i) g.values[std::size_t(i)] = lo + step * i;
  g.values.back() = hi;  // keep the endpoint invariant exact
  return g;
}

// Argmin over |u - values[i]|; ties and out-of-range inputs resolve toward
// the lower index / nearest endpoint.
inline int nearest_action_index(double u, const ActionGrid& grid) {
  int best = 0;
  double best_d = std::abs(u - grid.values[0]);
  for (int i = 1; i < grid.n; ++i) {
    const double d = std::abs(u - grid.values[std::size_t(i)]);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

namespace detail {

// Summed-area table with a zero border row/column: sat[(y+1)*(W+1)+(x+1)]
// holds the sum over the inclusive rectangle [0..y]x[0..x].
inline void build_sat(const double* img, int h, int w, std::vector<double>& sat) {
  sat.assign(std::size_t(h + 1) * (w + 1), 0.0);
  for (int y = 0; y < h; ++y) {
    double row = 0.0;
    for (int x = 0; x < w; ++x) {
      row += img[y * w + x];
      sat[std::size_t(y + 1) * (w + 1) + (x + 1)] =
          sat[std::size_t(y) * (w + 1) + (x + 1)] + row;
    }
  }
}

inline double sat_window(const std::vector<double>& sat, int w, int y, int x,
                         int k) {
  const int W1 = w + 1;
  return sat[std::size_t(y + k) * W1 + (x + k)] -
         sat[std::size_t(y) * W1 + (x + k)] -
         sat[std::size_t(y + k) * W1 + x] + sat[std::size_t(y) * W1 + x];
}

// Mean SSIM over all valid kxk windows of one channel.
inline double ssim_channel(const double* a, const double* b, int h, int w,
                           int k) {
  constexpr double c1 = 1e-4;  // (0.01 * L)^2, L = 1
  constexpr double c2 = 9e-4;  // (0.03 * L)^2
  thread_local std::vector<double> sa, sb, saa, sbb, sab, tmp;
  build_sat(a, h, w, sa);
  build_sat(b, h, w, sb);
  tmp.resize(std::size_t(h) * w);
  for (std::int64_t i = 0; i < std::int64_t(h) * w; ++i) tmp[i] = a[i] * a[i];
  build_sat(tmp.data(), h, w, saa);
  for (std::int64_t i = 0; i < std::int64_t(h) * w; ++i) tmp[i] = b[i] * b[i];
  build_sat(tmp.data(), h, w, sbb);
  for (std::int64_t i = 0; i < std::int64_t(h) * w; ++i) tmp[i] = a[i] * b[i];
  build_sat(tmp.data(), h, w, sab);

  const double inv = 1.0 / double(k * k);
  double acc = 0.0;
  for (int y = 0; y + k <= h; ++y)
    for (int x = 0; x + k <= w; ++x) {
      const double mu_a = sat_window(sa, w, y, x, k) * inv;
      const double mu_b = sat_window(sb, w, y, x, k) * inv;
      const double var_a = sat_window(saa, w, y, x, k) * inv - mu_a * mu_a;
      const double var_b = sat_window(sbb, w, y, x, k) * inv - mu_b * mu_b;
      const double cov = sat_window(sab, w, y, x, k) * inv - mu_a * mu_b;
      const double num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
      const double den =
          (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
      acc += num / den;
    }
  return acc / (double(h - k + 1) * double(w - k + 1));
}

}  // namespace detail

// Mean SSIM index between two images of shape (H, W) or (C, H, W).
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, int kernel) {
  if (!a.same_shape(b))
    throw std::invalid_argument("ssim: shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
  if (a.ndim() != 2 && a.ndim() != 3)
    throw std::invalid_argument("ssim: image must be (H,W) or (C,H,W)");
  const int c = a.ndim() == 3 ? a.dim(0) : 1;
  const int h = a.dim(a.ndim() - 2);
  const int w = a.dim(a.ndim() - 1);
  if (kernel % 2 == 0 || kernel < 1)
    throw std::invalid_argument("ssim: kernel must be odd and positive");
  if (kernel > h || kernel > w)
    throw std::invalid_argument("ssim: kernel larger than image");

  thread_local std::vector<double> da, db;
  const std::int64_t plane = std::int64_t(h) * w;
  da.resize(std::size_t(plane));
  db.resize(std::size_t(plane));
  double acc = 0.0;
  for (int ci = 0; ci < c; ++ci) {
    for (std::int64_t i = 0; i < plane; ++i) {
      da[std::size_t(i)] = double(a[ci * plane + i]);
      db[std::size_t(i)] = double(b[ci * plane + i]);
    }
    acc += detail::ssim_channel(da.data(), db.data(), h, w, kernel);
  }
  return acc / double(c);
}

template <typename T>
double dssim(const Tensor<T>& a, const Tensor<T>& b, int kernel) {
  return (1.0 - ssim(a, b, kernel)) / 2.0;
}

}  // namespace loopmon
