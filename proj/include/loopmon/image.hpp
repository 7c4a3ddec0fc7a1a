// 8-bit RGB PNG I/O (libpng) plus pixel-format helpers. Encoding uses fixed
// compression settings and no ancillary chunks so identical pixels produce
// identical files, which the dataset-determinism contract relies on.
#pragma once

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "loopmon/errors.hpp"
#include "loopmon/tensor.hpp"

namespace loopmon {

// Frames move through the pipeline as float tensors (3, H, W) in [0,1].
using Frame = Tensor<float>;

inline Tensor<std::uint8_t> to_bytes(const Frame& f) {
  Tensor<std::uint8_t> out;
  out.shape = f.shape;
  out.data.resize(f.data.size());
  for (std::size_t i = 0; i < f.data.size(); ++i) {
    const float v = f.data[i];
    const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    out.data[i] = std::uint8_t(std::lround(c * 255.0f));
  }
  return out;
}

inline Frame to_unit(const Tensor<std::uint8_t>& img) {
  Frame out;
  out.shape = img.shape;
  out.data.resize(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i)
    out.data[i] = float(img.data[i]) * (1.0f / 255.0f);
  return out;
}

// Snaps a frame onto the 8-bit grid; round-trips through PNG losslessly.
inline Frame quantized(const Frame& f) { return to_unit(to_bytes(f)); }

namespace imgdetail {

// The setjmp regions below are isolated in plain-C-style helpers holding no
// objects with destructors; mixing setjmp with C++ locals is undefined and
// also trips compiler bugs.
inline bool png_encode(std::FILE* fp, int w, int h,
                       const std::uint8_t* interleaved) {
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, fp);
  png_set_compression_level(png, 6);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y)
    png_write_row(png, const_cast<png_bytep>(interleaved +
                                             std::size_t(y) * w * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

// Decodes into a malloc'd interleaved RGB8 buffer (caller frees); returns
// nullptr on any decode error.
inline std::uint8_t* png_decode(std::FILE* fp, int* out_w, int* out_h) {
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return nullptr;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return nullptr;
  }
  std::uint8_t* volatile buf = nullptr;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::free(buf);
    return nullptr;
  }
  png_init_io(png, fp);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int w = int(png_get_image_width(png, info));
  const int h = int(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  if ((color & PNG_COLOR_MASK_ALPHA) != 0 ||
      png_get_valid(png, info, PNG_INFO_tRNS))
    png_set_strip_alpha(png);
  const int passes = png_set_interlace_handling(png);
  png_read_update_info(png, info);
  if (png_get_rowbytes(png, info) != std::size_t(w) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    return nullptr;
  }
  buf = static_cast<std::uint8_t*>(
      std::malloc(std::size_t(h) * std::size_t(w) * 3));
  if (!buf) {
    png_destroy_read_struct(&png, &info, nullptr);
    return nullptr;
  }
  for (int p = 0; p < passes; ++p)
    for (int y = 0; y < h; ++y)
      png_read_row(png, buf + std::size_t(y) * w * 3, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  *out_w = w;
  *out_h = h;
  return buf;
}

}  // namespace imgdetail

inline void write_png_rgb8(const std::string& path,
                           const Tensor<std::uint8_t>& img) {
  if (img.ndim() != 3 || img.dim(0) != 3)
    throw std::invalid_argument("write_png: image must be (3,H,W)");
  const int h = img.dim(1), w = img.dim(2);
  std::vector<std::uint8_t> interleaved(std::size_t(h) * std::size_t(w) * 3);
  const std::int64_t plane = std::int64_t(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t s = (std::size_t(y) * w + x) * 3;
      interleaved[s + 0] = img[std::int64_t(y) * w + x];
      interleaved[s + 1] = img[plane + std::int64_t(y) * w + x];
      interleaved[s + 2] = img[2 * plane + std::int64_t(y) * w + x];
    }
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw FormatError("write_png: cannot open " + path);
  const bool ok = imgdetail::png_encode(fp, w, h, interleaved.data());
  const bool closed = std::fclose(fp) == 0;
  if (!ok || !closed) throw FormatError("write_png: encode failed for " + path);
}

inline Tensor<std::uint8_t> read_png_rgb8(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw FormatError("read_png: cannot open " + path);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    std::fclose(fp);
    throw FormatError("read_png: not a PNG file: " + path);
  }
  int w = 0, h = 0;
  std::uint8_t* buf = imgdetail::png_decode(fp, &w, &h);
  std::fclose(fp);
  if (!buf) throw FormatError("read_png: decode failed for " + path);

  Tensor<std::uint8_t> out({3, h, w});
  const std::int64_t plane = std::int64_t(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t s = (std::size_t(y) * w + x) * 3;
      out[std::int64_t(y) * w + x] = buf[s];
      out[plane + std::int64_t(y) * w + x] = buf[s + 1];
      out[2 * plane + std::int64_t(y) * w + x] = buf[s + 2];
    }
  std::free(buf);
  return out;
}

inline void write_frame_png(const std::string& path, const Frame& f) {
  write_png_rgb8(path, to_bytes(f));
}

inline Frame read_frame_png(const std::string& path) {
  return to_unit(read_png_rgb8(path));
}

// Bilinear resampling with edge clamping, per channel.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& img, int oh, int ow) {
  if (img.ndim() != 3) throw std::invalid_argument("resize: need (C,H,W)");
  if (oh < 1 || ow < 1) throw std::invalid_argument("resize: bad size");
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (oh == h && ow == w) return img;
  Tensor<T> out({c, oh, ow});
  const double sy = double(h) / oh;
  const double sx = double(w) / ow;
  for (int y = 0; y < oh; ++y) {
    const double fy = (y + 0.5) * sy - 0.5;
    int y0 = int(std::floor(fy));
    const double wy = fy - y0;
    int y1 = y0 + 1;
    y0 = y0 < 0 ? 0 : (y0 >= h ? h - 1 : y0);
    y1 = y1 < 0 ? 0 : (y1 >= h ? h - 1 : y1);
    for (int x = 0; x < ow; ++x) {
      const double fx = (x + 0.5) * sx - 0.5;
      int x0 = int(std::floor(fx));
      const double wx = fx - x0;
      int x1 = x0 + 1;
      x0 = x0 < 0 ? 0 : (x0 >= w ? w - 1 : x0);
      x1 = x1 < 0 ? 0 : (x1 >= w ? w - 1 : x1);
      for (int ci = 0; ci < c; ++ci) {
        const double v00 = double(img[(std::int64_t(ci) * h + y0) * w + x0]);
        const double v01 = double(img[(std::int64_t(ci) * h + y0) * w + x1]);
        const double v10 = double(img[(std::int64_t(ci) * h + y1) * w + x0]);
        const double v11 = double(img[(std::int64_t(ci) * h + y1) * w + x1]);
        const double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                         wy * ((1 - wx) * v10 + wx * v11);
        out[(std::int64_t(ci) * oh + y) * ow + x] = T(v);
      }
    }
  }
  return out;
}

}  // namespace loopmon
