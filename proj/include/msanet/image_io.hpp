// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "msanet/tensor.hpp"

namespace msanet {

// Image tensors are (1, C, H, W) floats in [0,1]; files are 8-bit PNG
// (gray or RGB) or binary PGM/PPM. Quantization rounds half away from zero
// after clamping to [0,1].

inline std::uint8_t quantize_u8(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

namespace detail {

inline std::string lower_ext(const std::string& path) {
  std::string ext = std::filesystem::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

inline Tensor from_interleaved_u8(const std::vector<std::uint8_t>& bytes, int channels, int h, int w) {
  Tensor t = Tensor::zeros(Shape(1, channels, h, w));
  float* p = t.data();
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (std::int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < channels; ++c)
      p[c * plane + i] = static_cast<float>(bytes[static_cast<std::size_t>(i * channels + c)]) / 255.0f;
  return t;
}

inline std::vector<std::uint8_t> to_interleaved_u8(const Tensor& t) {
  const Shape& s = t.shape();
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(s.c) * s.h * s.w);
  const float* p = t.data();
  const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
  for (std::int64_t i = 0; i < plane; ++i)
    for (int c = 0; c < s.c; ++c) bytes[static_cast<std::size_t>(i * s.c + c)] = quantize_u8(p[c * plane + i]);
  return bytes;
}

struct PngReadCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadCloser() { png_destroy_read_struct(&png, &info, nullptr); }
};

struct PngWriteCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteCloser() { png_destroy_write_struct(&png, &info); }
};

struct FileCloser {
  std::FILE* f = nullptr;
  ~FileCloser() {
    if (f != nullptr) std::fclose(f);
  }
};

inline Tensor load_png(const std::string& path) {
  FileCloser file{std::fopen(path.c_str(), "rb")};
  if (file.f == nullptr) throw IoError("cannot open " + path);

  png_byte header[8];
  if (std::fread(header, 1, 8, file.f) != 8 || png_sig_cmp(header, 0, 8) != 0) {
    throw FormatError(path + " is not a PNG file");
  }

  PngReadCloser ctx;
  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  ctx.info = ctx.png == nullptr ? nullptr : png_create_info_struct(ctx.png);
  if (ctx.info == nullptr) throw IoError("libpng allocation failed");
  if (setjmp(png_jmpbuf(ctx.png))) throw FormatError("libpng failed to decode " + path);

  png_init_io(ctx.png, file.f);
  png_set_sig_bytes(ctx.png, 8);
  png_read_info(ctx.png, ctx.info);

  const png_uint_32 w = png_get_image_width(ctx.png, ctx.info);
  const png_uint_32 h = png_get_image_height(ctx.png, ctx.info);
  const int bit_depth = png_get_bit_depth(ctx.png, ctx.info);
  const int color_type = png_get_color_type(ctx.png, ctx.info);

  if (bit_depth == 16) throw FormatError(path + ": 16-bit PNG not supported");
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(ctx.png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(ctx.png);
  // Alpha, if any, is dropped; images are treated as opaque.
  if ((color_type & PNG_COLOR_MASK_ALPHA) != 0) png_set_strip_alpha(ctx.png);
  if (png_get_valid(ctx.png, ctx.info, PNG_INFO_tRNS)) png_set_strip_alpha(ctx.png);
  png_read_update_info(ctx.png, ctx.info);

  const int channels = png_get_channels(ctx.png, ctx.info);
  if (channels != 1 && channels != 3) {
    throw FormatError(path + ": unsupported channel count " + std::to_string(channels));
  }

  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h * static_cast<std::size_t>(channels));
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = bytes.data() + static_cast<std::size_t>(y) * w * static_cast<std::size_t>(channels);
  png_read_image(ctx.png, rows.data());
  png_read_end(ctx.png, nullptr);

  return from_interleaved_u8(bytes, channels, static_cast<int>(h), static_cast<int>(w));
}

inline void save_png(const Tensor& t, const std::string& path) {
  const Shape& s = t.shape();
  FileCloser file{std::fopen(path.c_str(), "wb")};
  if (file.f == nullptr) throw IoError("cannot write " + path);

  PngWriteCloser ctx;
  ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  ctx.info = ctx.png == nullptr ? nullptr : png_create_info_struct(ctx.png);
  if (ctx.info == nullptr) throw IoError("libpng allocation failed");
  if (setjmp(png_jmpbuf(ctx.png))) throw IoError("libpng failed to encode " + path);

  png_init_io(ctx.png, file.f);
  png_set_IHDR(ctx.png, ctx.info, static_cast<png_uint_32>(s.w), static_cast<png_uint_32>(s.h), 8,
               s.c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(ctx.png, ctx.info);

  std::vector<std::uint8_t> bytes = to_interleaved_u8(t);
  std::vector<png_bytep> rows(static_cast<std::size_t>(s.h));
  for (int y = 0; y < s.h; ++y) rows[static_cast<std::size_t>(y)] = bytes.data() + static_cast<std::size_t>(y) * s.w * static_cast<std::size_t>(s.c);
  png_write_image(ctx.png, rows.data());
  png_write_end(ctx.png, nullptr);
}

// Binary PGM (P5) / PPM (P6), maxval 255.
inline Tensor load_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6") throw FormatError(path + ": unsupported PNM magic '" + magic + "'");
  const int channels = magic == "P5" ? 1 : 3;

  const auto next_int = [&in, &path]() {
    // skip whitespace and '#' comment lines
    for (;;) {
      const int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    int v = 0;
    if (!(in >> v)) throw FormatError(path + ": truncated PNM header");
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (maxval != 255) throw FormatError(path + ": only maxval 255 supported");
  in.get();  // single whitespace after header

  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h * static_cast<std::size_t>(channels));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw FormatError(path + ": truncated PNM payload");
  }
  return from_interleaved_u8(bytes, channels, h, w);
}

inline void save_pnm(const Tensor& t, const std::string& path) {
  const Shape& s = t.shape();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << (s.c == 1 ? "P5" : "P6") << "\n" << s.w << " " << s.h << "\n255\n";
  std::vector<std::uint8_t> bytes = to_interleaved_u8(t);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

}  // namespace detail

inline Tensor load_image(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path);
  const std::string ext = detail::lower_ext(path);
  if (ext == ".png") return detail::load_png(path);
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return detail::load_pnm(path);
  throw FormatError("unsupported image format: " + path);
}

inline void save_image(const Tensor& t, const std::string& path) {
  const Shape& s = t.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3)) {
    throw ShapeError("save_image expects (1,1,H,W) or (1,3,H,W), got " + s.str());
  }
  const std::string ext = detail::lower_ext(path);
  if (ext == ".png") {
    detail::save_png(t, path);
  } else if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") {
    if (ext == ".pgm" && s.c != 1) throw FormatError("PGM requires a grayscale tensor");
    if (ext == ".ppm" && s.c != 3) throw FormatError("PPM requires an RGB tensor");
    detail::save_pnm(t, path);
  } else {
    throw FormatError("unsupported image format: " + path);
  }
}

// ITU-R BT.601 luma weights.
inline Tensor to_grayscale(const Tensor& rgb) {
  const Shape& s = rgb.shape();
  if (s.c == 1) return rgb;
  if (s.c != 3) throw ShapeError("to_grayscale expects 1 or 3 channels");
  Tensor out = Tensor::zeros(Shape(s.n, 1, s.h, s.w));
  const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    const float* r = rgb.data() + static_cast<std::int64_t>(n) * 3 * plane;
    const float* g = r + plane;
    const float* b = g + plane;
    float* o = out.data() + static_cast<std::int64_t>(n) * plane;
    for (std::int64_t i = 0; i < plane; ++i) o[i] = 0.299f * r[i] + 0.587f * g[i] + 0.114f * b[i];
  }
  return out;
}

}  // namespace msanet
