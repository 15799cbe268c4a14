#pragma once

// Grayscale PNG/PGM reading and PNG writing for the command-line tool.
// Pixel values are returned as display-domain floats in [0, 1].

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "dualburst/errors.hpp"
#include "dualburst/sensor.hpp"
#include "dualburst/tensor.hpp"

namespace dualburst::io {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

}  // namespace detail

inline TensorF read_png(const std::filesystem::path& path) {
  auto file = detail::open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw FormatError(path.string() + ": not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng initialisation failed");
  }
  std::vector<png_bytep> rows;
  std::vector<unsigned char> data;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path.string() + ": corrupt PNG data");
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  // Normalise every colour type to 1 channel of 8 or 16 bits.
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_PALETTE || (color & PNG_COLOR_MASK_COLOR)) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  png_set_swap(png);  // 16-bit samples in host (little-endian) order
  png_read_update_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  data.resize(stride * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = data.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  TensorF out({h, w});
  for (png_uint_32 y = 0; y < h; ++y) {
    for (png_uint_32 x = 0; x < w; ++x) {
      if (depth == 16) {
        const auto* p = reinterpret_cast<const std::uint16_t*>(rows[y]);
        out(y, x) = static_cast<float>(p[x] / 65535.0);
      } else {
        out(y, x) = static_cast<float>(rows[y][x] / 255.0);
      }
    }
  }
  return out;
}

// Binary (P5) or plain (P2) PGM, 8 or 16 bit.
inline TensorF read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string magic;
  is >> magic;
  if (magic != "P5" && magic != "P2") throw FormatError(path.string() + ": not a PGM file");
  auto next_int = [&]() {
    for (;;) {
      is >> std::ws;
      if (is.peek() == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      long v = -1;
      if (!(is >> v)) throw FormatError(path.string() + ": bad PGM header");
      return v;
    }
  };
  const long w = next_int(), h = next_int(), maxval = next_int();
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw FormatError(path.string() + ": bad PGM header");
  TensorF out({static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  if (magic == "P2") {
    for (auto& v : out.values()) v = static_cast<float>(static_cast<double>(next_int()) / maxval);
    return out;
  }
  is.get();  // single whitespace byte before the raster
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(out.size() * bytes);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw CorruptionError(path.string() + ": truncated PGM raster");
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const unsigned v = bytes == 2 ? (raw[2 * i] << 8 | raw[2 * i + 1]) : raw[i];
    out[i] = static_cast<float>(static_cast<double>(v) / maxval);
  }
  return out;
}

inline TensorF read_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".png" || ext == ".PNG") return read_png(path);
  if (ext == ".pgm" || ext == ".PGM") return read_pgm(path);
  throw FormatError(path.string() + ": unsupported image type (expected .png or .pgm)");
}

inline void write_png(const std::filesystem::path& path, const TensorF& image, int bit_depth) {
  if (image.ndim() != 2) throw DomainError("write_png expects a 2-d image");
  const auto codes = quantize(image, bit_depth);
  const auto h = static_cast<png_uint_32>(image.shape()[0]);
  const auto w = static_cast<png_uint_32>(image.shape()[1]);
  auto file = detail::open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialisation failed");
  }
  const std::size_t bytes = bit_depth == 16 ? 2 : 1;
  std::vector<unsigned char> data(codes.size() * bytes);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (bytes == 2) {
      data[2 * i] = static_cast<unsigned char>(codes[i] >> 8);  // PNG is big-endian
      data[2 * i + 1] = static_cast<unsigned char>(codes[i] & 0xFF);
    } else {
      data[i] = static_cast<unsigned char>(codes[i]);
    }
  }
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = data.data() + y * w * bytes;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("cannot write " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, w, h, bit_depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace dualburst::io
