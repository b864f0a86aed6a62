#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "errors.hpp"

namespace swapvae {

// 8-bit RGB image, row-major.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}
  void set(int x, int y, std::array<std::uint8_t, 3> c) {
    auto* p = &pixels[(static_cast<std::size_t>(y) * width + x) * 3];
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }
};

inline std::string encode_png(const RgbImage& img) {
  auto be32 = [](std::string& s, std::uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8) s.push_back(static_cast<char>((v >> shift) & 0xff));
  };
  auto chunk = [&](std::string& out, const char* type, const std::string& data) {
    be32(out, static_cast<std::uint32_t>(data.size()));
    std::string body(type, 4);
    body += data;
    out += body;
    be32(out, static_cast<std::uint32_t>(crc32(0, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
  };
  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  be32(ihdr, static_cast<std::uint32_t>(img.width));
  be32(ihdr, static_cast<std::uint32_t>(img.height));
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);  // 8-bit RGB, no interlace
  chunk(out, "IHDR", ihdr);
  std::string raw;
  const std::size_t stride = static_cast<std::size_t>(img.width) * 3;
  for (int y = 0; y < img.height; ++y) {
    raw.push_back('\0');
    raw.append(reinterpret_cast<const char*>(&img.pixels[y * stride]), stride);
  }
  uLongf size = compressBound(static_cast<uLong>(raw.size()));
  std::string packed(size, '\0');
  if (compress2(reinterpret_cast<Bytef*>(packed.data()), &size, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw DataError("png compression failed");
  }
  packed.resize(size);
  chunk(out, "IDAT", packed);
  chunk(out, "IEND", "");
  return out;
}

inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const auto bytes = encode_png(img);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Dark blue -> teal -> yellow ramp for t in [0, 1].
inline std::array<std::uint8_t, 3> heat_color(double t) {
  static constexpr std::array<std::array<double, 3>, 5> stops{{{0.27, 0.00, 0.33},
                                                               {0.23, 0.32, 0.55},
                                                               {0.13, 0.57, 0.55},
                                                               {0.37, 0.79, 0.38},
                                                               {0.99, 0.91, 0.14}}};
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0) * (stops.size() - 1);
  const auto i = std::min(static_cast<std::size_t>(t), stops.size() - 2);
  const double f = t - static_cast<double>(i);
  std::array<std::uint8_t, 3> c{};
  for (int k = 0; k < 3; ++k) {
    c[k] = static_cast<std::uint8_t>(std::lround(255.0 * (stops[i][k] * (1 - f) + stops[i + 1][k] * f)));
  }
  return c;
}

// rows x cols matrix as a heat map, each cell `cell` pixels wide, scaled by
// the global maximum.
inline RgbImage heatmap(const std::vector<double>& values, int rows, int cols, int cell = 16) {
  require(values.size() == static_cast<std::size_t>(rows) * cols, "heatmap size mismatch");
  double hi = 0;
  for (double v : values) hi = std::max(hi, v);
  RgbImage img(cols * cell, rows * cell);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const auto color = heat_color(hi > 0 ? values[static_cast<std::size_t>(r) * cols + c] / hi : 0.0);
      for (int y = 0; y < cell; ++y) {
        for (int x = 0; x < cell; ++x) img.set(c * cell + x, r * cell + y, color);
      }
    }
  }
  return img;
}

}  // namespace swapvae
