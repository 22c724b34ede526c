#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "tide/errors.hpp"
#include "tide/geometry.hpp"
#include "tide/rng.hpp"

namespace tide {

// Planar float image, values nominally in [0,1]: px[(c*height + y)*width + x].
struct Image {
  std::size_t channels = 3, height = 0, width = 0;
  std::vector<double> px;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0) : channels(c), height(h), width(w), px(c * h * w, fill) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) { return px[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return px[(c * height + y) * width + x]; }
  bool empty() const { return px.empty(); }
  bool operator==(const Image&) const = default;
};

// Bilinear resize with half-pixel centers. Same-size resize is an exact
// copy and constant images stay exactly constant.
inline Image resize_bilinear(const Image& in, std::size_t out_h, std::size_t out_w) {
  if (in.height == 0 || in.width == 0 || out_h == 0 || out_w == 0) throw DimError("resize of empty image");
  Image out(in.channels, out_h, out_w);
  auto coord = [](std::size_t o, std::size_t n_in, std::size_t n_out, std::size_t& lo, std::size_t& hi, double& f) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n_in - 1));
    lo = static_cast<std::size_t>(std::floor(s));
    hi = std::min(lo + 1, n_in - 1);
    f = s - static_cast<double>(lo);
  };
  std::vector<std::size_t> x0(out_w), x1(out_w);
  std::vector<double> fx(out_w);
  for (std::size_t x = 0; x < out_w; ++x) coord(x, in.width, out_w, x0[x], x1[x], fx[x]);
  for (std::size_t c = 0; c < in.channels; ++c)
    for (std::size_t y = 0; y < out_h; ++y) {
      std::size_t y0, y1;
      double fy;
      coord(y, in.height, out_h, y0, y1, fy);
      for (std::size_t x = 0; x < out_w; ++x) {
        const double a = in.at(c, y0, x0[x]), b = in.at(c, y0, x1[x]);
        const double cc = in.at(c, y1, x0[x]), d = in.at(c, y1, x1[x]);
        const double top = a == b ? a : a + fx[x] * (b - a);
        const double bot = cc == d ? cc : cc + fx[x] * (d - cc);
        out.at(c, y, x) = top == bot ? top : top + fy * (bot - top);
      }
    }
  return out;
}

// Crops the pixel region covered by a CornerAbs box (no context padding).
// The region always contains at least one pixel.
inline Image crop(const Image& in, const BoundingBox& box) {
  if (box.format != BoxFormat::CornerAbs) throw FormatError("crop expects a CornerAbs box");
  const auto W = static_cast<double>(in.width), H = static_cast<double>(in.height);
  auto x1 = static_cast<std::size_t>(std::clamp(std::floor(box.v[0]), 0.0, W - 1));
  auto y1 = static_cast<std::size_t>(std::clamp(std::floor(box.v[1]), 0.0, H - 1));
  auto x2 = static_cast<std::size_t>(std::clamp(std::ceil(box.v[2]), 0.0, W));
  auto y2 = static_cast<std::size_t>(std::clamp(std::ceil(box.v[3]), 0.0, H));
  x2 = std::max(x2, x1 + 1);
  y2 = std::max(y2, y1 + 1);
  Image out(in.channels, y2 - y1, x2 - x1);
  for (std::size_t c = 0; c < in.channels; ++c)
    for (std::size_t y = y1; y < y2; ++y)
      for (std::size_t x = x1; x < x2; ++x) out.at(c, y - y1, x - x1) = in.at(c, y, x);
  return out;
}

inline Image flip_horizontal(const Image& in) {
  Image out = in;
  for (std::size_t c = 0; c < in.channels; ++c)
    for (std::size_t y = 0; y < in.height; ++y)
      for (std::size_t x = 0; x < in.width; ++x) out.at(c, y, x) = in.at(c, y, in.width - 1 - x);
  return out;
}

// ---------------------------------------------------------------- file I/O

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline Image read_pnm(const std::string& path, const std::string& buf) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < buf.size()) {
      if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
        ++pos;
      } else if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
    if (start == pos) throw IOError("truncated PNM header in '" + path + "'");
    return buf.substr(start, pos - start);
  };
  const std::string magic = token();
  const bool color = magic == "P6" || magic == "P3";
  const bool binary = magic == "P6" || magic == "P5";
  if (magic != "P6" && magic != "P5" && magic != "P3" && magic != "P2") throw IOError("unsupported PNM type in '" + path + "'");
  std::size_t w, h;
  int maxval;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoi(token());
  } catch (const std::logic_error&) {
    throw IOError("malformed PNM header in '" + path + "'");
  }
  if (w == 0 || h == 0 || maxval <= 0 || maxval > 255) throw IOError("unsupported PNM geometry in '" + path + "'");
  const std::size_t ch = color ? 3 : 1;
  Image img(3, h, w);
  std::vector<int> raw(w * h * ch);
  if (binary) {
    ++pos;  // single whitespace after maxval
    if (buf.size() < pos + raw.size()) throw IOError("truncated PNM data in '" + path + "'");
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<unsigned char>(buf[pos + i]);
  } else {
    for (auto& r : raw) r = std::stoi(token());
  }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(c, y, x) = raw[(y * w + x) * ch + (ch == 3 ? c : 0)] / static_cast<double>(maxval);
  return img;
}

inline Image read_png(const std::string& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) throw IOError("cannot decode PNG '" + path + "'");
  png.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&png);
    throw IOError("cannot decode PNG '" + path + "'");
  }
  Image img(3, png.height, png.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = buf[(y * img.width + x) * 3 + c] / 255.0;
  return img;
}

inline unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace detail

// Reads PPM/PGM (binary or ASCII) or PNG into a 3-channel image in [0,1].
inline Image read_image(const std::string& path) {
  const std::string buf = detail::read_file(path);
  if (buf.size() >= 8 && static_cast<unsigned char>(buf[0]) == 0x89 && buf.compare(1, 3, "PNG") == 0)
    return detail::read_png(path);
  if (buf.size() >= 2 && buf[0] == 'P') return detail::read_pnm(path, buf);
  throw IOError("unrecognized image format '" + path + "'");
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open '" + path + "' for writing");
  f << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) f.put(static_cast<char>(detail::to_byte(img.at(std::min(c, img.channels - 1), y, x))));
  if (!f) throw IOError("write failed for '" + path + "'");
}

// Single-channel grayscale, values in [0,1].
inline void write_pgm(const std::string& path, const std::vector<double>& gray, std::size_t h, std::size_t w) {
  if (gray.size() != h * w) throw DimError("write_pgm: size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open '" + path + "' for writing");
  f << "P5\n" << w << ' ' << h << "\n255\n";
  for (double v : gray) f.put(static_cast<char>(detail::to_byte(v)));
  if (!f) throw IOError("write failed for '" + path + "'");
}

}  // namespace tide
