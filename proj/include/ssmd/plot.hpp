#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "ssmd/detector.hpp"
#include "ssmd/errors.hpp"
#include "ssmd/geometry.hpp"
#include "ssmd/png_io.hpp"

namespace ssmd {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
};

/// Minimal raster canvas for curve plots and detection overlays.
class Canvas {
 public:
  Canvas(int w, int h, Rgb fill = {255, 255, 255}) {
    img_.w = w;
    img_.h = h;
    img_.channels = 3;
    img_.pixels.resize(static_cast<std::size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) set(x, y, fill);
  }

  int width() const { return img_.w; }
  int height() const { return img_.h; }

  void set(int x, int y, Rgb c) {
    if (x < 0 || x >= img_.w || y < 0 || y >= img_.h) return;
    img_.at(y, x, 0) = c.r;
    img_.at(y, x, 1) = c.g;
    img_.at(y, x, 2) = c.b;
  }

  void line(int x0, int y0, int x1, int y1, Rgb c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) { err += dy; x0 += sx; }
      if (e2 <= dx) { err += dx; y0 += sy; }
    }
  }

  void rect(int x0, int y0, int x1, int y1, Rgb c) {
    line(x0, y0, x1, y0, c);
    line(x1, y0, x1, y1, c);
    line(x1, y1, x0, y1, c);
    line(x0, y1, x0, y0, c);
  }

  // 3x5 glyphs for axis labels (digits, '.', '-', '+', 'e').
  void text(int x, int y, const std::string& s, Rgb c) {
    for (char ch : s) {
      draw_glyph(x, y, ch, c);
      x += 4;
    }
  }

  void save(const std::string& path) const { write_png(path, img_); }
  const ImageU8& image() const { return img_; }

 private:
  void draw_glyph(int x, int y, char ch, Rgb c) {
    static const std::map<char, std::array<std::uint8_t, 5>> font = {
        {'0', {0b111, 0b101, 0b101, 0b101, 0b111}}, {'1', {0b010, 0b110, 0b010, 0b010, 0b111}},
        {'2', {0b111, 0b001, 0b111, 0b100, 0b111}}, {'3', {0b111, 0b001, 0b111, 0b001, 0b111}},
        {'4', {0b101, 0b101, 0b111, 0b001, 0b001}}, {'5', {0b111, 0b100, 0b111, 0b001, 0b111}},
        {'6', {0b111, 0b100, 0b111, 0b101, 0b111}}, {'7', {0b111, 0b001, 0b001, 0b010, 0b010}},
        {'8', {0b111, 0b101, 0b111, 0b101, 0b111}}, {'9', {0b111, 0b101, 0b111, 0b001, 0b111}},
        {'.', {0b000, 0b000, 0b000, 0b000, 0b010}}, {'-', {0b000, 0b000, 0b111, 0b000, 0b000}},
        {'+', {0b000, 0b010, 0b111, 0b010, 0b000}}, {'e', {0b000, 0b111, 0b110, 0b100, 0b111}},
    };
    const auto it = font.find(ch);
    if (it == font.end()) return;
    for (int ry = 0; ry < 5; ++ry)
      for (int rx = 0; rx < 3; ++rx)
        if (it->second[static_cast<std::size_t>(ry)] & (1 << (2 - rx))) set(x + rx, y + ry, c);
  }

  ImageU8 img_;
};

namespace detail_plot {

inline std::string short_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

}  // namespace detail_plot

/// Renders one (x, y) series as a polyline with an axes frame and min/max
/// tick labels.
inline void plot_curve(const std::string& path, const std::vector<double>& xs,
                       const std::vector<double>& ys, Rgb color = {30, 90, 200},
                       int width = 640, int height = 420) {
  if (xs.size() != ys.size() || xs.empty())
    throw data_error("plot_curve: need a non-empty series of equal-length x/y");
  Canvas c(width, height);
  const int ml = 46, mr = 12, mt = 12, mb = 26;  // margins
  const int x0 = ml, y0 = mt, x1 = width - mr, y1 = height - mb;
  c.rect(x0, y0, x1, y1, {0, 0, 0});

  double xmin = xs[0], xmax = xs[0], ymin = ys[0], ymax = ys[0];
  for (std::size_t i = 0; i < xs.size(); ++i) {
    xmin = std::min(xmin, xs[i]);
    xmax = std::max(xmax, xs[i]);
    ymin = std::min(ymin, ys[i]);
    ymax = std::max(ymax, ys[i]);
  }
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) ymax = ymin + 1.0;

  auto px = [&](double x) {
    return x0 + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (x1 - x0)));
  };
  auto py = [&](double y) {
    return y1 - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (y1 - y0)));
  };
  for (std::size_t i = 1; i < xs.size(); ++i)
    c.line(px(xs[i - 1]), py(ys[i - 1]), px(xs[i]), py(ys[i]), color);

  c.text(2, y1 - 5, detail_plot::short_number(ymin), {0, 0, 0});
  c.text(2, y0, detail_plot::short_number(ymax), {0, 0, 0});
  c.text(x0, y1 + 8, detail_plot::short_number(xmin), {0, 0, 0});
  c.text(x1 - 30, y1 + 8, detail_plot::short_number(xmax), {0, 0, 0});
  c.save(path);
}

/// Grayscale image with ground truth (blue) and detections (green) boxes.
inline void plot_overlay(const std::string& path, const Tensor& raw_image,
                         const std::vector<Box>& gt_boxes,
                         const std::vector<Detection>& detections) {
  Canvas c(raw_image.w, raw_image.h);
  for (int y = 0; y < raw_image.h; ++y)
    for (int x = 0; x < raw_image.w; ++x) {
      const double v = std::min(1.0, std::max(0.0, raw_image.at(0, y, x)));
      const auto g = static_cast<std::uint8_t>(std::lround(v * 255.0));
      c.set(x, y, {g, g, g});
    }
  auto draw_box = [&](const Box& b, Rgb col) {
    const CornerBox cb = to_corner(b);
    c.rect(static_cast<int>(std::lround(cb.x1)), static_cast<int>(std::lround(cb.y1)),
           static_cast<int>(std::lround(cb.x2)) - 1, static_cast<int>(std::lround(cb.y2)) - 1,
           col);
  };
  for (const auto& b : gt_boxes) draw_box(b, {70, 120, 255});
  for (const auto& d : detections) draw_box(d.box, {40, 210, 60});
  c.save(path);
}

}  // namespace ssmd
