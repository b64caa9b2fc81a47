#pragma once

// Small deterministic rasterizer for the report figures: grouped distance
// bars, difference-ratio bands and PCA scatter. No text rendering; the
// report's JSON mirror carries the legend.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "catw/workbench/image_io.hpp"

namespace catw {

using Rgb = std::array<std::uint8_t, 3>;

inline const std::vector<Rgb>& plot_palette() {
  static const std::vector<Rgb> p{{{31, 119, 180}}, {{255, 127, 14}}, {{44, 160, 44}},  {{214, 39, 40}},
                                  {{148, 103, 189}}, {{140, 86, 75}},  {{227, 119, 194}}, {{127, 127, 127}},
                                  {{188, 189, 34}},  {{23, 190, 207}}};
  return p;
}

class Canvas {
 public:
  Canvas(std::size_t w, std::size_t h, Rgb bg = {255, 255, 255}) {
    img_.width = w;
    img_.height = h;
    img_.rgb.resize(w * h * 3);
    for (std::size_t i = 0; i < w * h; ++i)
      for (int c = 0; c < 3; ++c) img_.rgb[i * 3 + c] = bg[c];
  }

  void pixel(long x, long y, Rgb c) {
    if (x < 0 || y < 0 || x >= long(img_.width) || y >= long(img_.height)) return;
    for (int k = 0; k < 3; ++k) img_.at(std::size_t(x), std::size_t(y), k) = c[k];
  }
  void fill_rect(long x0, long y0, long x1, long y1, Rgb c) {
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    for (long y = y0; y <= y1; ++y)
      for (long x = x0; x <= x1; ++x) pixel(x, y, c);
  }
  void dot(long x, long y, long r, Rgb c) { fill_rect(x - r, y - r, x + r, y + r, c); }

  std::size_t width() const { return img_.width; }
  std::size_t height() const { return img_.height; }
  const Image8& image() const { return img_; }

 private:
  Image8 img_;
};

/// Maps data y-values to pixel rows inside a plot frame.
struct YAxis {
  double lo, hi;
  long top, bottom;
  long operator()(double v) const {
    const double t = hi > lo ? (v - lo) / (hi - lo) : 0.0;
    return bottom - long(std::lround(t * double(bottom - top)));
  }
};

inline void draw_frame(Canvas& c, long left, long top, long right, long bottom) {
  const Rgb axis{40, 40, 40};
  c.fill_rect(left, top, left, bottom, axis);
  c.fill_rect(left, bottom, right, bottom, axis);
}

/// One bar group per entry; bar colours follow the palette by position.
struct BarGroup {
  std::vector<double> values;
};

inline Image8 plot_grouped_bars(const std::vector<BarGroup>& groups) {
  std::size_t bars = 0;
  double hi = 0.0;
  for (const auto& g : groups) {
    bars = std::max(bars, g.values.size());
    for (double v : g.values)
      if (std::isfinite(v)) hi = std::max(hi, v);
  }
  const long bw = 8, gap = 10, margin = 20, plot_h = 200;
  const long gw = long(bars) * bw + gap;
  Canvas c(std::size_t(2 * margin + long(groups.size()) * gw + gap), std::size_t(plot_h + 2 * margin));
  const YAxis y{0.0, hi > 0 ? hi * 1.1 : 1.0, margin, margin + plot_h};
  // Light horizontal gridlines at quarters.
  for (int q = 1; q <= 4; ++q) c.fill_rect(margin, y(y.hi * q / 4.0), long(c.width()) - margin, y(y.hi * q / 4.0), {225, 225, 225});
  draw_frame(c, margin, margin, long(c.width()) - margin, margin + plot_h);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const long x0 = margin + gap + long(g) * gw;
    for (std::size_t b = 0; b < groups[g].values.size(); ++b) {
      const double v = groups[g].values[b];
      if (!std::isfinite(v)) continue;
      const long x = x0 + long(b) * bw;
      c.fill_rect(x, y(v), x + bw - 2, y(0.0) - 1, plot_palette()[b % plot_palette().size()]);
    }
  }
  return c.image();
}

/// Per column: outer band (widened range), inner band (range) and markers.
struct RatioBand {
  double lo_wide, hi_wide, lo, hi;
  std::vector<double> markers;
};

inline Image8 plot_ratio_bands(const std::vector<RatioBand>& cols) {
  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (const auto& r : cols) {
    std::vector<double> vs{r.lo_wide, r.hi_wide};
    vs.insert(vs.end(), r.markers.begin(), r.markers.end());
    for (double v : vs) {
      if (!std::isfinite(v)) continue;
      lo = first ? v : std::min(lo, v);
      hi = first ? v : std::max(hi, v);
      first = false;
    }
  }
  const double pad = (hi - lo) * 0.1 + 1e-12;
  const long cw = 24, margin = 20, plot_h = 200;
  Canvas c(std::size_t(2 * margin + long(cols.size()) * cw + 8), std::size_t(plot_h + 2 * margin));
  const YAxis y{lo - pad, hi + pad, margin, margin + plot_h};
  draw_frame(c, margin, margin, long(c.width()) - margin, margin + plot_h);
  for (std::size_t i = 0; i < cols.size(); ++i) {
    const long x0 = margin + 6 + long(i) * cw, x1 = x0 + cw - 6;
    c.fill_rect(x0, y(cols[i].hi_wide), x1, y(cols[i].lo_wide), {222, 222, 240});
    c.fill_rect(x0, y(cols[i].hi), x1, y(cols[i].lo), {170, 170, 215});
    for (std::size_t m = 0; m < cols[i].markers.size(); ++m)
      if (std::isfinite(cols[i].markers[m]))
        c.dot((x0 + x1) / 2, y(cols[i].markers[m]), 2, plot_palette()[(m + 3) % plot_palette().size()]);
  }
  return c.image();
}

struct ScatterPoint {
  double x, y;
  std::size_t group;
};

inline Image8 plot_scatter(const std::vector<ScatterPoint>& pts) {
  const long size = 240, margin = 20;
  Canvas c(std::size_t(size + 2 * margin), std::size_t(size + 2 * margin));
  double x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    x0 = i ? std::min(x0, pts[i].x) : pts[i].x;
    x1 = i ? std::max(x1, pts[i].x) : pts[i].x;
    y0 = i ? std::min(y0, pts[i].y) : pts[i].y;
    y1 = i ? std::max(y1, pts[i].y) : pts[i].y;
  }
  const double px = (x1 - x0) * 0.05 + 1e-12, py = (y1 - y0) * 0.05 + 1e-12;
  draw_frame(c, margin, margin, margin + size, margin + size);
  for (const auto& p : pts) {
    const long sx = margin + long(std::lround((p.x - x0 + px) / (x1 - x0 + 2 * px) * size));
    const long sy = margin + size - long(std::lround((p.y - y0 + py) / (y1 - y0 + 2 * py) * size));
    c.dot(sx, sy, 2, plot_palette()[p.group % plot_palette().size()]);
  }
  return c.image();
}

}  // namespace catw
