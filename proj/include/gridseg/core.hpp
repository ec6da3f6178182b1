#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridseg {

/** @brief Axis-aligned box in normalized image coordinates (center + extent). */
struct BoundingBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x0() const { return cx - 0.5 * w; }
  double x1() const { return cx + 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }
};

/** @brief Dense binary mask, row-major, one byte per pixel (0 or 1). */
struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
  void set(int x, int y, std::uint8_t v) { data[static_cast<std::size_t>(y) * width + x] = v; }

  long long count() const {
    long long n = 0;
    for (std::uint8_t v : data) n += v ? 1 : 0;
    return n;
  }
  bool empty_foreground() const { return count() == 0; }
};

/** @brief Run-length encoded mask: alternating background/foreground run lengths. */
struct RleMask {
  int width = 0;
  int height = 0;
  std::vector<long long> runs;  // runs[0] counts background pixels, possibly 0
};

struct Annotation {
  int class_id = 0;
  BoundingBox bbox;
  BinaryMask mask;
};

struct Detection {
  int class_id = 0;
  double confidence = 0.0;
  BoundingBox bbox;
  std::optional<BinaryMask> mask;
};

/** @brief Intersection-over-union of two boxes; 0 when the union is empty. */
inline double iou_box(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/** @brief Intersection-over-union of two same-sized masks; 1 when both are empty. */
inline double iou_mask(const BinaryMask& a, const BinaryMask& b) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("iou_mask: dimension mismatch");
  long long inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool pa = a.data[i] != 0, pb = b.data[i] != 0;
    inter += (pa && pb) ? 1 : 0;
    uni += (pa || pb) ? 1 : 0;
  }
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

/** @brief Tight normalized box around the set pixels; the mask must be nonempty. */
inline BoundingBox tight_box(const BinaryMask& m) {
  int x0 = m.width, y0 = m.height, x1 = -1, y1 = -1;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(x, y)) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) throw std::invalid_argument("tight_box: empty mask");
  BoundingBox b;
  b.cx = 0.5 * (x0 + x1 + 1) / m.width;
  b.cy = 0.5 * (y0 + y1 + 1) / m.height;
  b.w = static_cast<double>(x1 + 1 - x0) / m.width;
  b.h = static_cast<double>(y1 + 1 - y0) / m.height;
  return b;
}

struct PixelRect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open

  int w() const { return x1 - x0; }
  int h() const { return y1 - y0; }
  bool empty() const { return w() <= 0 || h() <= 0; }
};

/** @brief Box mapped to integer pixel bounds, rounded to nearest and clamped to the image. */
inline PixelRect pixel_rect(const BoundingBox& box, int image_w, int image_h) {
  PixelRect r;
  r.x0 = std::clamp(static_cast<int>(std::lround(box.x0() * image_w)), 0, image_w);
  r.x1 = std::clamp(static_cast<int>(std::lround(box.x1() * image_w)), 0, image_w);
  r.y0 = std::clamp(static_cast<int>(std::lround(box.y0() * image_h)), 0, image_h);
  r.y1 = std::clamp(static_cast<int>(std::lround(box.y1() * image_h)), 0, image_h);
  return r;
}

/** @brief Area-weighted resampling of a real-valued grid (box filter, exact overlap weights). */
inline std::vector<double> resample_area(const std::vector<double>& src, int in_w, int in_h,
                                         int out_w, int out_h) {
  if (in_w <= 0 || in_h <= 0 || out_w <= 0 || out_h <= 0)
    throw std::invalid_argument("resample_area: non-positive dimension");
  // Horizontal pass.
  std::vector<double> tmp(static_cast<std::size_t>(out_w) * in_h, 0.0);
  const double sx = static_cast<double>(in_w) / out_w;
  for (int ox = 0; ox < out_w; ++ox) {
    const double lo = ox * sx, hi = (ox + 1) * sx;
    const int first = static_cast<int>(std::floor(lo));
    const int last = std::min(in_w - 1, static_cast<int>(std::ceil(hi)) - 1);
    for (int ix = first; ix <= last; ++ix) {
      const double overlap = std::min(hi, static_cast<double>(ix + 1)) - std::max(lo, static_cast<double>(ix));
      if (overlap <= 0.0) continue;
      const double wgt = overlap / sx;
      for (int y = 0; y < in_h; ++y)
        tmp[static_cast<std::size_t>(y) * out_w + ox] += wgt * src[static_cast<std::size_t>(y) * in_w + ix];
    }
  }
  // Vertical pass.
  std::vector<double> out(static_cast<std::size_t>(out_w) * out_h, 0.0);
  const double sy = static_cast<double>(in_h) / out_h;
  for (int oy = 0; oy < out_h; ++oy) {
    const double lo = oy * sy, hi = (oy + 1) * sy;
    const int first = static_cast<int>(std::floor(lo));
    const int last = std::min(in_h - 1, static_cast<int>(std::ceil(hi)) - 1);
    for (int iy = first; iy <= last; ++iy) {
      const double overlap = std::min(hi, static_cast<double>(iy + 1)) - std::max(lo, static_cast<double>(iy));
      if (overlap <= 0.0) continue;
      const double wgt = overlap / sy;
      for (int x = 0; x < out_w; ++x)
        out[static_cast<std::size_t>(oy) * out_w + x] += wgt * tmp[static_cast<std::size_t>(iy) * out_w + x];
    }
  }
  return out;
}

/** @brief Crop the box region out of a mask and resample it to side x side.
 *
 * The crop window is the box rounded to pixel bounds and clamped to the image;
 * a window that degenerates to zero area is an error.
 */
inline BinaryMask crop_resize_mask(const BinaryMask& mask, const BoundingBox& box, int side) {
  if (side <= 0) throw std::invalid_argument("crop_resize_mask: side must be positive");
  const PixelRect r = pixel_rect(box, mask.width, mask.height);
  if (r.empty()) throw std::invalid_argument("crop_resize_mask: box does not cover any pixel");
  std::vector<double> crop(static_cast<std::size_t>(r.w()) * r.h());
  for (int y = 0; y < r.h(); ++y)
    for (int x = 0; x < r.w(); ++x)
      crop[static_cast<std::size_t>(y) * r.w() + x] = mask.at(r.x0 + x, r.y0 + y) ? 1.0 : 0.0;
  const std::vector<double> res = resample_area(crop, r.w(), r.h(), side, side);
  BinaryMask out(side, side);
  for (std::size_t i = 0; i < res.size(); ++i) out.data[i] = res[i] >= 0.5 ? 1 : 0;
  return out;
}

/** @brief Paste a square code mask into the box region of a blank image-sized canvas.
 *
 * Boxes may extend past the image edge; only the clamped window receives pixels.
 */
inline BinaryMask paste_mask(const BinaryMask& code_mask, const BoundingBox& box, int image_w,
                             int image_h) {
  BinaryMask canvas(image_w, image_h);
  const PixelRect r = pixel_rect(box, image_w, image_h);
  if (r.empty()) return canvas;
  std::vector<double> src(code_mask.data.size());
  for (std::size_t i = 0; i < src.size(); ++i) src[i] = code_mask.data[i] ? 1.0 : 0.0;
  const std::vector<double> res = resample_area(src, code_mask.width, code_mask.height, r.w(), r.h());
  for (int y = 0; y < r.h(); ++y)
    for (int x = 0; x < r.w(); ++x)
      canvas.set(r.x0 + x, r.y0 + y, res[static_cast<std::size_t>(y) * r.w() + x] >= 0.5 ? 1 : 0);
  return canvas;
}

/** @brief Row-major run-length encoding; the first run counts background pixels. */
inline RleMask rle_encode(const BinaryMask& mask) {
  RleMask rle;
  rle.width = mask.width;
  rle.height = mask.height;
  std::uint8_t current = 0;
  long long run = 0;
  for (std::uint8_t v : mask.data) {
    const std::uint8_t bit = v ? 1 : 0;
    if (bit == current) {
      ++run;
    } else {
      rle.runs.push_back(run);
      current = bit;
      run = 1;
    }
  }
  rle.runs.push_back(run);
  if (mask.data.empty()) rle.runs.assign(1, 0);
  return rle;
}

/** @brief Inverse of rle_encode; run lengths must tile the mask exactly. */
inline BinaryMask rle_decode(const RleMask& rle) {
  long long total = 0;
  for (long long r : rle.runs) {
    if (r < 0) throw std::invalid_argument("rle_decode: negative run length");
    total += r;
  }
  const long long expect = static_cast<long long>(rle.width) * rle.height;
  if (total != expect) throw std::invalid_argument("rle_decode: runs do not sum to width*height");
  BinaryMask mask(rle.width, rle.height);
  std::size_t pos = 0;
  std::uint8_t bit = 0;
  for (long long r : rle.runs) {
    for (long long k = 0; k < r; ++k) mask.data[pos++] = bit;
    bit = bit ? 0 : 1;
  }
  return mask;
}

/** @brief Tight normalized box around mask foreground; empty optional for empty masks. */
inline std::optional<BoundingBox> tight_bbox(const BinaryMask& mask) {
  int min_x = mask.width, min_y = mask.height, max_x = -1, max_y = -1;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(x, y)) {
        min_x = std::min(min_x, x);
        min_y = std::min(min_y, y);
        max_x = std::max(max_x, x);
        max_y = std::max(max_y, y);
      }
  if (max_x < 0) return std::nullopt;
  BoundingBox box;
  box.w = static_cast<double>(max_x - min_x + 1) / mask.width;
  box.h = static_cast<double>(max_y - min_y + 1) / mask.height;
  box.cx = (min_x + max_x + 1) * 0.5 / mask.width;
  box.cy = (min_y + max_y + 1) * 0.5 / mask.height;
  return box;
}

}  // namespace gridseg
