#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "gridseg/core.hpp"

namespace gridseg {

/** @brief Real-valued grid, row-major. */
struct RealGrid {
  int width = 0;
  int height = 0;
  std::vector<double> v;

  RealGrid() = default;
  RealGrid(int w, int h) : width(w), height(h), v(static_cast<std::size_t>(w) * h, 0.0) {}

  double at(int x, int y) const { return v[static_cast<std::size_t>(y) * width + x]; }
  double& at(int x, int y) { return v[static_cast<std::size_t>(y) * width + x]; }
};

struct DtConfig {
  int levels = 8;
  int mask_side = 64;
};

struct RadialConfig {
  int n_angles = 32;
};

struct BinaryConfig {
  int side = 16;
};

namespace detail {

// One-dimensional squared-distance transform (lower envelope of parabolas).
inline void dt1d(const double* f, double* d, int n, int* v, double* z) {
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + static_cast<double>(q) * q) - (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
               (2.0 * q - 2.0 * v[k]);
    while (s <= z[k]) {
      --k;
      s = ((f[q] + static_cast<double>(q) * q) - (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
          (2.0 * q - 2.0 * v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace detail

/** @brief Exact Euclidean distance to the nearest background pixel center.
 *
 * Pixels outside the image count as background, so the transform runs on a
 * one-pixel padded grid; one ring is enough because the nearest outside pixel
 * always lies on the adjacent border line.
 */
inline RealGrid dt_euclidean(const BinaryMask& mask) {
  const int pw = mask.width + 2, ph = mask.height + 2;
  // Large finite stand-in for "no source here": true infinity would turn the
  // envelope intersections in dt1d into inf - inf = NaN.
  const double far = 1e20;
  std::vector<double> sq(static_cast<std::size_t>(pw) * ph, 0.0);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      sq[static_cast<std::size_t>(y + 1) * pw + (x + 1)] = mask.at(x, y) ? far : 0.0;

  const int n = std::max(pw, ph);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> vtx(n);
  for (int y = 0; y < ph; ++y) {
    double* row = sq.data() + static_cast<std::size_t>(y) * pw;
    detail::dt1d(row, d.data(), pw, vtx.data(), z.data());
    std::copy(d.begin(), d.begin() + pw, row);
  }
  for (int x = 0; x < pw; ++x) {
    for (int y = 0; y < ph; ++y) f[y] = sq[static_cast<std::size_t>(y) * pw + x];
    detail::dt1d(f.data(), d.data(), ph, vtx.data(), z.data());
    for (int y = 0; y < ph; ++y) sq[static_cast<std::size_t>(y) * pw + x] = d[y];
  }

  RealGrid out(mask.width, mask.height);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      out.at(x, y) = std::sqrt(sq[static_cast<std::size_t>(y + 1) * pw + (x + 1)]);
  return out;
}

/** @brief Nested level masks: mask r holds pixels whose distance is at least r (r = 1..levels). */
inline std::vector<BinaryMask> dt_quantize(const RealGrid& dt, const DtConfig& cfg) {
  if (cfg.levels < 1) throw std::invalid_argument("dt_quantize: levels must be >= 1");
  std::vector<BinaryMask> masks;
  masks.reserve(cfg.levels);
  for (int r = 1; r <= cfg.levels; ++r) {
    BinaryMask m(dt.width, dt.height);
    for (std::size_t i = 0; i < dt.v.size(); ++i) m.data[i] = dt.v[i] >= static_cast<double>(r) ? 1 : 0;
    masks.push_back(std::move(m));
  }
  return masks;
}

namespace detail {

// Offsets strictly inside a disc of the given radius.
inline const std::vector<std::pair<int, int>>& disc_offsets(int radius) {
  static std::vector<std::vector<std::pair<int, int>>> cache;
  if (radius >= static_cast<int>(cache.size())) cache.resize(radius + 1);
  auto& offs = cache[static_cast<std::size_t>(radius)];
  if (offs.empty() && radius >= 1) {
    for (int dy = -radius + 1; dy <= radius - 1; ++dy)
      for (int dx = -radius + 1; dx <= radius - 1; ++dx)
        if (dx * dx + dy * dy < radius * radius) offs.emplace_back(dx, dy);
  }
  return offs;
}

}  // namespace detail

/** @brief Union of open discs: every level-r pixel stamps the pixels closer than r to it.
 *
 * Together with dt_quantize this is an exact round trip: each foreground pixel
 * sits at distance >= 1 and stamps itself, while a stamp that reached a
 * background pixel would contradict the stamping pixel's own distance.
 */
inline BinaryMask dt_reconstruct(const std::vector<BinaryMask>& levels, const DtConfig& cfg) {
  if (static_cast<int>(levels.size()) != cfg.levels)
    throw std::invalid_argument("dt_reconstruct: expected one mask per level");
  if (levels.empty()) throw std::invalid_argument("dt_reconstruct: no levels");
  const int w = levels[0].width, h = levels[0].height;
  for (const auto& m : levels)
    if (m.width != w || m.height != h)
      throw std::invalid_argument("dt_reconstruct: level dimension mismatch");
  for (std::size_t r = 1; r < levels.size(); ++r)
    for (std::size_t i = 0; i < levels[r].data.size(); ++i)
      if (levels[r].data[i] && !levels[r - 1].data[i])
        throw std::invalid_argument("dt_reconstruct: levels are not nested");

  // Per pixel only the deepest level matters; its disc contains the others.
  std::vector<int> depth(static_cast<std::size_t>(w) * h, 0);
  for (int r = static_cast<int>(levels.size()); r >= 1; --r)
    for (std::size_t i = 0; i < depth.size(); ++i)
      if (depth[i] == 0 && levels[static_cast<std::size_t>(r - 1)].data[i]) depth[i] = r;

  BinaryMask out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int r = depth[static_cast<std::size_t>(y) * w + x];
      if (r == 0) continue;
      for (const auto& [dx, dy] : detail::disc_offsets(r)) {
        const int qx = x + dx, qy = y + dy;
        if (qx >= 0 && qx < w && qy >= 0 && qy < h) out.set(qx, qy, 1);
      }
    }
  return out;
}

/** @brief Soft reconstruction: disc-summed level probabilities, linearly combined and thresholded.
 *
 * Takes levels + 1 weights; the last one is the bias. Output is positive-side
 * of the combination.
 */
inline BinaryMask dt_soft_reconstruct(const std::vector<RealGrid>& level_probs,
                                      const std::vector<double>& weights, const DtConfig& cfg) {
  if (static_cast<int>(level_probs.size()) != cfg.levels)
    throw std::invalid_argument("dt_soft_reconstruct: expected one grid per level");
  if (static_cast<int>(weights.size()) != cfg.levels + 1)
    throw std::invalid_argument("dt_soft_reconstruct: expected levels+1 weights");
  if (level_probs.empty()) throw std::invalid_argument("dt_soft_reconstruct: no levels");
  const int w = level_probs[0].width, h = level_probs[0].height;
  RealGrid acc(w, h);
  std::fill(acc.v.begin(), acc.v.end(), weights.back());
  for (int r = 1; r <= cfg.levels; ++r) {
    const RealGrid& probs = level_probs[static_cast<std::size_t>(r - 1)];
    if (probs.width != w || probs.height != h)
      throw std::invalid_argument("dt_soft_reconstruct: grid dimension mismatch");
    const auto& offs = detail::disc_offsets(r);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double p = probs.at(x, y);
        if (p == 0.0) continue;
        const double contrib = weights[static_cast<std::size_t>(r - 1)] * p;
        for (const auto& [dx, dy] : offs) {
          const int qx = x + dx, qy = y + dy;
          if (qx >= 0 && qx < w && qy >= 0 && qy < h) acc.at(qx, qy) += contrib;
        }
      }
  }
  BinaryMask out(w, h);
  for (std::size_t i = 0; i < acc.v.size(); ++i) out.data[i] = acc.v[i] > 0.0 ? 1 : 0;
  return out;
}

/** @brief Bilinear resampling with clamped edge handling. */
inline std::vector<double> resample_bilinear(const std::vector<double>& src, int in_w, int in_h,
                                             int out_w, int out_h) {
  std::vector<double> out(static_cast<std::size_t>(out_w) * out_h, 0.0);
  for (int y = 0; y < out_h; ++y) {
    const double fy = (y + 0.5) * in_h / out_h - 0.5;
    const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, in_h - 1);
    const int y1 = std::min(y0 + 1, in_h - 1);
    const double ty = std::clamp(fy - y0, 0.0, 1.0);
    for (int x = 0; x < out_w; ++x) {
      const double fx = (x + 0.5) * in_w / out_w - 0.5;
      const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, in_w - 1);
      const int x1 = std::min(x0 + 1, in_w - 1);
      const double tx = std::clamp(fx - x0, 0.0, 1.0);
      const double a = src[static_cast<std::size_t>(y0) * in_w + x0];
      const double b = src[static_cast<std::size_t>(y0) * in_w + x1];
      const double c = src[static_cast<std::size_t>(y1) * in_w + x0];
      const double d = src[static_cast<std::size_t>(y1) * in_w + x1];
      out[static_cast<std::size_t>(y) * out_w + x] =
          (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * c + tx * d);
    }
  }
  return out;
}

/** @brief Downsampled soft occupancy code; values are covered-area fractions in [0,1]. */
inline std::vector<double> encode_binary(const BinaryMask& mask, const BinaryConfig& cfg) {
  if (cfg.side < 1) throw std::invalid_argument("encode_binary: side must be >= 1");
  if (mask.width != mask.height) throw std::invalid_argument("encode_binary: mask must be square");
  std::vector<double> src(mask.data.size());
  for (std::size_t i = 0; i < src.size(); ++i) src[i] = mask.data[i] ? 1.0 : 0.0;
  return resample_area(src, mask.width, mask.height, cfg.side, cfg.side);
}

/** @brief Bilinear upsample of a binary code followed by a 0.5 threshold. */
inline BinaryMask decode_binary(std::span<const double> code, const BinaryConfig& cfg, int out_side) {
  if (static_cast<int>(code.size()) != cfg.side * cfg.side)
    throw std::invalid_argument("decode_binary: code length mismatch");
  if (out_side < 1) throw std::invalid_argument("decode_binary: out_side must be >= 1");
  const std::vector<double> up =
      resample_bilinear(std::vector<double>(code.begin(), code.end()), cfg.side, cfg.side, out_side, out_side);
  BinaryMask out(out_side, out_side);
  for (std::size_t i = 0; i < up.size(); ++i) out.data[i] = up[i] >= 0.5 ? 1 : 0;
  return out;
}

/** @brief Ray lengths from the foreground centroid, normalized by half the mask side.
 *
 * Each ray keeps the distance of the last foreground sample, so shallow
 * concavities along a ray are bridged. Rays are marched in quarter-pixel
 * steps. Fails on empty masks and when the centroid falls outside the shape.
 */
inline std::vector<double> encode_radial(const BinaryMask& mask, const RadialConfig& cfg) {
  if (cfg.n_angles < 4) throw std::invalid_argument("encode_radial: need at least 4 angles");
  if (mask.width != mask.height) throw std::invalid_argument("encode_radial: mask must be square");
  if (mask.empty_foreground()) throw std::invalid_argument("encode_radial: empty mask");
  double sx = 0.0, sy = 0.0;
  long long n = 0;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(x, y)) {
        sx += x + 0.5;
        sy += y + 0.5;
        ++n;
      }
  const double cx = sx / n, cy = sy / n;
  const int px = static_cast<int>(std::floor(cx)), py = static_cast<int>(std::floor(cy));
  if (px < 0 || px >= mask.width || py < 0 || py >= mask.height || !mask.at(px, py))
    throw std::invalid_argument("encode_radial: centroid is not inside the shape");

  const double tmax = mask.width * 1.5;
  const double step = 0.25;
  std::vector<double> code(static_cast<std::size_t>(cfg.n_angles), 0.0);
  for (int k = 0; k < cfg.n_angles; ++k) {
    const double theta = 2.0 * M_PI * k / cfg.n_angles;
    const double dx = std::cos(theta), dy = std::sin(theta);
    double last = 0.0;
    for (double t = 0.0; t <= tmax; t += step) {
      const int qx = static_cast<int>(std::floor(cx + t * dx));
      const int qy = static_cast<int>(std::floor(cy + t * dy));
      if (qx < 0 || qx >= mask.width || qy < 0 || qy >= mask.height) continue;
      if (mask.at(qx, qy)) last = t;
    }
    code[static_cast<std::size_t>(k)] = last / (mask.width * 0.5);
  }
  return code;
}

/** @brief Polygon fill of the radial code's vertices, centered in the output mask. */
inline BinaryMask decode_radial(std::span<const double> code, const RadialConfig& cfg, int out_side) {
  if (static_cast<int>(code.size()) != cfg.n_angles)
    throw std::invalid_argument("decode_radial: code length mismatch");
  if (cfg.n_angles < 4) throw std::invalid_argument("decode_radial: need at least 4 angles");
  if (out_side < 1) throw std::invalid_argument("decode_radial: out_side must be >= 1");
  const double c = out_side * 0.5, scale = out_side * 0.5;
  std::vector<double> vx(code.size()), vy(code.size());
  for (std::size_t k = 0; k < code.size(); ++k) {
    const double theta = 2.0 * M_PI * static_cast<double>(k) / cfg.n_angles;
    vx[k] = c + std::max(0.0, code[k]) * scale * std::cos(theta);
    vy[k] = c + std::max(0.0, code[k]) * scale * std::sin(theta);
  }
  BinaryMask out(out_side, out_side);
  const std::size_t nv = code.size();
  for (int y = 0; y < out_side; ++y)
    for (int x = 0; x < out_side; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      bool inside = false;
      for (std::size_t i = 0, j = nv - 1; i < nv; j = i++) {
        if (((vy[i] > py) != (vy[j] > py)) &&
            (px < (vx[j] - vx[i]) * (py - vy[i]) / (vy[j] - vy[i]) + vx[i]))
          inside = !inside;
      }
      if (inside) out.set(x, y, 1);
    }
  return out;
}

/** @brief Fixed-length shape code shared by target encoding and prediction decoding. */
class ShapeCodec {
 public:
  virtual ~ShapeCodec() = default;
  virtual int code_length() const = 0;
  virtual int crop_side() const = 0;
  virtual std::vector<double> encode(const BinaryMask& crop) const = 0;
  virtual BinaryMask decode(std::span<const double> code, int out_side) const = 0;
  virtual nlohmann::ordered_json config_json() const = 0;
};

class BinaryCodec final : public ShapeCodec {
 public:
  BinaryCodec(BinaryConfig cfg, int crop_side) : cfg_(cfg), crop_side_(crop_side) {
    if (cfg.side < 1 || crop_side < cfg.side)
      throw std::invalid_argument("BinaryCodec: invalid sides");
  }
  int code_length() const override { return cfg_.side * cfg_.side; }
  int crop_side() const override { return crop_side_; }
  std::vector<double> encode(const BinaryMask& crop) const override { return encode_binary(crop, cfg_); }
  BinaryMask decode(std::span<const double> code, int out_side) const override {
    return decode_binary(code, cfg_, out_side);
  }
  nlohmann::ordered_json config_json() const override {
    return {{"kind", "binary"}, {"side", cfg_.side}, {"crop_side", crop_side_}};
  }

 private:
  BinaryConfig cfg_;
  int crop_side_;
};

class RadialCodec final : public ShapeCodec {
 public:
  RadialCodec(RadialConfig cfg, int crop_side) : cfg_(cfg), crop_side_(crop_side) {
    if (cfg.n_angles < 4 || crop_side < 4) throw std::invalid_argument("RadialCodec: invalid config");
  }
  int code_length() const override { return cfg_.n_angles; }
  int crop_side() const override { return crop_side_; }
  std::vector<double> encode(const BinaryMask& crop) const override { return encode_radial(crop, cfg_); }
  BinaryMask decode(std::span<const double> code, int out_side) const override {
    return decode_radial(code, cfg_, out_side);
  }
  nlohmann::ordered_json config_json() const override {
    return {{"kind", "radial"}, {"n_angles", cfg_.n_angles}, {"crop_side", crop_side_}};
  }

 private:
  RadialConfig cfg_;
  int crop_side_;
};

/** @brief Distance-transform codec: the code is the stack of quantized level masks. */
class DtCodec final : public ShapeCodec {
 public:
  explicit DtCodec(DtConfig cfg) : cfg_(cfg) {
    if (cfg.levels < 1 || cfg.mask_side < 1) throw std::invalid_argument("DtCodec: invalid config");
  }
  int code_length() const override { return cfg_.levels * cfg_.mask_side * cfg_.mask_side; }
  int crop_side() const override { return cfg_.mask_side; }

  std::vector<double> encode(const BinaryMask& crop) const override {
    if (crop.width != cfg_.mask_side || crop.height != cfg_.mask_side)
      throw std::invalid_argument("DtCodec::encode: crop side mismatch");
    const std::vector<BinaryMask> levels = dt_quantize(dt_euclidean(crop), cfg_);
    std::vector<double> code;
    code.reserve(static_cast<std::size_t>(code_length()));
    for (const auto& m : levels)
      for (std::uint8_t v : m.data) code.push_back(v ? 1.0 : 0.0);
    return code;
  }

  BinaryMask decode(std::span<const double> code, int out_side) const override {
    if (static_cast<int>(code.size()) != code_length())
      throw std::invalid_argument("DtCodec::decode: code length mismatch");
    const int side = cfg_.mask_side;
    const std::size_t plane = static_cast<std::size_t>(side) * side;
    std::vector<BinaryMask> levels;
    levels.reserve(static_cast<std::size_t>(cfg_.levels));
    for (int r = 0; r < cfg_.levels; ++r) {
      BinaryMask m(side, side);
      for (std::size_t i = 0; i < plane; ++i) {
        bool on = code[static_cast<std::size_t>(r) * plane + i] >= 0.5;
        // Deeper levels cannot escape shallower ones; clip instead of failing.
        if (r > 0 && !levels.back().data[i]) on = false;
        m.data[i] = on ? 1 : 0;
      }
      levels.push_back(std::move(m));
    }
    BinaryMask recon = dt_reconstruct(levels, cfg_);
    if (out_side == side) return recon;
    std::vector<double> src(recon.data.size());
    for (std::size_t i = 0; i < src.size(); ++i) src[i] = recon.data[i] ? 1.0 : 0.0;
    const std::vector<double> up = resample_bilinear(src, side, side, out_side, out_side);
    BinaryMask out(out_side, out_side);
    for (std::size_t i = 0; i < up.size(); ++i) out.data[i] = up[i] >= 0.5 ? 1 : 0;
    return out;
  }

  const DtConfig& config() const { return cfg_; }
  nlohmann::ordered_json config_json() const override {
    return {{"kind", "dt"}, {"levels", cfg_.levels}, {"mask_side", cfg_.mask_side}};
  }

 private:
  DtConfig cfg_;
};

/** @brief Build a codec from its JSON description ({"kind": ..., ...}). */
inline std::unique_ptr<ShapeCodec> make_codec(const nlohmann::ordered_json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "binary") {
    BinaryConfig cfg;
    cfg.side = j.value("side", 16);
    return std::make_unique<BinaryCodec>(cfg, j.value("crop_side", 64));
  }
  if (kind == "radial") {
    RadialConfig cfg;
    cfg.n_angles = j.value("n_angles", 32);
    return std::make_unique<RadialCodec>(cfg, j.value("crop_side", 64));
  }
  if (kind == "dt") {
    DtConfig cfg;
    cfg.levels = j.value("levels", 8);
    cfg.mask_side = j.value("mask_side", 64);
    return std::make_unique<DtCodec>(cfg);
  }
  throw std::invalid_argument("make_codec: unknown kind '" + kind + "'");
}

}  // namespace gridseg
