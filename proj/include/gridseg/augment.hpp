#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gridseg/core.hpp"
#include "gridseg/rng.hpp"
#include "gridseg/tinynet.hpp"

namespace gridseg {

/** @brief Ranges of the augmentation distributions; defaults are the aggressive set. */
struct AugmentConfig {
  double rotation_deg = 20.0;
  double translate_frac = 0.15;
  double scale_lo = 1.0 / 1.2;
  double scale_hi = 1.2;
  double flip_prob = 0.5;
  double intensity_scale_lo = 1.0 / 1.2;
  double intensity_scale_hi = 1.2;
  double intensity_offset = 10.0;
};

/** @brief One concrete draw from the augmentation distributions. */
struct AugmentSample {
  double angle_deg = 0.0;
  double dx = 0.0;
  double dy = 0.0;
  double scale = 1.0;
  bool flip = false;
  double intensity_scale = 1.0;
  double intensity_offset = 0.0;
};

/** @brief An instance to be warped along with the image. */
struct AugmentInstance {
  int class_id = 0;
  BinaryMask mask;
  BoundingBox bbox;
};

struct AugmentScene {
  Tensor image;
  std::vector<AugmentInstance> instances;
};

/** @brief Draw one augmentation sample; geometric values first, then photometric.
 *
 * Scales are log-uniform so down- and up-scalings are equally likely.
 */
inline AugmentSample sample_params(const AugmentConfig& cfg, Rng& rng) {
  AugmentSample s;
  s.angle_deg = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg);
  s.dx = rng.uniform(-cfg.translate_frac, cfg.translate_frac);
  s.dy = rng.uniform(-cfg.translate_frac, cfg.translate_frac);
  s.scale = rng.log_uniform(cfg.scale_lo, cfg.scale_hi);
  s.flip = rng.uniform() < cfg.flip_prob;
  s.intensity_scale = rng.log_uniform(cfg.intensity_scale_lo, cfg.intensity_scale_hi);
  s.intensity_offset = rng.uniform(-cfg.intensity_offset, cfg.intensity_offset);
  return s;
}

namespace detail {

// Inverse of the forward map rotate -> scale -> flip -> translate, all about
// the image center, in pixel-center coordinates.
struct InverseAffine {
  double cx, cy, tx, ty, inv_scale, cos_a, sin_a;
  bool flip;

  InverseAffine(int w, int h, const AugmentSample& s)
      : cx(0.5 * w),
        cy(0.5 * h),
        tx(s.dx * w),
        ty(s.dy * h),
        inv_scale(1.0 / s.scale),
        cos_a(std::cos(-s.angle_deg * std::acos(-1.0) / 180.0)),
        sin_a(std::sin(-s.angle_deg * std::acos(-1.0) / 180.0)),
        flip(s.flip) {}

  std::pair<double, double> operator()(double x, double y) const {
    double vx = x - cx - tx, vy = y - cy - ty;
    if (flip) vx = -vx;
    vx *= inv_scale;
    vy *= inv_scale;
    const double rx = cos_a * vx - sin_a * vy;
    const double ry = sin_a * vx + cos_a * vy;
    return {rx + cx, ry + cy};
  }
};

}  // namespace detail

/** @brief Warp image and instances by one sample.
 *
 * The image is resampled bilinearly with out-of-frame reads replaced by the
 * channel mean; masks use nearest-neighbor and read background outside.
 * Boxes are recomputed as tight boxes of the warped masks, and instances
 * whose mask comes back empty are dropped.
 */
inline AugmentScene apply_affine(const Tensor& image, const std::vector<AugmentInstance>& instances,
                                 const AugmentSample& s) {
  const detail::InverseAffine inv(image.w, image.h, s);

  std::vector<double> mean(image.c, 0.0);
  for (int y = 0; y < image.h; ++y)
    for (int x = 0; x < image.w; ++x)
      for (int k = 0; k < image.c; ++k) mean[k] += image.at(y, x, k);
  for (auto& m : mean) m /= static_cast<double>(image.w) * image.h;

  AugmentScene out;
  out.image = Tensor(image.h, image.w, image.c);
  for (int y = 0; y < image.h; ++y)
    for (int x = 0; x < image.w; ++x) {
      const auto [sx, sy] = inv(x + 0.5, y + 0.5);
      const double ax = sx - 0.5, ay = sy - 0.5;
      const int x0 = static_cast<int>(std::floor(ax)), y0 = static_cast<int>(std::floor(ay));
      const double fx = ax - x0, fy = ay - y0;
      for (int k = 0; k < image.c; ++k) {
        auto tap = [&](int xi, int yi) {
          return (xi < 0 || xi >= image.w || yi < 0 || yi >= image.h) ? mean[k]
                                                                      : image.at(yi, xi, k);
        };
        const double v0 = (1.0 - fx) * tap(x0, y0) + fx * tap(x0 + 1, y0);
        const double v1 = (1.0 - fx) * tap(x0, y0 + 1) + fx * tap(x0 + 1, y0 + 1);
        out.image.at(y, x, k) = (1.0 - fy) * v0 + fy * v1;
      }
    }

  for (const AugmentInstance& inst : instances) {
    AugmentInstance warped;
    warped.class_id = inst.class_id;
    warped.mask = BinaryMask(inst.mask.width, inst.mask.height);
    bool any = false;
    for (int y = 0; y < warped.mask.height; ++y)
      for (int x = 0; x < warped.mask.width; ++x) {
        const auto [sx, sy] = inv(x + 0.5, y + 0.5);
        const int xi = static_cast<int>(std::floor(sx));
        const int yi = static_cast<int>(std::floor(sy));
        if (xi < 0 || xi >= inst.mask.width || yi < 0 || yi >= inst.mask.height) continue;
        if (inst.mask.at(xi, yi)) {
          warped.mask.set(x, y, 1);
          any = true;
        }
      }
    if (!any) continue;
    warped.bbox = tight_box(warped.mask);
    out.instances.push_back(std::move(warped));
  }
  return out;
}

/** @brief Intensity jitter: v <- clamp(v * scale + offset, 0, 255) on every channel. */
inline Tensor apply_photometric(const Tensor& image, const AugmentSample& s) {
  Tensor out = image;
  for (auto& v : out.data) v = std::clamp(v * s.intensity_scale + s.intensity_offset, 0.0, 255.0);
  return out;
}

inline nlohmann::ordered_json augment_config_json(const AugmentConfig& cfg) {
  return {{"rotation_deg", cfg.rotation_deg},
          {"translate_frac", cfg.translate_frac},
          {"scale_lo", cfg.scale_lo},
          {"scale_hi", cfg.scale_hi},
          {"flip_prob", cfg.flip_prob},
          {"intensity_scale_lo", cfg.intensity_scale_lo},
          {"intensity_scale_hi", cfg.intensity_scale_hi},
          {"intensity_offset", cfg.intensity_offset}};
}

inline AugmentConfig augment_config_from_json(const nlohmann::ordered_json& j) {
  AugmentConfig cfg;
  cfg.rotation_deg = j.value("rotation_deg", cfg.rotation_deg);
  cfg.translate_frac = j.value("translate_frac", cfg.translate_frac);
  cfg.scale_lo = j.value("scale_lo", cfg.scale_lo);
  cfg.scale_hi = j.value("scale_hi", cfg.scale_hi);
  cfg.flip_prob = j.value("flip_prob", cfg.flip_prob);
  cfg.intensity_scale_lo = j.value("intensity_scale_lo", cfg.intensity_scale_lo);
  cfg.intensity_scale_hi = j.value("intensity_scale_hi", cfg.intensity_scale_hi);
  cfg.intensity_offset = j.value("intensity_offset", cfg.intensity_offset);
  return cfg;
}

}  // namespace gridseg
