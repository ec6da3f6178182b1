#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridseg/core.hpp"
#include "gridseg/dataset.hpp"
#include "gridseg/rng.hpp"

namespace gridseg {

/** @brief Settings for the synthetic shape dataset.
 *
 * Classes are a fixed menu: 0 rectangle, 1 ellipse, 2 triangle. Sizes are
 * fractions of the image side. A nonpositive min_center_dist asks for the
 * default of a third of the side, which keeps object centers in distinct
 * cells of a 3x3 grid. With co_centered_pairs every image holds exactly one
 * wide and one tall object of different classes sharing a center, the
 * worst case for cell-based target assignment.
 */
struct SynthConfig {
  int image_side = 96;
  int classes = 3;
  int min_objects = 1;
  int max_objects = 3;
  double min_size = 0.2;
  double max_size = 0.45;
  double min_center_dist = -1.0;
  bool co_centered_pairs = false;
  int images = 1;
  std::uint64_t seed = 0;
};

namespace detail {

inline BinaryMask rasterize_shape(int side, int class_id, double cx, double cy, double w,
                                  double h) {
  BinaryMask m(side, side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      bool inside = false;
      if (class_id == 0) {
        inside = std::abs(px - cx) <= 0.5 * w && std::abs(py - cy) <= 0.5 * h;
      } else if (class_id == 1) {
        const double dx = (px - cx) / (0.5 * w), dy = (py - cy) / (0.5 * h);
        inside = dx * dx + dy * dy <= 1.0;
      } else {
        const double top = cy - 0.5 * h;
        inside = py >= top && py <= cy + 0.5 * h &&
                 std::abs(px - cx) <= 0.5 * w * (py - top) / h;
      }
      if (inside) m.set(x, y, 1);
    }
  return m;
}

}  // namespace detail

/** @brief Generate a deterministic dataset of simple rasterized shapes. */
inline Dataset make_synth_dataset(const SynthConfig& cfg) {
  if (cfg.image_side < 32) throw std::invalid_argument("synth: image side must be >= 32");
  if (cfg.classes < 1 || cfg.classes > 3) throw std::invalid_argument("synth: 1 to 3 classes");
  if (cfg.images < 1) throw std::invalid_argument("synth: need at least one image");
  if (cfg.min_objects < 1 || cfg.max_objects < cfg.min_objects)
    throw std::invalid_argument("synth: bad objects range");
  if (!(cfg.min_size > 0.0) || cfg.max_size < cfg.min_size || cfg.max_size >= 1.0)
    throw std::invalid_argument("synth: bad size range");

  const double side = cfg.image_side;
  const double min_dist = cfg.min_center_dist > 0.0 ? cfg.min_center_dist : side / 3.0;
  Rng rng(cfg.seed);

  Dataset ds;
  const char* names[] = {"rectangle", "ellipse", "triangle"};
  for (int c = 0; c < cfg.classes; ++c) ds.class_names.push_back(names[c]);

  for (int i = 0; i < cfg.images; ++i) {
    DatasetImage im;
    im.id = i;
    im.width = cfg.image_side;
    im.height = cfg.image_side;
    ds.images.push_back(im);

    auto add_object = [&](int class_id, double cx, double cy, double w, double h) {
      ImageAnnotation a;
      a.image_id = i;
      a.class_id = class_id;
      const BinaryMask m = detail::rasterize_shape(cfg.image_side, class_id, cx, cy, w, h);
      a.bbox = tight_box(m);
      a.rle = rle_encode(m).runs;
      ds.annotations.push_back(a);
    };

    if (cfg.co_centered_pairs) {
      const double s = rng.uniform(cfg.min_size, cfg.max_size) * side;
      const int wide_class = rng.uniform_int(0, cfg.classes - 1);
      int tall_class = wide_class;
      if (cfg.classes > 1) {
        tall_class = rng.uniform_int(0, cfg.classes - 2);
        if (tall_class >= wide_class) ++tall_class;
      }
      // Keep the shared center clear of the 3x3 gridlines so both tight
      // boxes stay in one cell even after rasterization shifts them a pixel.
      auto off_gridlines = [&](double v) {
        return std::abs(v - side / 3.0) >= 4.0 && std::abs(v - 2.0 * side / 3.0) >= 4.0;
      };
      double cx = 0.0, cy = 0.0;
      bool placed = false;
      for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
        cx = rng.uniform(0.5 * s + 1.0, side - 0.5 * s - 1.0);
        cy = rng.uniform(0.5 * s + 1.0, side - 0.5 * s - 1.0);
        placed = off_gridlines(cx) && off_gridlines(cy);
      }
      if (!placed) throw std::runtime_error("synth: could not place a co-centered pair");
      add_object(wide_class, cx, cy, s, 0.5 * s);
      add_object(tall_class, cx, cy, 0.5 * s, s);
    } else {
      const int count = rng.uniform_int(cfg.min_objects, cfg.max_objects);
      std::vector<int> cls(count);
      std::vector<double> ws(count), hs(count);
      for (int o = 0; o < count; ++o) {
        cls[o] = rng.uniform_int(0, cfg.classes - 1);
        ws[o] = rng.uniform(cfg.min_size, cfg.max_size) * side;
        hs[o] = rng.uniform(cfg.min_size, cfg.max_size) * side;
      }
      // Centers are drawn jointly: one early central placement can make the
      // distance rule unsatisfiable, so reject whole layouts, not points.
      std::vector<std::pair<double, double>> pts(count);
      bool placed = false;
      for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
        for (int o = 0; o < count; ++o)
          pts[o] = {rng.uniform(0.5 * ws[o] + 1.0, side - 0.5 * ws[o] - 1.0),
                    rng.uniform(0.5 * hs[o] + 1.0, side - 0.5 * hs[o] - 1.0)};
        placed = true;
        for (int a = 0; a < count && placed; ++a)
          for (int b = a + 1; b < count && placed; ++b)
            if (std::max(std::abs(pts[a].first - pts[b].first),
                         std::abs(pts[a].second - pts[b].second)) < min_dist)
              placed = false;
      }
      if (!placed) throw std::runtime_error("synth: could not place objects after 1000 layouts");
      for (int o = 0; o < count; ++o)
        add_object(cls[o], pts[o].first, pts[o].second, ws[o], hs[o]);
    }
  }
  return ds;
}

}  // namespace gridseg
