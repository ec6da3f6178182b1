#pragma once

#include <cmath>

#include "gridseg/core.hpp"
#include "gridseg/rng.hpp"

namespace gridseg::testutil {

inline BinaryMask disc_mask(int side, double cx, double cy, double r) {
  BinaryMask m(side, side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      if (dx * dx + dy * dy <= r * r) m.set(x, y, 1);
    }
  return m;
}

inline void stamp_ellipse(BinaryMask& m, double cx, double cy, double a, double b) {
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      const double dx = (x + 0.5 - cx) / a, dy = (y + 0.5 - cy) / b;
      if (dx * dx + dy * dy <= 1.0) m.set(x, y, 1);
    }
}

// Union of a few random ellipses; occasionally sprinkled with stray pixels.
inline BinaryMask random_blob(Rng& rng, int side, bool sprinkle = false) {
  BinaryMask m(side, side);
  const int n = rng.uniform_int(1, 3);
  for (int i = 0; i < n; ++i) {
    const double cx = rng.uniform(side * 0.25, side * 0.75);
    const double cy = rng.uniform(side * 0.25, side * 0.75);
    const double a = rng.uniform(side * 0.08, side * 0.3);
    const double b = rng.uniform(side * 0.08, side * 0.3);
    stamp_ellipse(m, cx, cy, a, b);
  }
  if (sprinkle)
    for (int k = 0; k < side / 2; ++k)
      m.set(rng.uniform_int(0, side - 1), rng.uniform_int(0, side - 1), rng.bernoulli(0.5) ? 1 : 0);
  return m;
}

}  // namespace gridseg::testutil
