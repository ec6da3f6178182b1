#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "gridseg/core.hpp"
#include "gridseg/targets.hpp"

namespace gridseg {

struct LossWeights {
  double coord = 5.0;
  double noobj = 0.5;
  double obj = 1.0;
  double cls = 1.0;
  double shape = 0.15;
};

/** @brief Responsibility assignment between prediction slots and encoded targets.
 *
 * This is the only data-dependent step of the loss: with a frozen MatchResult
 * the loss is a fixed polynomial in the prediction vector, and the backward
 * pass treats the stored IoU values as constants.
 */
struct MatchResult {
  std::vector<std::uint8_t> matched;  // per slot: carries both occupancy and responsibility
  std::vector<double> iou;            // per slot: IoU against the cell's target where defined
  std::vector<int> best_slot;         // per cell: responsible slot in legacy mode, -1 when empty
};

inline MatchResult match(const std::vector<double>& pred, const TargetTensor& target,
                         const PredLayout& layout) {
  if (pred.size() != layout.total()) throw std::invalid_argument("match: prediction length mismatch");
  const int cells = layout.cells();
  const int per_cell = layout.slots_per_cell();
  MatchResult m;
  m.matched.assign(static_cast<std::size_t>(cells) * per_cell, 0);
  m.iou.assign(static_cast<std::size_t>(cells) * per_cell, 0.0);
  m.best_slot.assign(static_cast<std::size_t>(cells), -1);

  for (int cell = 0; cell < cells; ++cell) {
    if (layout.mode == TargetMode::Legacy) {
      const TargetSlot& gt = target.slots[static_cast<std::size_t>(cell)];
      if (!gt.occupied) continue;
      BoundingBox gt_box;
      const int col = cell % layout.spec.S, row = cell / layout.spec.S;
      gt_box.cx = (col + gt.x) / layout.spec.S;
      gt_box.cy = (row + gt.y) / layout.spec.S;
      gt_box.h = gt.psi * gt.psi;
      gt_box.w = gt.omega * gt.omega;
      int best = 0;
      double best_iou = -1.0;
      for (int j = 0; j < per_cell; ++j) {
        const double v = iou_box(decode_box(layout, pred, cell, j), gt_box);
        m.iou[static_cast<std::size_t>(cell) * per_cell + j] = v;
        if (v > best_iou) {
          best_iou = v;
          best = j;
        }
      }
      m.best_slot[static_cast<std::size_t>(cell)] = best;
      m.matched[static_cast<std::size_t>(cell) * per_cell + best] = 1;
    } else {
      for (int j = 0; j < per_cell; ++j) {
        const TargetSlot& gt = target.slots[static_cast<std::size_t>(cell) * per_cell + j];
        if (!gt.occupied) continue;
        BoundingBox gt_box;
        const int col = cell % layout.spec.S, row = cell / layout.spec.S;
        gt_box.cx = (col + gt.x) / layout.spec.S;
        gt_box.cy = (row + gt.y) / layout.spec.S;
        gt_box.h = gt.psi * gt.psi;
        gt_box.w = gt.omega * gt.omega;
        const std::size_t idx = static_cast<std::size_t>(cell) * per_cell + j;
        m.iou[idx] = iou_box(decode_box(layout, pred, cell, j), gt_box);
        m.matched[idx] = 1;
      }
    }
  }
  return m;
}

struct LossBreakdown {
  double coord = 0.0;
  double conf_obj = 0.0;
  double conf_noobj = 0.0;
  double cls = 0.0;
  double shape = 0.0;
  double total = 0.0;
};

namespace detail {

inline const TargetSlot& gt_for(const TargetTensor& target, const PredLayout& layout, int cell,
                                int slot) {
  if (layout.mode == TargetMode::Legacy) return target.slots[static_cast<std::size_t>(cell)];
  return target.slots[static_cast<std::size_t>(cell) * layout.slots_per_cell() + slot];
}

}  // namespace detail

/** @brief Five-term squared-error objective over a frozen match. */
inline LossBreakdown loss_forward(const std::vector<double>& pred, const TargetTensor& target,
                                  const PredLayout& layout, const LossWeights& w,
                                  const MatchResult& m) {
  LossBreakdown out;
  const int cells = layout.cells();
  const int per_cell = layout.slots_per_cell();
  for (int cell = 0; cell < cells; ++cell) {
    bool cell_has_object = false;
    for (int j = 0; j < per_cell; ++j) {
      const std::size_t idx = static_cast<std::size_t>(cell) * per_cell + j;
      const double c_hat = pred[layout.conf(cell, j)];
      if (!m.matched[idx]) {
        out.conf_noobj += c_hat * c_hat;
        continue;
      }
      cell_has_object = true;
      const TargetSlot& gt = detail::gt_for(target, layout, cell, j);
      const double dx = pred[layout.box_x(cell, j)] - gt.x;
      const double dy = pred[layout.box_y(cell, j)] - gt.y;
      const double dpsi = pred[layout.box_psi(cell, j)] - gt.psi;
      const double domega = pred[layout.box_omega(cell, j)] - gt.omega;
      out.coord += dx * dx + dy * dy + dpsi * dpsi + domega * domega;
      const double dc = c_hat - m.iou[idx];
      out.conf_obj += dc * dc;
      for (int k = 0; k < layout.spec.M; ++k) {
        const double ds = pred[layout.shape(cell, j, k)] - gt.shape[static_cast<std::size_t>(k)];
        out.shape += ds * ds;
      }
      if (layout.mode == TargetMode::Anchor) {
        for (int k = 0; k < layout.spec.C; ++k) {
          const double t = k == gt.class_id ? 1.0 : 0.0;
          const double dp = pred[layout.class_prob(cell, j, k)] - t;
          out.cls += dp * dp;
        }
      }
    }
    if (layout.mode == TargetMode::Legacy && cell_has_object) {
      const TargetSlot& gt = target.slots[static_cast<std::size_t>(cell)];
      for (int k = 0; k < layout.spec.C; ++k) {
        const double t = k == gt.class_id ? 1.0 : 0.0;
        const double dp = pred[layout.class_prob(cell, 0, k)] - t;
        out.cls += dp * dp;
      }
    }
  }
  out.total = w.coord * out.coord + w.noobj * out.conf_noobj + w.obj * out.conf_obj +
              w.cls * out.cls + w.shape * out.shape;
  return out;
}

inline LossBreakdown loss_forward(const std::vector<double>& pred, const TargetTensor& target,
                                  const PredLayout& layout, const LossWeights& w) {
  return loss_forward(pred, target, layout, w, match(pred, target, layout));
}

/** @brief Gradient of the weighted total with respect to every prediction coordinate.
 *
 * The stored IoU values are treated as constants, so the confidence gradient
 * does not flow back into the box fields.
 */
inline std::vector<double> loss_backward(const std::vector<double>& pred, const TargetTensor& target,
                                         const PredLayout& layout, const LossWeights& w,
                                         const MatchResult& m) {
  std::vector<double> grad(pred.size(), 0.0);
  const int cells = layout.cells();
  const int per_cell = layout.slots_per_cell();
  for (int cell = 0; cell < cells; ++cell) {
    bool cell_has_object = false;
    for (int j = 0; j < per_cell; ++j) {
      const std::size_t idx = static_cast<std::size_t>(cell) * per_cell + j;
      const double c_hat = pred[layout.conf(cell, j)];
      if (!m.matched[idx]) {
        grad[layout.conf(cell, j)] += w.noobj * 2.0 * c_hat;
        continue;
      }
      cell_has_object = true;
      const TargetSlot& gt = detail::gt_for(target, layout, cell, j);
      grad[layout.box_x(cell, j)] += w.coord * 2.0 * (pred[layout.box_x(cell, j)] - gt.x);
      grad[layout.box_y(cell, j)] += w.coord * 2.0 * (pred[layout.box_y(cell, j)] - gt.y);
      grad[layout.box_psi(cell, j)] += w.coord * 2.0 * (pred[layout.box_psi(cell, j)] - gt.psi);
      grad[layout.box_omega(cell, j)] += w.coord * 2.0 * (pred[layout.box_omega(cell, j)] - gt.omega);
      grad[layout.conf(cell, j)] += w.obj * 2.0 * (c_hat - m.iou[idx]);
      for (int k = 0; k < layout.spec.M; ++k)
        grad[layout.shape(cell, j, k)] +=
            w.shape * 2.0 * (pred[layout.shape(cell, j, k)] - gt.shape[static_cast<std::size_t>(k)]);
      if (layout.mode == TargetMode::Anchor) {
        for (int k = 0; k < layout.spec.C; ++k) {
          const double t = k == gt.class_id ? 1.0 : 0.0;
          grad[layout.class_prob(cell, j, k)] += w.cls * 2.0 * (pred[layout.class_prob(cell, j, k)] - t);
        }
      }
    }
    if (layout.mode == TargetMode::Legacy && cell_has_object) {
      const TargetSlot& gt = target.slots[static_cast<std::size_t>(cell)];
      for (int k = 0; k < layout.spec.C; ++k) {
        const double t = k == gt.class_id ? 1.0 : 0.0;
        grad[layout.class_prob(cell, 0, k)] += w.cls * 2.0 * (pred[layout.class_prob(cell, 0, k)] - t);
      }
    }
  }
  return grad;
}

inline constexpr double kBceEps = 1e-7;

/** @brief Summed binary cross-entropy with clamped predictions. */
inline double bce(const std::vector<double>& pred, const std::vector<double>& target) {
  if (pred.size() != target.size()) throw std::invalid_argument("bce: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(pred[i], kBceEps, 1.0 - kBceEps);
    total += -target[i] * std::log(p) - (1.0 - target[i]) * std::log(1.0 - p);
  }
  return total;
}

/** @brief d(bce)/d(pred); zero where the clamp is active. */
inline std::vector<double> bce_backward(const std::vector<double>& pred,
                                        const std::vector<double>& target) {
  if (pred.size() != target.size()) throw std::invalid_argument("bce_backward: size mismatch");
  std::vector<double> grad(pred.size(), 0.0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < kBceEps || pred[i] > 1.0 - kBceEps) continue;
    grad[i] = (pred[i] - target[i]) / (pred[i] * (1.0 - pred[i]));
  }
  return grad;
}

}  // namespace gridseg
