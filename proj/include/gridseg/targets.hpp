#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include "gridseg/core.hpp"
#include "gridseg/shapecodec.hpp"

namespace gridseg {

struct GridSpec {
  int S = 7;   // grid side
  int B = 2;   // proposals per cell (legacy head)
  int C = 20;  // classes
  int M = 20;  // shape code length
};

enum class TargetMode { Legacy, Anchor };

/** @brief Prior box aspect ratios, stored as height:width pairs. */
struct AnchorSet {
  std::vector<std::pair<double, double>> ratios = {{1.0, 1.0}, {1.0, 2.0}, {2.0, 1.0}};

  int size() const { return static_cast<int>(ratios.size()); }

  // Unit-area box (width, height) for an anchor.
  std::pair<double, double> unit_box(int a) const {
    const double rh = ratios[static_cast<std::size_t>(a)].first;
    const double rw = ratios[static_cast<std::size_t>(a)].second;
    return {std::sqrt(rw / rh), std::sqrt(rh / rw)};
  }
};

/** @brief Flat prediction length for a grid.
 *
 * Legacy cells share one class distribution and carry B box records; anchored
 * cells carry one full record (box + classes + shape) per anchor.
 */
inline std::size_t layout_size(const GridSpec& spec, TargetMode mode, int num_anchors = 0) {
  const long long cells = static_cast<long long>(spec.S) * spec.S;
  if (mode == TargetMode::Legacy)
    return static_cast<std::size_t>(cells * (spec.C + static_cast<long long>(spec.B) * (5 + spec.M)));
  if (num_anchors < 1) throw std::invalid_argument("layout_size: anchored layout needs anchors");
  return static_cast<std::size_t>(cells * num_anchors * (5LL + spec.C + spec.M));
}

/** @brief Index arithmetic for the flat prediction vector. */
struct PredLayout {
  GridSpec spec;
  TargetMode mode = TargetMode::Legacy;
  int anchors = 0;

  int cells() const { return spec.S * spec.S; }
  int slots_per_cell() const { return mode == TargetMode::Legacy ? spec.B : anchors; }
  int record() const { return mode == TargetMode::Legacy ? 5 + spec.M : 5 + spec.C + spec.M; }
  int cell_stride() const {
    return mode == TargetMode::Legacy ? spec.C + spec.B * record() : anchors * record();
  }
  std::size_t total() const { return static_cast<std::size_t>(cells()) * cell_stride(); }

  std::size_t class_prob(int cell, int slot, int k) const {
    if (mode == TargetMode::Legacy)
      return static_cast<std::size_t>(cell) * cell_stride() + k;
    return slot_base(cell, slot) + 5 + k;
  }
  std::size_t slot_base(int cell, int slot) const {
    if (mode == TargetMode::Legacy)
      return static_cast<std::size_t>(cell) * cell_stride() + spec.C + static_cast<std::size_t>(slot) * record();
    return (static_cast<std::size_t>(cell) * anchors + slot) * record();
  }
  std::size_t conf(int cell, int slot) const { return slot_base(cell, slot); }
  std::size_t box_x(int cell, int slot) const { return slot_base(cell, slot) + 1; }
  std::size_t box_y(int cell, int slot) const { return slot_base(cell, slot) + 2; }
  std::size_t box_psi(int cell, int slot) const { return slot_base(cell, slot) + 3; }
  std::size_t box_omega(int cell, int slot) const { return slot_base(cell, slot) + 4; }
  std::size_t shape(int cell, int slot, int k) const {
    return slot_base(cell, slot) + (mode == TargetMode::Legacy ? 5 : 5 + spec.C) + k;
  }
};

/** @brief One encoded ground-truth slot (per cell in legacy mode, per cell-anchor otherwise). */
struct TargetSlot {
  bool occupied = false;
  int class_id = -1;
  double x = 0.0;      // center offset within the cell, [0,1]
  double y = 0.0;
  double psi = 0.0;    // sqrt of normalized height
  double omega = 0.0;  // sqrt of normalized width
  std::vector<double> shape;
  double area = 0.0;   // normalized box area, used for collision resolution
};

struct TargetTensor {
  GridSpec spec;
  TargetMode mode = TargetMode::Legacy;
  int anchors = 0;
  std::vector<TargetSlot> slots;  // legacy: S*S, anchored: S*S*anchors

  int slots_per_cell() const { return mode == TargetMode::Legacy ? 1 : anchors; }
};

namespace detail {

struct CellPos {
  int col = 0, row = 0;
  double x_off = 0.0, y_off = 0.0;
};

inline CellPos locate_cell(const BoundingBox& box, int S) {
  if (box.cx < 0.0 || box.cx > 1.0 || box.cy < 0.0 || box.cy > 1.0)
    throw std::invalid_argument("target encoding: box center outside the image");
  CellPos p;
  p.col = std::min(S - 1, static_cast<int>(box.cx * S));
  p.row = std::min(S - 1, static_cast<int>(box.cy * S));
  p.x_off = box.cx * S - p.col;
  p.y_off = box.cy * S - p.row;
  return p;
}

inline void fill_slot(TargetSlot& slot, const Annotation& ann, const CellPos& pos,
                      const ShapeCodec& codec) {
  if (ann.bbox.w <= 0.0 || ann.bbox.h <= 0.0)
    throw std::invalid_argument("target encoding: degenerate box");
  slot.occupied = true;
  slot.class_id = ann.class_id;
  slot.x = pos.x_off;
  slot.y = pos.y_off;
  slot.psi = std::sqrt(ann.bbox.h);
  slot.omega = std::sqrt(ann.bbox.w);
  slot.shape = codec.encode(crop_resize_mask(ann.mask, ann.bbox, codec.crop_side()));
  slot.area = ann.bbox.area();
}

}  // namespace detail

/** @brief Grid targets with one slot per cell; a cell collision keeps the larger box. */
inline TargetTensor encode_legacy(const std::vector<Annotation>& annotations, const GridSpec& spec,
                                  const ShapeCodec& codec) {
  if (codec.code_length() != spec.M)
    throw std::invalid_argument("encode_legacy: codec length does not match grid M");
  TargetTensor t;
  t.spec = spec;
  t.mode = TargetMode::Legacy;
  t.slots.resize(static_cast<std::size_t>(spec.S) * spec.S);
  for (const auto& ann : annotations) {
    const detail::CellPos pos = detail::locate_cell(ann.bbox, spec.S);
    TargetSlot& slot = t.slots[static_cast<std::size_t>(pos.row) * spec.S + pos.col];
    if (slot.occupied && slot.area >= ann.bbox.area()) continue;
    detail::fill_slot(slot, ann, pos, codec);
  }
  return t;
}

/** @brief Best anchor for a box: highest IoU between unit-area, co-centered versions
 * of the box and each anchor; ties resolve to the lowest index. */
inline int anchor_match(const BoundingBox& box, const AnchorSet& anchors) {
  if (box.w <= 0.0 || box.h <= 0.0) throw std::invalid_argument("anchor_match: degenerate box");
  const double gw = std::sqrt(box.w / box.h);
  const double gh = std::sqrt(box.h / box.w);
  int best = 0;
  double best_iou = -1.0;
  for (int a = 0; a < anchors.size(); ++a) {
    const auto [aw, ah] = anchors.unit_box(a);
    const double inter = std::min(gw, aw) * std::min(gh, ah);
    const double iou = inter / (2.0 - inter);
    if (iou > best_iou + 1e-12) {
      best_iou = iou;
      best = a;
    }
  }
  return best;
}

/** @brief Grid targets with one slot per cell-anchor pair; collisions keep the larger box. */
inline TargetTensor encode_anchored(const std::vector<Annotation>& annotations, const GridSpec& spec,
                                    const AnchorSet& anchors, const ShapeCodec& codec) {
  if (codec.code_length() != spec.M)
    throw std::invalid_argument("encode_anchored: codec length does not match grid M");
  if (anchors.size() < 1) throw std::invalid_argument("encode_anchored: empty anchor set");
  TargetTensor t;
  t.spec = spec;
  t.mode = TargetMode::Anchor;
  t.anchors = anchors.size();
  t.slots.resize(static_cast<std::size_t>(spec.S) * spec.S * anchors.size());
  for (const auto& ann : annotations) {
    const detail::CellPos pos = detail::locate_cell(ann.bbox, spec.S);
    const int a = anchor_match(ann.bbox, anchors);
    const std::size_t idx =
        (static_cast<std::size_t>(pos.row) * spec.S + pos.col) * anchors.size() + a;
    TargetSlot& slot = t.slots[idx];
    if (slot.occupied && slot.area >= ann.bbox.area()) continue;
    detail::fill_slot(slot, ann, pos, codec);
  }
  return t;
}

/** @brief A raw proposal cut out of the flat prediction vector. */
struct Proposal {
  int cell = 0;
  int slot = 0;
  double confidence = 0.0;
  BoundingBox box;
  std::vector<double> class_scores;
  std::vector<double> shape;
};

/** @brief Decode a slot's box fields into image coordinates. */
inline BoundingBox decode_box(const PredLayout& layout, const std::vector<double>& pred, int cell,
                              int slot) {
  const int col = cell % layout.spec.S;
  const int row = cell / layout.spec.S;
  BoundingBox box;
  box.cx = (col + pred[layout.box_x(cell, slot)]) / layout.spec.S;
  box.cy = (row + pred[layout.box_y(cell, slot)]) / layout.spec.S;
  const double psi = pred[layout.box_psi(cell, slot)];
  const double omega = pred[layout.box_omega(cell, slot)];
  box.h = psi * psi;
  box.w = omega * omega;
  return box;
}

/** @brief Split a flat prediction into per-slot proposals (no thresholding). */
inline std::vector<Proposal> unpack_predictions(const std::vector<double>& pred,
                                                const PredLayout& layout) {
  if (pred.size() != layout.total())
    throw std::invalid_argument("unpack_predictions: prediction length mismatch");
  std::vector<Proposal> out;
  out.reserve(static_cast<std::size_t>(layout.cells()) * layout.slots_per_cell());
  for (int cell = 0; cell < layout.cells(); ++cell)
    for (int j = 0; j < layout.slots_per_cell(); ++j) {
      Proposal p;
      p.cell = cell;
      p.slot = j;
      p.confidence = pred[layout.conf(cell, j)];
      p.box = decode_box(layout, pred, cell, j);
      p.class_scores.resize(static_cast<std::size_t>(layout.spec.C));
      for (int k = 0; k < layout.spec.C; ++k)
        p.class_scores[static_cast<std::size_t>(k)] = pred[layout.class_prob(cell, j, k)];
      p.shape.resize(static_cast<std::size_t>(layout.spec.M));
      for (int k = 0; k < layout.spec.M; ++k)
        p.shape[static_cast<std::size_t>(k)] = pred[layout.shape(cell, j, k)];
      out.push_back(std::move(p));
    }
  return out;
}

/** @brief Write a target tensor into a flat prediction-shaped vector (used by tests
 * and by the trainer to build regression targets). */
inline std::vector<double> target_to_flat(const TargetTensor& t) {
  PredLayout layout{t.spec, t.mode, t.anchors};
  std::vector<double> flat(layout.total(), 0.0);
  for (int cell = 0; cell < layout.cells(); ++cell) {
    const int per_cell = t.slots_per_cell();
    for (int j = 0; j < per_cell; ++j) {
      const TargetSlot& slot = t.slots[static_cast<std::size_t>(cell) * per_cell + j];
      if (!slot.occupied) continue;
      const int write_slots = t.mode == TargetMode::Legacy ? t.spec.B : 1;
      for (int w = 0; w < write_slots; ++w) {
        const int jj = t.mode == TargetMode::Legacy ? w : j;
        flat[layout.conf(cell, jj)] = 1.0;
        flat[layout.box_x(cell, jj)] = slot.x;
        flat[layout.box_y(cell, jj)] = slot.y;
        flat[layout.box_psi(cell, jj)] = slot.psi;
        flat[layout.box_omega(cell, jj)] = slot.omega;
        for (int k = 0; k < t.spec.M; ++k)
          flat[layout.shape(cell, jj, k)] = slot.shape[static_cast<std::size_t>(k)];
        flat[layout.class_prob(cell, jj, slot.class_id)] = 1.0;
      }
    }
  }
  return flat;
}

}  // namespace gridseg
