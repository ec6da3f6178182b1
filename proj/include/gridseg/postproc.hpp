#pragma once

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "gridseg/core.hpp"
#include "gridseg/shapecodec.hpp"
#include "gridseg/targets.hpp"

namespace gridseg {

/** @brief Overlap measure used when comparing two detections. */
enum class MatchCriterion { Box, Mask };

/** @brief Filtering and suppression settings for turning proposals into detections. */
struct PostprocConfig {
  double confidence_threshold = 0.005;
  double nms_iou_threshold = 0.5;
  MatchCriterion nms_criterion = MatchCriterion::Box;
};

/** @brief IoU of two detections under the chosen criterion. */
inline double detection_iou(const Detection& a, const Detection& b, MatchCriterion criterion) {
  if (criterion == MatchCriterion::Mask) {
    if (!a.mask || !b.mask) throw std::invalid_argument("detection_iou: mask criterion needs masks");
    return iou_mask(*a.mask, *b.mask);
  }
  return iou_box(a.bbox, b.bbox);
}

/** @brief Decode proposals into scored detections with pasted full-image masks.
 *
 * The class is the argmax class score, the detection score is the product of
 * objectness and that class score, and proposals scoring below the confidence
 * threshold are dropped before any mask is decoded.
 */
inline std::vector<Detection> decode_detections(const std::vector<Proposal>& proposals,
                                                const ShapeCodec& codec, const PostprocConfig& cfg,
                                                int image_w, int image_h) {
  std::vector<Detection> out;
  for (const Proposal& p : proposals) {
    if (p.class_scores.empty()) throw std::invalid_argument("decode_detections: proposal without class scores");
    const auto best = std::max_element(p.class_scores.begin(), p.class_scores.end());
    const double score = p.confidence * *best;
    if (score < cfg.confidence_threshold) continue;
    Detection d;
    d.class_id = static_cast<int>(best - p.class_scores.begin());
    d.confidence = score;
    d.bbox = p.box;
    d.mask = paste_mask(codec.decode(p.shape, codec.crop_side()), d.bbox, image_w, image_h);
    out.push_back(std::move(d));
  }
  return out;
}

/** @brief Greedy per-class non-maximum suppression.
 *
 * Detections are visited in score order (ties keep input order) and one is
 * dropped when an already kept detection of the same class overlaps it by
 * strictly more than the threshold. The result stays in that visit order.
 */
inline std::vector<Detection> nms(const std::vector<Detection>& detections, const PostprocConfig& cfg) {
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].confidence > detections[b].confidence;
  });
  std::vector<Detection> kept;
  for (const std::size_t idx : order) {
    const Detection& d = detections[idx];
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.class_id != d.class_id) continue;
      if (detection_iou(k, d, cfg.nms_criterion) > cfg.nms_iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

}  // namespace gridseg
