#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridseg/core.hpp"
#include "gridseg/dataset.hpp"
#include "gridseg/postproc.hpp"

namespace gridseg {

/** @brief Evaluation settings: IoU thresholds of interest and the overlap criterion. */
struct EvalConfig {
  std::vector<double> iou_thresholds = {0.5};
  MatchCriterion criterion = MatchCriterion::Box;
};

/** @brief A detection bound to the image it was made on. */
struct DetectionInstance {
  int image_id = 0;
  Detection det;
};

/** @brief TP/FP flags in rank order plus the ground truths nobody claimed. */
struct LabelResult {
  std::vector<std::uint8_t> tp;
  int false_negatives = 0;
};

struct PrPoint {
  double precision = 0.0;
  double recall = 0.0;
};

/** @brief Per-class average precision at one threshold; mean over classes with ground truth. */
struct ApResult {
  std::vector<double> per_class_ap;
  std::vector<std::uint8_t> class_has_gt;
  std::vector<std::vector<PrPoint>> pr_points;
  double map = 0.0;
};

/** @brief Share of top-ranked detections per outcome type, plus FP-only percentages. */
struct ErrorBreakdown {
  double corr = 0.0, loc = 0.0, sim = 0.0, dissim = 0.0, backgr = 0.0;
  double fp_loc = 0.0, fp_sim = 0.0, fp_dissim = 0.0, fp_backgr = 0.0;
  int considered = 0;
};

/** @brief Greedily label ranked predictions against ground truths.
 *
 * iou[p][g] holds the overlap of prediction p (already in rank order) with
 * ground truth g. Each prediction grabs the highest-IoU ground truth still
 * unclaimed (ties to the lowest index) and counts as TP when that overlap
 * reaches the threshold; only a TP consumes its ground truth.
 */
inline LabelResult label_predictions(const std::vector<std::vector<double>>& iou, int gt_count,
                                     double threshold) {
  LabelResult res;
  res.tp.assign(iou.size(), 0);
  std::vector<std::uint8_t> taken(static_cast<std::size_t>(gt_count), 0);
  for (std::size_t p = 0; p < iou.size(); ++p) {
    if (static_cast<int>(iou[p].size()) != gt_count)
      throw std::invalid_argument("label_predictions: ragged iou matrix");
    int best = -1;
    double best_iou = -1.0;
    for (int g = 0; g < gt_count; ++g) {
      if (taken[g]) continue;
      if (iou[p][g] > best_iou) {
        best_iou = iou[p][g];
        best = g;
      }
    }
    if (best >= 0 && best_iou >= threshold) {
      res.tp[p] = 1;
      taken[best] = 1;
    }
  }
  res.false_negatives = gt_count - static_cast<int>(std::count(taken.begin(), taken.end(), 1));
  return res;
}

/** @brief Cumulative precision/recall after each rank. */
inline std::vector<PrPoint> pr_curve(const std::vector<std::uint8_t>& tp, int gt_count) {
  std::vector<PrPoint> pts;
  pts.reserve(tp.size());
  int hits = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    hits += tp[i] ? 1 : 0;
    PrPoint pt;
    pt.precision = static_cast<double>(hits) / static_cast<double>(i + 1);
    pt.recall = gt_count > 0 ? static_cast<double>(hits) / gt_count : 0.0;
    pts.push_back(pt);
  }
  return pts;
}

/** @brief Eleven-point average precision.
 *
 * For each recall level r in {0, 0.1, ..., 1.0} take the precision at the
 * first rank whose recall reaches r; levels never reached contribute zero.
 */
inline double ap_11point(const std::vector<std::uint8_t>& tp, int gt_count) {
  if (gt_count <= 0) return 0.0;
  const std::vector<PrPoint> pts = pr_curve(tp, gt_count);
  double sum = 0.0;
  for (int l = 0; l <= 10; ++l) {
    const double level = l / 10.0;
    for (const PrPoint& pt : pts) {
      if (pt.recall >= level) {
        sum += pt.precision;
        break;
      }
    }
  }
  return sum / 11.0;
}

namespace detail {

// Ground truths of one class grouped by image, with lazily decoded masks.
struct ClassGts {
  std::vector<int> ann_index;
  std::vector<int> image_id;
};

inline const BinaryMask& gt_mask_cached(const Dataset& ds, int ann_index,
                                        std::map<int, BinaryMask>& cache) {
  auto it = cache.find(ann_index);
  if (it == cache.end())
    it = cache.emplace(ann_index, annotation_mask(ds, ds.annotations[ann_index])).first;
  return it->second;
}

// Overlap between a detection and one annotation; mask IoU skips decoding
// when the boxes are disjoint, since both masks live inside their boxes.
inline double instance_iou(const Dataset& ds, const Detection& det, int ann_index,
                           MatchCriterion criterion, std::map<int, BinaryMask>& mask_cache) {
  const ImageAnnotation& ann = ds.annotations[ann_index];
  const double box_iou = iou_box(det.bbox, ann.bbox);
  if (criterion == MatchCriterion::Box) return box_iou;
  if (box_iou == 0.0) return 0.0;
  if (!det.mask) throw std::invalid_argument("evaluation: mask criterion needs detection masks");
  return iou_mask(*det.mask, gt_mask_cached(ds, ann_index, mask_cache));
}

// Detection indices of one class sorted by confidence descending, input order on ties.
inline std::vector<std::size_t> ranked_of_class(const std::vector<DetectionInstance>& dets,
                                                int class_id) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (dets[i].det.class_id == class_id) idx.push_back(i);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].det.confidence > dets[b].det.confidence;
  });
  return idx;
}

inline void check_class_ids(const Dataset& ds, const std::vector<DetectionInstance>& dets) {
  const int classes = static_cast<int>(ds.class_names.size());
  for (const auto& a : ds.annotations)
    if (a.class_id < 0 || a.class_id >= classes)
      throw std::invalid_argument("evaluation: annotation class id out of range");
  for (const auto& d : dets)
    if (d.det.class_id < 0 || d.det.class_id >= classes)
      throw std::invalid_argument("evaluation: detection class id out of range");
}

}  // namespace detail

/** @brief Dataset-wide mean average precision at one IoU threshold.
 *
 * Detections are pooled across images per class and ranked once, but each
 * matches only ground truths of its own image. Classes without any ground
 * truth are left out of the mean.
 */
inline ApResult map_at(const Dataset& ds, const std::vector<DetectionInstance>& dets,
                       double threshold, const EvalConfig& cfg = {}) {
  detail::check_class_ids(ds, dets);
  const int classes = static_cast<int>(ds.class_names.size());

  ApResult res;
  res.per_class_ap.assign(classes, 0.0);
  res.class_has_gt.assign(classes, 0);
  res.pr_points.resize(classes);

  std::map<int, BinaryMask> mask_cache;
  for (int c = 0; c < classes; ++c) {
    detail::ClassGts gts;
    for (std::size_t i = 0; i < ds.annotations.size(); ++i)
      if (ds.annotations[i].class_id == c) {
        gts.ann_index.push_back(static_cast<int>(i));
        gts.image_id.push_back(ds.annotations[i].image_id);
      }
    if (!gts.ann_index.empty()) res.class_has_gt[c] = 1;

    const std::vector<std::size_t> ranked = detail::ranked_of_class(dets, c);
    std::vector<std::uint8_t> taken(gts.ann_index.size(), 0);
    std::vector<std::uint8_t> tp(ranked.size(), 0);
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      const DetectionInstance& di = dets[ranked[r]];
      int best = -1;
      double best_iou = -1.0;
      for (std::size_t g = 0; g < gts.ann_index.size(); ++g) {
        if (taken[g] || gts.image_id[g] != di.image_id) continue;
        const double v =
            detail::instance_iou(ds, di.det, gts.ann_index[g], cfg.criterion, mask_cache);
        if (v > best_iou) {
          best_iou = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0 && best_iou >= threshold) {
        tp[r] = 1;
        taken[best] = 1;
      }
    }
    res.per_class_ap[c] = ap_11point(tp, static_cast<int>(gts.ann_index.size()));
    res.pr_points[c] = pr_curve(tp, static_cast<int>(gts.ann_index.size()));
  }

  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < classes; ++c)
    if (res.class_has_gt[c]) {
      sum += res.per_class_ap[c];
      ++counted;
    }
  res.map = counted > 0 ? sum / counted : 0.0;
  return res;
}

/** @brief Mean of mAP_t over t in {0.1, ..., 0.9}. */
inline double map_vol(const Dataset& ds, const std::vector<DetectionInstance>& dets,
                      const EvalConfig& cfg = {}) {
  double sum = 0.0;
  for (int l = 1; l <= 9; ++l) sum += map_at(ds, dets, l / 10.0, cfg).map;
  return sum / 9.0;
}

/** @brief Mean of mAP_t over t in {0.5, 0.55, ..., 0.95}. */
inline double map_coco(const Dataset& ds, const std::vector<DetectionInstance>& dets,
                       const EvalConfig& cfg = {}) {
  double sum = 0.0;
  for (int i = 0; i < 10; ++i) sum += map_at(ds, dets, 0.5 + i * 0.05, cfg).map;
  return sum / 10.0;
}

/** @brief Classify the top-ranked detections of each class into five outcome types.
 *
 * Per class the number of detections considered equals that class's ground
 * truth count. A detection is Corr when a same-class ground truth in its image
 * overlaps it by at least 0.5, Loc when the best same-class overlap lands in
 * [0.1, 0.5), Sim / Dissim when an other-class ground truth inside / outside
 * the detection's similarity group reaches 0.1, and Backgr otherwise. FP
 * shares spread the four non-Corr counts over all false positives, in percent.
 */
inline ErrorBreakdown error_taxonomy(const Dataset& ds, const std::vector<DetectionInstance>& dets,
                                     const std::vector<int>& similarity_groups,
                                     MatchCriterion criterion = MatchCriterion::Box) {
  detail::check_class_ids(ds, dets);
  const int classes = static_cast<int>(ds.class_names.size());
  if (static_cast<int>(similarity_groups.size()) != classes)
    throw std::invalid_argument("error_taxonomy: one similarity group per class required");

  std::map<int, BinaryMask> mask_cache;
  long corr = 0, loc = 0, sim = 0, dissim = 0, backgr = 0;
  int considered = 0;

  for (int c = 0; c < classes; ++c) {
    long gt_count = 0;
    for (const auto& a : ds.annotations)
      if (a.class_id == c) ++gt_count;
    std::vector<std::size_t> ranked = detail::ranked_of_class(dets, c);
    if (static_cast<long>(ranked.size()) > gt_count) ranked.resize(gt_count);

    for (const std::size_t di_idx : ranked) {
      const DetectionInstance& di = dets[di_idx];
      double own = 0.0, in_group = 0.0, out_group = 0.0;
      for (std::size_t g = 0; g < ds.annotations.size(); ++g) {
        const ImageAnnotation& ann = ds.annotations[g];
        if (ann.image_id != di.image_id) continue;
        const double v = detail::instance_iou(ds, di.det, static_cast<int>(g), criterion, mask_cache);
        if (ann.class_id == c)
          own = std::max(own, v);
        else if (similarity_groups[ann.class_id] == similarity_groups[c])
          in_group = std::max(in_group, v);
        else
          out_group = std::max(out_group, v);
      }
      ++considered;
      if (own >= 0.5)
        ++corr;
      else if (own >= 0.1)
        ++loc;
      else if (in_group >= 0.1)
        ++sim;
      else if (out_group >= 0.1)
        ++dissim;
      else
        ++backgr;
    }
  }

  ErrorBreakdown out;
  out.considered = considered;
  if (considered > 0) {
    out.corr = static_cast<double>(corr) / considered;
    out.loc = static_cast<double>(loc) / considered;
    out.sim = static_cast<double>(sim) / considered;
    out.dissim = static_cast<double>(dissim) / considered;
    out.backgr = static_cast<double>(backgr) / considered;
  }
  const long fp_total = loc + sim + dissim + backgr;
  if (fp_total > 0) {
    out.fp_loc = 100.0 * loc / fp_total;
    out.fp_sim = 100.0 * sim / fp_total;
    out.fp_dissim = 100.0 * dissim / fp_total;
    out.fp_backgr = 100.0 * backgr / fp_total;
  }
  return out;
}

/** @brief Full evaluation report: AP per threshold, the volume means, optional taxonomy. */
inline nlohmann::ordered_json eval_report(const Dataset& ds,
                                          const std::vector<DetectionInstance>& dets,
                                          const EvalConfig& cfg,
                                          const std::vector<int>* similarity_groups = nullptr) {
  nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
  nlohmann::ordered_json map_by_t = nlohmann::ordered_json::object();
  for (const double t : cfg.iou_thresholds) {
    const ApResult r = map_at(ds, dets, t, cfg);
    const std::string key = std::to_string(t);
    map_by_t[key] = r.map;
    for (int c = 0; c < static_cast<int>(ds.class_names.size()); ++c)
      if (r.class_has_gt[c]) per_class[ds.class_names[c]][key] = r.per_class_ap[c];
  }
  nlohmann::ordered_json root;
  root["per_class"] = per_class;
  root["mAP"] = map_by_t;
  root["mAP_vol"] = map_vol(ds, dets, cfg);
  root["mAP_coco"] = map_coco(ds, dets, cfg);
  if (similarity_groups) {
    const ErrorBreakdown eb = error_taxonomy(ds, dets, *similarity_groups, cfg.criterion);
    root["taxonomy"] = {{"corr", eb.corr},         {"loc", eb.loc},
                        {"sim", eb.sim},           {"dissim", eb.dissim},
                        {"backgr", eb.backgr},     {"fp_loc", eb.fp_loc},
                        {"fp_sim", eb.fp_sim},     {"fp_dissim", eb.fp_dissim},
                        {"fp_backgr", eb.fp_backgr}};
  }
  return root;
}

}  // namespace gridseg
