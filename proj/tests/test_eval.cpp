#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "gridseg/eval.hpp"
#include "gridseg/rng.hpp"
#include "test_util.hpp"

using namespace gridseg;

namespace {

BoundingBox make_box(double cx, double cy, double w, double h) {
  BoundingBox b;
  b.cx = cx;
  b.cy = cy;
  b.w = w;
  b.h = h;
  return b;
}

Dataset make_dataset(int n_images, int n_classes) {
  Dataset ds;
  for (int i = 0; i < n_images; ++i) {
    DatasetImage im;
    im.id = i;
    im.width = 64;
    im.height = 64;
    ds.images.push_back(im);
  }
  for (int c = 0; c < n_classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
  return ds;
}

void add_gt(Dataset& ds, int image_id, int class_id, const BoundingBox& box) {
  ImageAnnotation a;
  a.image_id = image_id;
  a.class_id = class_id;
  a.bbox = box;
  const DatasetImage* im = ds.find_image(image_id);
  // Fill the box's pixel footprint so mask-criterion paths always have a mask.
  BinaryMask m(im->width, im->height);
  const PixelRect r = pixel_rect(box, im->width, im->height);
  for (int y = r.y0; y < r.y1; ++y)
    for (int x = r.x0; x < r.x1; ++x) m.set(x, y, 1);
  a.rle = rle_encode(m).runs;
  ds.annotations.push_back(a);
}

DetectionInstance make_det(int image_id, int class_id, double conf, const BoundingBox& box) {
  DetectionInstance di;
  di.image_id = image_id;
  di.det.class_id = class_id;
  di.det.confidence = conf;
  di.det.bbox = box;
  return di;
}

// Small random scene shared by the property tests.
struct Scene {
  Dataset ds;
  std::vector<DetectionInstance> dets;
};

Scene random_scene(Rng& rng, int n_images = 4, int n_classes = 3) {
  Scene s;
  s.ds = make_dataset(n_images, n_classes);
  for (int i = 0; i < n_images; ++i) {
    const int gts = rng.uniform_int(0, 3);
    for (int g = 0; g < gts; ++g)
      add_gt(s.ds, i, rng.uniform_int(0, n_classes - 1),
             make_box(rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75), rng.uniform(0.15, 0.4),
                      rng.uniform(0.15, 0.4)));
    const int dets = rng.uniform_int(0, 4);
    for (int d = 0; d < dets; ++d)
      s.dets.push_back(make_det(i, rng.uniform_int(0, n_classes - 1), rng.uniform(),
                                make_box(rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75),
                                         rng.uniform(0.15, 0.4), rng.uniform(0.15, 0.4))));
  }
  return s;
}

}  // namespace

TEST_CASE("label_predictions marks exact matches as true positives") {
  // Identity overlap: prediction i sits on ground truth i.
  const std::vector<std::vector<double>> iou = {{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}};
  const LabelResult r = label_predictions(iou, 3, 0.5);
  REQUIRE(r.tp == std::vector<std::uint8_t>{1, 1, 1});
  REQUIRE(r.false_negatives == 0);
}

TEST_CASE("label_predictions gives a ground truth to the higher-ranked prediction only") {
  const std::vector<std::vector<double>> iou = {{0.8}, {0.9}};
  const LabelResult r = label_predictions(iou, 1, 0.5);
  REQUIRE(r.tp == std::vector<std::uint8_t>{1, 0});
  REQUIRE(r.false_negatives == 0);
}

TEST_CASE("label_predictions matches an exhaustive simulation on small cases") {
  Rng rng(501);
  for (int trial = 0; trial < 500; ++trial) {
    const int preds = rng.uniform_int(0, 4);
    const int gts = rng.uniform_int(0, 3);
    const double t = rng.uniform(0.1, 0.9);
    std::vector<std::vector<double>> iou(preds, std::vector<double>(gts));
    for (auto& row : iou)
      for (auto& v : row) v = rng.uniform();

    // Independent oracle: walk ranks, scan unconsumed columns in reverse so
    // that >= lands on the lowest index for ties, same as the contract.
    std::vector<std::uint8_t> want(preds, 0);
    std::vector<bool> used(gts, false);
    for (int p = 0; p < preds; ++p) {
      double best = -1.0;
      int arg = -1;
      for (int g = gts - 1; g >= 0; --g)
        if (!used[g] && iou[p][g] >= best) {
          best = iou[p][g];
          arg = g;
        }
      if (arg != -1 && best >= t) {
        want[p] = 1;
        used[arg] = true;
      }
    }
    int want_fn = 0;
    for (int g = 0; g < gts; ++g)
      if (!used[g]) ++want_fn;

    const LabelResult got = label_predictions(iou, gts, t);
    REQUIRE(got.tp == want);
    REQUIRE(got.false_negatives == want_fn);

    int tp_count = 0;
    for (auto f : got.tp) tp_count += f;
    REQUIRE(tp_count + got.false_negatives == gts);  // each gt consumed at most once
  }
}

TEST_CASE("label_predictions rejects ragged overlap matrices") {
  REQUIRE_THROWS_AS(label_predictions({{0.5, 0.5}, {0.5}}, 2, 0.5), std::invalid_argument);
}

TEST_CASE("ap_11point boundary values") {
  REQUIRE(ap_11point({1, 1}, 2) == Catch::Approx(1.0));
  REQUIRE(ap_11point({0, 0, 0}, 2) == Catch::Approx(0.0));
  REQUIRE(ap_11point({}, 0) == 0.0);
  REQUIRE(ap_11point({0, 1}, 0) == 0.0);
}

TEST_CASE("ap_11point frozen three-rank case") {
  // Ranks: precision 1, 1/2, 2/3; recall 1/2, 1/2, 1. Levels 0..0.5 take the
  // first rank (precision 1), levels 0.6..1.0 take the third (2/3), so the
  // eleven-term sum is (6 + 5 * 2/3) / 11 = 28/33.
  const double ap = ap_11point({1, 0, 1}, 2);
  REQUIRE(ap == Catch::Approx(28.0 / 33.0).epsilon(1e-12));

  double oracle = 0.0;
  const std::vector<double> precision = {1.0, 0.5, 2.0 / 3.0};
  const std::vector<double> recall = {0.5, 0.5, 1.0};
  for (int l = 0; l <= 10; ++l)
    for (std::size_t i = 0; i < precision.size(); ++i)
      if (recall[i] >= l / 10.0) {
        oracle += precision[i] / 11.0;
        break;
      }
  REQUIRE(ap == Catch::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("ap_11point trailing labels move it the right way") {
  Rng rng(502);
  for (int trial = 0; trial < 200; ++trial) {
    const int gts = rng.uniform_int(1, 6);
    std::vector<std::uint8_t> tp;
    int hits = 0;
    const int n = rng.uniform_int(0, 6);
    for (int i = 0; i < n; ++i) {
      const bool hit = hits < gts && rng.uniform() < 0.5;
      tp.push_back(hit ? 1 : 0);
      hits += hit ? 1 : 0;
    }
    const double base = ap_11point(tp, gts);

    std::vector<std::uint8_t> with_fp = tp;
    with_fp.push_back(0);
    REQUIRE(ap_11point(with_fp, gts) <= base + 1e-12);

    if (hits < gts) {
      std::vector<std::uint8_t> with_tp = tp;
      with_tp.push_back(1);
      REQUIRE(ap_11point(with_tp, gts) >= base - 1e-12);
    }
  }
}

TEST_CASE("map_at scores perfect detections as one at every threshold") {
  Dataset ds = make_dataset(2, 2);
  add_gt(ds, 0, 0, make_box(0.3, 0.3, 0.2, 0.2));
  add_gt(ds, 0, 1, make_box(0.7, 0.7, 0.2, 0.3));
  add_gt(ds, 1, 0, make_box(0.5, 0.5, 0.4, 0.2));
  std::vector<DetectionInstance> dets;
  for (const auto& a : ds.annotations) dets.push_back(make_det(a.image_id, a.class_id, 0.9, a.bbox));

  for (int l = 1; l <= 9; ++l) {
    const ApResult r = map_at(ds, dets, l / 10.0);
    REQUIRE(r.map == Catch::Approx(1.0));
    REQUIRE(r.per_class_ap[0] == Catch::Approx(1.0));
    REQUIRE(r.per_class_ap[1] == Catch::Approx(1.0));
  }
  REQUIRE(map_vol(ds, dets) == Catch::Approx(1.0));
  REQUIRE(map_coco(ds, dets) == Catch::Approx(1.0));
}

TEST_CASE("map_at threshold semantics at an exact overlap of 0.6") {
  Dataset ds = make_dataset(1, 1);
  add_gt(ds, 0, 0, make_box(0.5, 0.5, 0.5, 0.5));
  // Nested box with three fifths of the area: IoU exactly 0.15/0.25 = 0.6.
  const std::vector<DetectionInstance> dets = {make_det(0, 0, 0.9, make_box(0.5, 0.5, 0.5, 0.3))};
  REQUIRE(iou_box(ds.annotations[0].bbox, dets[0].det.bbox) == Catch::Approx(0.6).epsilon(1e-12));

  REQUIRE(map_at(ds, dets, 0.5).map == Catch::Approx(1.0));
  REQUIRE(map_at(ds, dets, 0.7).map == Catch::Approx(0.0));
}

TEST_CASE("map_at pools confidences across images but matches within each image") {
  Dataset ds = make_dataset(2, 1);
  add_gt(ds, 0, 0, make_box(0.3, 0.3, 0.3, 0.3));
  add_gt(ds, 1, 0, make_box(0.6, 0.6, 0.3, 0.3));
  // Rank order across images: hit, miss, hit, realising the frozen 28/33 case.
  const std::vector<DetectionInstance> dets = {
      make_det(0, 0, 0.9, make_box(0.3, 0.3, 0.3, 0.3)),
      make_det(1, 0, 0.8, make_box(0.15, 0.85, 0.1, 0.1)),
      make_det(1, 0, 0.7, make_box(0.6, 0.6, 0.3, 0.3)),
  };
  const ApResult r = map_at(ds, dets, 0.5);
  REQUIRE(r.per_class_ap[0] == Catch::Approx(28.0 / 33.0).epsilon(1e-12));

  // The miss ranks between the two hits only because confidences pool across
  // images; it must not be allowed to claim the other image's ground truth.
  REQUIRE(r.pr_points[0].size() == 3);
  REQUIRE(r.pr_points[0][1].precision == Catch::Approx(0.5));
}

TEST_CASE("map_at averages only classes that have ground truth") {
  Dataset ds = make_dataset(1, 3);
  add_gt(ds, 0, 0, make_box(0.3, 0.3, 0.3, 0.3));
  add_gt(ds, 0, 1, make_box(0.7, 0.7, 0.2, 0.2));
  const std::vector<DetectionInstance> dets = {
      make_det(0, 0, 0.9, make_box(0.3, 0.3, 0.3, 0.3)),
      make_det(0, 2, 0.8, make_box(0.5, 0.5, 0.2, 0.2)),  // class without gts
  };
  const ApResult r = map_at(ds, dets, 0.5);
  REQUIRE(r.class_has_gt == std::vector<std::uint8_t>{1, 1, 0});
  REQUIRE(r.map == Catch::Approx(0.5));  // mean of AP 1 (class 0) and AP 0 (class 1)
}

TEST_CASE("map_at is invariant to monotone confidence rescaling") {
  Rng rng(503);
  for (int trial = 0; trial < 20; ++trial) {
    Scene s = random_scene(rng);
    const double t = rng.uniform(0.2, 0.8);
    const double base = map_at(s.ds, s.dets, t).map;

    Scene cubed = s;
    for (auto& d : cubed.dets) d.det.confidence = std::pow(d.det.confidence, 3.0) * 2.0 + 1.0;
    REQUIRE(map_at(cubed.ds, cubed.dets, t).map == Catch::Approx(base).margin(1e-12));
  }
}

TEST_CASE("mask criterion separates detections that box IoU cannot") {
  Dataset ds = make_dataset(1, 1);
  const DatasetImage* im = ds.find_image(0);
  const BoundingBox footprint = make_box(0.5, 0.5, 0.5, 0.5);
  const PixelRect fr = pixel_rect(footprint, im->width, im->height);
  const int mid = (fr.x0 + fr.x1) / 2;

  // Ground truth: box spans the footprint, mask fills only its left half.
  ImageAnnotation a;
  a.image_id = 0;
  a.class_id = 0;
  a.bbox = footprint;
  BinaryMask gtm(im->width, im->height);
  for (int y = fr.y0; y < fr.y1; ++y)
    for (int x = fr.x0; x < mid; ++x) gtm.set(x, y, 1);
  a.rle = rle_encode(gtm).runs;
  ds.annotations.push_back(a);

  // Detection: identical box, mask fills the right half instead.
  DetectionInstance di = make_det(0, 0, 0.9, footprint);
  BinaryMask dm(im->width, im->height);
  for (int y = fr.y0; y < fr.y1; ++y)
    for (int x = mid; x < fr.x1; ++x) dm.set(x, y, 1);
  di.det.mask = dm;

  REQUIRE(map_at(ds, {di}, 0.5).map == Catch::Approx(1.0));  // boxes coincide

  EvalConfig mask_cfg;
  mask_cfg.criterion = MatchCriterion::Mask;
  REQUIRE(map_at(ds, {di}, 0.1, mask_cfg).map == Catch::Approx(0.0));  // masks disjoint

  di.det.mask = gtm;
  REQUIRE(map_at(ds, {di}, 0.9, mask_cfg).map == Catch::Approx(1.0));

  di.det.mask.reset();
  REQUIRE_THROWS_AS(map_at(ds, {di}, 0.5, mask_cfg), std::invalid_argument);
}

TEST_CASE("volume means equal a direct sweep of thresholds") {
  Rng rng(504);
  Scene s = random_scene(rng, 5, 3);

  double vol = 0.0;
  for (int l = 1; l <= 9; ++l) vol += map_at(s.ds, s.dets, l / 10.0).map;
  REQUIRE(map_vol(s.ds, s.dets) == Catch::Approx(vol / 9.0).epsilon(1e-12));

  double coco = 0.0;
  for (int i = 0; i < 10; ++i) coco += map_at(s.ds, s.dets, 0.5 + i * 0.05).map;
  REQUIRE(map_coco(s.ds, s.dets) == Catch::Approx(coco / 10.0).epsilon(1e-12));
}

TEST_CASE("error taxonomy classifies constructed detections") {
  // Four classes in two groups: {0,1} and {2,3}.
  const std::vector<int> groups = {0, 0, 1, 1};
  Dataset ds = make_dataset(1, 4);
  add_gt(ds, 0, 0, make_box(0.25, 0.25, 0.3, 0.3));
  add_gt(ds, 0, 1, make_box(0.75, 0.25, 0.3, 0.3));
  add_gt(ds, 0, 2, make_box(0.25, 0.75, 0.3, 0.3));
  add_gt(ds, 0, 3, make_box(0.75, 0.75, 0.3, 0.3));

  SECTION("exact hit is Corr") {
    const auto eb = error_taxonomy(ds, {make_det(0, 0, 0.9, ds.annotations[0].bbox)}, groups);
    REQUIRE(eb.considered == 1);
    REQUIRE(eb.corr == Catch::Approx(1.0));
    REQUIRE(eb.fp_loc + eb.fp_sim + eb.fp_dissim + eb.fp_backgr == Catch::Approx(0.0));
  }

  SECTION("same class at IoU 0.3 is Loc") {
    // Nested box with 0.3 of the gt area: IoU = 0.027/0.09 = 0.3 exactly.
    const BoundingBox shrunk = make_box(0.25, 0.25, 0.3, 0.09);
    REQUIRE(iou_box(ds.annotations[0].bbox, shrunk) == Catch::Approx(0.3).epsilon(1e-12));
    const auto eb = error_taxonomy(ds, {make_det(0, 0, 0.9, shrunk)}, groups);
    REQUIRE(eb.loc == Catch::Approx(1.0));
    REQUIRE(eb.fp_loc == Catch::Approx(100.0));
  }

  SECTION("overlap with the other class of the same group is Sim") {
    const auto eb = error_taxonomy(ds, {make_det(0, 0, 0.9, ds.annotations[1].bbox)}, groups);
    REQUIRE(eb.sim == Catch::Approx(1.0));
    REQUIRE(eb.fp_sim == Catch::Approx(100.0));
  }

  SECTION("overlap with an out-of-group class is Dissim") {
    const auto eb = error_taxonomy(ds, {make_det(0, 0, 0.9, ds.annotations[2].bbox)}, groups);
    REQUIRE(eb.dissim == Catch::Approx(1.0));
  }

  SECTION("no overlap anywhere is Backgr") {
    const auto eb = error_taxonomy(ds, {make_det(0, 0, 0.9, make_box(0.5, 0.5, 0.05, 0.05))}, groups);
    REQUIRE(eb.backgr == Catch::Approx(1.0));
    REQUIRE(eb.fp_backgr == Catch::Approx(100.0));
  }

  SECTION("same-class overlap wins over a stronger cross-class overlap") {
    // The detection sits exactly on a same-group class-1 gt (IoU 1) while
    // overlapping its own class at 0.3; the weak same-class overlap still
    // classifies it as Loc, not Sim.
    const BoundingBox shrunk = make_box(0.25, 0.25, 0.3, 0.09);
    Dataset two = ds;
    add_gt(two, 0, 1, shrunk);
    const auto eb = error_taxonomy(two, {make_det(0, 0, 0.9, shrunk)}, groups);
    REQUIRE(eb.loc == Catch::Approx(1.0));
    REQUIRE(eb.sim == Catch::Approx(0.0));
  }
}

TEST_CASE("error taxonomy looks at the top-ranked detections per class only") {
  const std::vector<int> groups = {0};
  Dataset ds = make_dataset(1, 1);
  add_gt(ds, 0, 0, make_box(0.3, 0.3, 0.3, 0.3));
  // One gt, so only the highest-confidence detection counts; it misses.
  const std::vector<DetectionInstance> dets = {
      make_det(0, 0, 0.9, make_box(0.8, 0.8, 0.1, 0.1)),
      make_det(0, 0, 0.5, make_box(0.3, 0.3, 0.3, 0.3)),
  };
  const auto eb = error_taxonomy(ds, dets, groups);
  REQUIRE(eb.considered == 1);
  REQUIRE(eb.backgr == Catch::Approx(1.0));
  REQUIRE(eb.corr == Catch::Approx(0.0));
}

TEST_CASE("error taxonomy fractions sum to one and FP shares to hundred") {
  Rng rng(505);
  const std::vector<int> groups = {0, 0, 1};
  for (int trial = 0; trial < 50; ++trial) {
    Scene s = random_scene(rng, 3, 3);
    const auto eb = error_taxonomy(s.ds, s.dets, groups);
    if (eb.considered == 0) continue;
    REQUIRE(eb.corr + eb.loc + eb.sim + eb.dissim + eb.backgr == Catch::Approx(1.0).margin(1e-9));
    const double fp_sum = eb.fp_loc + eb.fp_sim + eb.fp_dissim + eb.fp_backgr;
    if (eb.corr == 1.0)
      REQUIRE(fp_sum == Catch::Approx(0.0));
    else
      REQUIRE(fp_sum == Catch::Approx(100.0).margin(1e-6));
  }
}

TEST_CASE("evaluation rejects malformed inputs") {
  Dataset ds = make_dataset(1, 2);
  add_gt(ds, 0, 0, make_box(0.5, 0.5, 0.3, 0.3));

  REQUIRE_THROWS_AS(map_at(ds, {make_det(0, 7, 0.9, make_box(0.5, 0.5, 0.1, 0.1))}, 0.5),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(error_taxonomy(ds, {}, {0}), std::invalid_argument);  // one group per class

  Dataset bad = ds;
  bad.annotations[0].class_id = 9;
  REQUIRE_THROWS_AS(map_at(bad, {}, 0.5), std::invalid_argument);
}

TEST_CASE("eval_report carries per-class, aggregate and taxonomy sections") {
  Dataset ds = make_dataset(1, 2);
  add_gt(ds, 0, 0, make_box(0.3, 0.3, 0.3, 0.3));
  const std::vector<DetectionInstance> dets = {make_det(0, 0, 0.9, make_box(0.3, 0.3, 0.3, 0.3))};
  EvalConfig cfg;
  cfg.iou_thresholds = {0.5, 0.7};
  const std::vector<int> groups = {0, 0};

  const auto rep = eval_report(ds, dets, cfg, &groups);
  REQUIRE(rep.contains("per_class"));
  REQUIRE(rep["mAP"].size() == 2);
  REQUIRE(rep["mAP_vol"].get<double>() == Catch::Approx(1.0));
  REQUIRE(rep["taxonomy"]["corr"].get<double>() == Catch::Approx(1.0));
  REQUIRE(rep["per_class"].contains("class0"));
  REQUIRE_FALSE(rep["per_class"].contains("class1"));
}
