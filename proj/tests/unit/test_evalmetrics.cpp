#include <algorithm>
#include <map>

#include "doctest.h"
#include "ov3d/errors.hpp"
#include "ov3d/evalmetrics.hpp"
#include "unit/helpers.hpp"

using namespace ov3d;
using namespace ov3d::testing;

namespace {

Box3D cube(double x, double y, double side = 1.0) {
  Box3D b;
  b.center = Vec3(x, y, 0.5);
  b.size = Vec3(side, side, 1.0);
  return b;
}

// Axis-aligned overlap written out per axis, independent of iou_3d.
double aabb_iou(const Box3D& a, const Box3D& b) {
  double inter = 1.0;
  for (int k = 0; k < 3; ++k) {
    const double lo = std::max(a.center[k] - a.size[k] / 2, b.center[k] - b.size[k] / 2);
    const double hi = std::min(a.center[k] + a.size[k] / 2, b.center[k] + b.size[k] / 2);
    inter *= std::max(0.0, hi - lo);
  }
  const double va = a.size.prod();
  const double vb = b.size.prod();
  return inter / (va + vb - inter);
}

struct Scalar {
  std::map<int, double> ap;
  double map = 0.0;
  double ar = 0.0;
};

// Reference evaluator: AP as the mean over ground truths of the best
// precision reached at or after the rank where each one is first matched.
Scalar scalar_evaluate(std::vector<Detection> dets, const std::vector<GroundTruth>& gts,
                       const std::vector<int>& classes) {
  std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.scene_id != b.scene_id) return a.scene_id < b.scene_id;
    return a.index < b.index;
  });
  Scalar out;
  int with_gt = 0;
  int total = 0, recalled = 0;
  for (int c : classes) {
    std::vector<int> gt_idx;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].class_id == c) gt_idx.push_back(static_cast<int>(g));
    }
    std::vector<bool> taken(gts.size(), false);
    std::vector<int> flags;
    for (const auto& d : dets) {
      if (d.class_id != c) continue;
      int best = -1;
      double best_iou = -1;
      for (int g : gt_idx) {
        if (gts[g].scene_id != d.scene_id || taken[g]) continue;
        const double v = aabb_iou(d.box, gts[g].box);
        if (v > best_iou) {
          best_iou = v;
          best = g;
        }
      }
      const bool hit = best >= 0 && best_iou >= 0.25;
      if (hit) taken[best] = true;
      flags.push_back(hit);
    }
    for (int g : gt_idx) {
      ++total;
      for (const auto& d : dets) {
        if (d.class_id == c && d.scene_id == gts[g].scene_id && aabb_iou(d.box, gts[g].box) >= 0.25) {
          ++recalled;
          break;
        }
      }
    }
    if (gt_idx.empty()) continue;
    long double sum = 0.0L;
    int hits = 0;
    for (std::size_t r = 0; r < flags.size(); ++r) {
      if (!flags[r]) continue;
      ++hits;
      long double best_p = 0.0L;
      int h = hits - 1;
      for (std::size_t s = r; s < flags.size(); ++s) {
        h += flags[s];
        best_p = std::max(best_p, static_cast<long double>(h) / static_cast<long double>(s + 1));
      }
      sum += best_p;
    }
    out.ap[c] = static_cast<double>(sum / static_cast<long double>(gt_idx.size()));
    out.map += out.ap[c];
    ++with_gt;
  }
  out.map = with_gt ? out.map / with_gt : 0.0;
  out.ar = total ? static_cast<double>(recalled) / total : 0.0;
  return out;
}

}  // namespace

TEST_CASE("single detections") {
  CHECK(*average_precision({true}, 1) == 1.0);
  CHECK(*average_precision({false}, 1) == 0.0);
  CHECK(*average_precision({}, 3) == 0.0);
  CHECK_FALSE(average_precision({true}, 0).has_value());
  CHECK(*average_precision({true, false, true}, 2) == 5.0 / 6.0);
  CHECK(*average_precision({false, true}, 1) == doctest::Approx(0.5));
  CHECK(*average_precision({true, true}, 4) == doctest::Approx(0.5));
}

TEST_CASE("[TP, FP, TP] over two ground truths through the full evaluator") {
  const std::vector<GroundTruth> gts{{0, 3, cube(0, 0)}, {0, 3, cube(5, 5)}};
  const std::vector<Detection> dets{
      {0, 0, 3, 0.9, cube(0.05, 0)}, {0, 1, 3, 0.8, cube(9, 9)}, {0, 2, 3, 0.7, cube(5, 5.1)}};
  const MetricsReport r = evaluate_detections(dets, gts, {3});
  REQUIRE(r.per_class.size() == 1);
  CHECK(*r.per_class[0].ap25 == 5.0 / 6.0);
  CHECK(r.map25 == 5.0 / 6.0);
  CHECK(r.ar25 == 1.0);
  CHECK(r.gt_recalled == 2);
}

TEST_CASE("matching: duplicates, thresholds and scenes") {
  const std::vector<Box3D> g{cube(0, 0)};
  CHECK(match_detections({cube(0, 0), cube(0, 0)}, g, 0.25) == std::vector<bool>{true, false});
  // Unit cubes shifted by s overlap (1 - s) / (1 + s): 0.258 at 0.59, 0.242 at 0.61.
  CHECK(match_detections({cube(0.59, 0)}, g, 0.25) == std::vector<bool>{true});
  CHECK(match_detections({cube(0.61, 0)}, g, 0.25) == std::vector<bool>{false});
  // The earlier detection takes the closer GT, the later one the other.
  CHECK(match_detections({cube(0.2, 0), cube(0.2, 0)}, {cube(0, 0), cube(0.4, 0)}, 0.25) ==
        std::vector<bool>{true, true});

  // A detection in another scene never matches.
  const MetricsReport r = evaluate_detections({{1, 0, 2, 0.9, cube(0, 0)}}, {{0, 2, cube(0, 0)}}, {2});
  CHECK(*r.per_class[0].ap25 == 0.0);
  CHECK(r.ar25 == 0.0);
  // Wrong class, no credit.
  const MetricsReport w = evaluate_detections({{0, 0, 1, 0.9, cube(0, 0)}}, {{0, 2, cube(0, 0)}}, {1, 2});
  CHECK_FALSE(w.per_class[0].ap25.has_value());
  CHECK(*w.per_class[1].ap25 == 0.0);
  CHECK(w.map25 == 0.0);
}

TEST_CASE("evaluator agrees with an independent scalar implementation") {
  Rng rng(17);
  const std::vector<int> classes{0, 1, 2};
  for (int set = 0; set < 50; ++set) {
    std::vector<GroundTruth> gts;
    std::vector<Detection> dets;
    const int scenes = 1 + static_cast<int>(rng.index(4));
    for (int s = 0; s < scenes; ++s) {
      const int ng = static_cast<int>(rng.index(5));
      for (int g = 0; g < ng; ++g) {
        gts.push_back(
            {s, static_cast<int>(rng.index(3)), cube(rng.uniform(0, 4), rng.uniform(0, 4), rng.uniform(0.5, 1.5))});
      }
      const int nd = static_cast<int>(rng.index(8));
      for (int d = 0; d < nd; ++d) {
        Detection det;
        det.scene_id = s;
        det.index = static_cast<std::size_t>(d);
        det.class_id = static_cast<int>(rng.index(3));
        // Coarse confidences so ties exercise the ordering rule.
        det.confidence = static_cast<double>(rng.index(5)) / 4.0;
        if (!gts.empty() && rng.uniform() < 0.6) {
          const auto& g = gts[rng.index(gts.size())];
          det.box = g.box;
          det.box.center += Vec3(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), 0);
          det.scene_id = g.scene_id;
          if (rng.uniform() < 0.7) det.class_id = g.class_id;
        } else {
          det.box = cube(rng.uniform(0, 4), rng.uniform(0, 4));
        }
        dets.push_back(det);
      }
    }
    const MetricsReport r = evaluate_detections(dets, gts, classes);
    const Scalar s = scalar_evaluate(dets, gts, classes);
    CHECK(r.map25 == s.map);
    CHECK(r.ar25 == s.ar);
    for (const auto& c : r.per_class) {
      CHECK(c.ap25.has_value() == (s.ap.count(c.class_id) == 1));
      if (c.ap25) CHECK(*c.ap25 == s.ap.at(c.class_id));
    }

    // Input order does not matter.
    auto shuffled = dets;
    rng.shuffle(shuffled);
    CHECK(report_jsonl(evaluate_detections(shuffled, gts, classes)) == report_jsonl(r));
  }
}

TEST_CASE("turning a false positive into a true positive never lowers AP") {
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    std::vector<bool> flags(1 + rng.index(12));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < flags.size(); ++i) {
      flags[i] = rng.uniform() < 0.5;
      hits += flags[i];
    }
    const std::size_t gt = hits + 1 + rng.index(3);
    const double before = *average_precision(flags, gt);
    CHECK(before >= 0.0);
    CHECK(before <= 1.0);
    for (std::size_t i = 0; i < flags.size(); ++i) {
      if (flags[i]) continue;
      auto better = flags;
      better[i] = true;
      CHECK(*average_precision(better, gt) >= before - 1e-15);
    }
  }
}

TEST_CASE("recall counts any same-class hit in the scene") {
  // Two detections on one GT: AP sees a duplicate, recall still counts one.
  const std::vector<GroundTruth> gts{{0, 1, cube(0, 0)}, {0, 1, cube(3, 3)}, {1, 1, cube(0, 0)}};
  const std::vector<Detection> dets{{0, 0, 1, 0.9, cube(0, 0)}, {0, 1, 1, 0.8, cube(0.1, 0)}};
  const MetricsReport r = evaluate_detections(dets, gts, {1});
  CHECK(r.gt_total == 3);
  CHECK(r.gt_recalled == 1);
  CHECK(r.ar25 == doctest::Approx(1.0 / 3.0));
  CHECK(*r.per_class[0].ap25 == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("oracle and empty detectors") {
  const Scene s = generate_scene(SceneConfig{}, 12, 4);
  const auto gts = ground_truths_of({s});
  std::vector<Detection> oracle;
  std::vector<int> classes;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    oracle.push_back({gts[i].scene_id, i, gts[i].class_id, 1.0, gts[i].box});
    classes.push_back(gts[i].class_id);
  }
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  const MetricsReport r = evaluate_detections(oracle, gts, classes);
  CHECK(r.map25 == 1.0);
  CHECK(r.ar25 == 1.0);
  const MetricsReport e = evaluate_detections({}, gts, classes);
  CHECK(e.map25 == 0.0);
  CHECK(e.ar25 == 0.0);
  CHECK(e.gt_total == static_cast<int>(gts.size()));
  const MetricsReport none = evaluate_detections(oracle, {}, classes);
  CHECK(none.map25 == 0.0);
  for (const auto& c : none.per_class) CHECK_FALSE(c.ap25.has_value());
}

TEST_CASE("model evaluation and reports") {
  const Model model(tiny_model_config());
  const ParamStore params = model.init(1);
  const Dataset d = generate_dataset(small_scene_config(), small_data_config(), 1);
  const MetricsReport r = evaluate(model, params, d.test, d.split, d.split.unseen());
  CHECK(r.per_class.size() == d.split.unseen().size());
  CHECK(r.map25 >= 0.0);
  CHECK(r.map25 <= 1.0);
  const auto dets = detect_scene(model, params, d.test[0]);
  CHECK(dets.size() == static_cast<std::size_t>(model.config().queries_3d));
  for (const auto& det : dets) CHECK(det.scene_id == d.test[0].id);
  VocabularySplit narrow = d.split;
  narrow.test = narrow.seen;
  CHECK_THROWS_AS(evaluate(model, params, d.test, narrow, d.split.unseen()), Error);

  const std::string table = report_table(r);
  CHECK(table.find("mAP25") != std::string::npos);
  const std::string jl = report_jsonl(r);
  CHECK(std::count(jl.begin(), jl.end(), '\n') == static_cast<long>(r.per_class.size() + 2));
}

TEST_CASE("detection dump round trip") {
  Rng rng(3);
  std::vector<Detection> dets;
  for (int i = 0; i < 20; ++i) {
    dets.push_back(
        {static_cast<std::int64_t>(i % 3), static_cast<std::size_t>(i), i % 5, rng.uniform(), random_box(rng)});
  }
  const std::string text = dump_detections(dets);
  const auto back = parse_detections(text);
  REQUIRE(back.size() == dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    CHECK(back[i].scene_id == dets[i].scene_id);
    CHECK(back[i].index == dets[i].index);
    CHECK(back[i].class_id == dets[i].class_id);
    CHECK(back[i].confidence == dets[i].confidence);
    CHECK(back[i].box.center == dets[i].box.center);
    CHECK(back[i].box.size == dets[i].box.size);
    CHECK(back[i].box.yaw == dets[i].box.yaw);
  }
  CHECK(dump_detections(back) == text);
  CHECK_THROWS_AS(parse_detections("{\"scene_id\":0}\n"), FormatError);
}
