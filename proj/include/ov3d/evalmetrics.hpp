#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ov3d/encoders.hpp"
#include "ov3d/geometry3d.hpp"
#include "ov3d/scenegen.hpp"

namespace ov3d {

struct Detection {
  std::int64_t scene_id = 0;
  std::size_t index = 0;  // proposal index, the final tie-break
  int class_id = 0;
  double confidence = 0.0;
  Box3D box;
};

struct GroundTruth {
  std::int64_t scene_id = 0;
  int class_id = 0;
  Box3D box;
};

/// Greedy matching for one scene and one class. `detections` must already be
/// sorted by descending confidence. Each detection takes the unmatched GT of
/// highest IoU (lowest index on ties) if that IoU reaches `threshold`.
std::vector<bool> match_detections(const std::vector<Box3D>& detections, const std::vector<Box3D>& ground_truths,
                                   double threshold);

/// All-point interpolated AP from TP flags ordered by descending confidence.
/// Undefined (nullopt) when gt_count is 0.
std::optional<double> average_precision(const std::vector<bool>& tp, std::size_t gt_count);

struct ClassMetrics {
  int class_id = 0;
  std::optional<double> ap25;
  int gt = 0;
  int detections = 0;
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  double map25 = 0.0;
  double ar25 = 0.0;
  int gt_total = 0;
  int gt_recalled = 0;
};

/// Descending confidence, then scene id, then proposal index.
void sort_detections(std::vector<Detection>& detections);

/// AP per class over all scenes, mAP over classes with ground truth, and AR as
/// the pooled fraction of ground truths hit by any same-class detection.
MetricsReport evaluate_detections(std::vector<Detection> detections, const std::vector<GroundTruth>& ground_truths,
                                  const std::vector<int>& class_set, double threshold = 0.25);

/// One detection per proposal: its foreground argmax class and confidence.
std::vector<Detection> detect_scene(const Model& model, const ParamStore& params, const Scene& scene);

std::vector<GroundTruth> ground_truths_of(const std::vector<Scene>& scenes);

MetricsReport evaluate(const Model& model, const ParamStore& params, const std::vector<Scene>& scenes,
                       const VocabularySplit& split, const std::vector<int>& class_set);

std::string report_table(const MetricsReport& report);
std::string report_jsonl(const MetricsReport& report);

/// Detection dump: one JSON line per detection.
std::string dump_detections(const std::vector<Detection>& detections);
std::vector<Detection> parse_detections(const std::string& text);

}  // namespace ov3d
