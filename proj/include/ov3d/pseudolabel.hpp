#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ov3d/encoders.hpp"
#include "ov3d/losses.hpp"
#include "ov3d/scenegen.hpp"

namespace ov3d {

/// How the 3D side of a pseudo label is scored.
enum class Objectness {
  kForegroundMax,  // max foreground softmax probability (the proposal confidence)
  kNotBackground,  // 1 - background probability
};

const char* to_string(Objectness o);
Objectness parse_objectness(const std::string& name);

struct ScheduleConfig {
  int k0 = 20;
  int k_step = 10;
  int period = 10;
  double confidence_floor = 0.3;
  double duplicate_iou = 0.25;
  Objectness objectness = Objectness::kNotBackground;

  void validate() const;
  /// k0 50, k_step 10, period 50.
  static ScheduleConfig reference();
};

/// k0 + k_step * floor(epoch / period)
int schedule_k(int epoch, const ScheduleConfig& cfg);

struct PseudoLabel {
  std::int64_t scene_id = 0;
  Box3D box;
  int class_id = 0;
  double confidence = 0.0;  // 3D objectness x 2D class probability
  int epoch = 0;
};

/// Labels ordered by (scene id, descending confidence).
struct PseudoStore {
  std::vector<PseudoLabel> labels;
  int epoch = 0;

  std::map<int, int> count_per_class() const;
  std::vector<SupervisionRecord> records_for(std::int64_t scene_id) const;
  bool operator==(const PseudoStore&) const;
};

/// Everything the generator needs to see about one training scene.
struct PseudoInput {
  const Scene* scene = nullptr;
  const Image* image = nullptr;
};

/// Class probabilities (foreground classes then background) for one
/// proposal and its image crop.
using CropClassifier = std::function<VecX(const PseudoInput& in, const Box3D& box, const Image& crop)>;

/// Boxes from the 3D detector, classes from the 2D classifier (or from
/// `classifier` when given).
PseudoStore generate_pseudo_labels(const Model& model, const ParamStore& params, const std::vector<PseudoInput>& scenes,
                                   const VocabularySplit& split, int epoch, const ScheduleConfig& cfg,
                                   const CropClassifier& classifier = {});

/// Regenerates when epoch % period == 0, otherwise returns `current`.
PseudoStore refresh_if_due(int epoch, const ScheduleConfig& cfg, const PseudoStore& current,
                           const std::function<PseudoStore(int)>& regenerate, bool* regenerated = nullptr);

/// Line-delimited JSON, one label per line.
std::string dump_store(const PseudoStore& store);
PseudoStore parse_store(const std::string& text);

/// Human-readable per-class counts and a ten-bin confidence histogram.
std::string summarize_store(const PseudoStore& store);
std::array<int, 10> confidence_histogram(const PseudoStore& store);

}  // namespace ov3d
