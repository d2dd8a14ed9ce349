#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ov3d/dataset.hpp"
#include "ov3d/encoders.hpp"
#include "ov3d/evalmetrics.hpp"
#include "ov3d/losses.hpp"
#include "ov3d/pseudolabel.hpp"

namespace ov3d {

enum class OptimizerKind { kSgd, kAdam };

const char* to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& name);

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 4;
  int classification_per_step = 4;
  int epochs_phase1 = 40;
  int epochs_phase2 = 40;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  std::uint64_t seed = 0;
  double label_ratio = 1.0;
  bool use_pseudo = true;
  LossWeights weights;
  ScheduleConfig schedule;
  ContrastiveConfig contrastive;

  void validate() const;
};

struct OptimizerState {
  ParamStore m;
  ParamStore v;
  long step = 0;
};

/// sgd: p -= lr g. adam: bias-corrected moments. Parameters are rounded to
/// float32 after the update so checkpoints round-trip exactly.
/// Throws NonFiniteUpdate on a non-finite gradient or result.
void optimizer_step(ParamStore& params, const ParamStore& grads, OptimizerState& state, const TrainConfig& cfg);

/// Marks floor(ratio * n) scenes as labeled via a seeded shuffle; the rest
/// have every annotation hidden.
std::vector<Scene> apply_label_ratio(const std::vector<Scene>& scenes, double ratio, std::uint64_t seed);

/// Visible ground truth of one training scene: labeled seen-class objects.
std::vector<SupervisionRecord> visible_supervision(const Scene& scene, const VocabularySplit& split);

struct EpochRecord {
  int phase = 1;
  int epoch = 0;
  int steps = 0;
  LossTerms mean;  // step-averaged components
  double total = 0.0;
  bool regenerated = false;
  std::map<int, int> pseudo_per_class;
  int pseudo_k = 0;
};

struct EvalSnapshot {
  int phase = 1;
  int epoch = 0;
  int refreshes = 0;  // pseudo-label generations so far
  MetricsReport report;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::vector<EvalSnapshot> snapshots;
  int regenerations = 0;

  /// One JSON object per line.
  std::string to_jsonl() const;
};

/// Optional hooks. `evaluate` is called at the end of each pseudo-label
/// period in phase 2 (right before each regeneration and after the last
/// epoch); its reports land in TrainLog::snapshots.
struct TrainHooks {
  std::function<MetricsReport(const ParamStore&)> evaluate;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Phase 1: seen ground truth on labeled scenes plus max-size supervision.
/// Throws DivergenceDetected on a non-finite loss.
ParamStore train_phase1(const Model& model, const Dataset& data, const TrainConfig& cfg, TrainLog& log,
                        const TrainHooks& hooks = {});

/// Phase 2: pseudo labels for unseen classes refreshed every period, the
/// contrastive term, starting from phase-1 parameters. The final store is
/// returned through `final_store` when given.
ParamStore train_phase2(const Model& model, const Dataset& data, const ParamStore& phase1, const TrainConfig& cfg,
                        TrainLog& log, const TrainHooks& hooks = {}, PseudoStore* final_store = nullptr);

}  // namespace ov3d
