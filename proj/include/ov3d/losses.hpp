#pragma once

#include <cstdint>
#include <vector>

#include "ov3d/encoders.hpp"
#include "ov3d/geometry3d.hpp"
#include "ov3d/scenegen.hpp"

namespace ov3d {

/// Minimum-cost injective assignment of the G columns (targets) of a Q x G
/// cost matrix to distinct rows (proposals). Returns, per target, the
/// proposal index. Requires Q >= G.
std::vector<int> hungarian_match(const Mat& cost);

struct ClsLoss {
  double value = 0.0;
  VecX grad;  // dL/dlogits = softmax - onehot
};

ClsLoss loss_cls(const VecX& logits, int target);

struct Box3DLoss {
  double value = 0.0;
  Box3DGrad grad;  // with respect to the predicted box
};

/// |dc / extent|_1 + |log(size_p / size_g)|_1 + periodic |dyaw| / pi.
Box3DLoss loss_box_3d(const Box3D& pred, const Box3D& gt, const Vec3& extent);

struct Box2DLoss {
  double value = 0.0;
  Box2DGrad grad;
};

/// Corner L1 in image-normalized units plus (1 - IoU).
Box2DLoss loss_box_2d(const Box2D& pred, const Box2D& gt, int width, int height);

/// Index of the largest-area proposal, lowest index on ties.
std::size_t max_size_index(const std::vector<Proposal2D>& proposals);

struct MaxSizeLoss {
  double value = 0.0;
  std::size_t index = 0;
  VecX grad_logits;
};

/// Cross-entropy toward `label` on the max-size proposal only. That proposal
/// must carry logits.
MaxSizeLoss loss_max_size_ign(const std::vector<Proposal2D>& proposals, int label);

enum class ContrastiveMode { kOff, kAugmentation, kPosition, kClass };

const char* to_string(ContrastiveMode mode);
/// Throws ConfigError on an unknown name.
ContrastiveMode parse_contrastive_mode(const std::string& name);

struct ContrastiveConfig {
  double tau0 = 0.2;
  double gamma = 1.1;
  double cross_distance = 1.0;  // distance to any sample without a 3D anchor
  ContrastiveMode mode = ContrastiveMode::kClass;
  bool distance_temperature = true;  // off means gamma is treated as 1
  double weight = 1.0;

  void validate() const;
  double effective_gamma() const { return distance_temperature ? gamma : 1.0; }
  /// tau0 * gamma^dist
  double temperature(double dist) const;
};

struct DeccResult {
  double value = 0.0;
  std::vector<VecX> grads;  // dL/dh per embedding
  int anchors = 0;          // anchors with at least one positive
};

/// Distance between two samples' anchors, or the cross-dataset constant.
double anchor_distance(const EmbeddingVector& a, const EmbeddingVector& b, const ContrastiveConfig& cfg);

/// Throws NoPositives when no anchor has a positive.
DeccResult loss_decc(const std::vector<EmbeddingVector>& batch, const ContrastiveConfig& cfg);

enum class Origin { kGroundTruth, kPseudo };

struct SupervisionRecord {
  Box3D box;
  int class_id = 0;
  Origin origin = Origin::kGroundTruth;
};

/// One training scene with its paired image and the supervision visible to it.
struct SceneSample {
  const Scene* scene = nullptr;
  const Image* image = nullptr;
  std::vector<SupervisionRecord> targets;
};

struct LossWeights {
  double background = 0.1;  // weight of unmatched proposals' background term
  double pseudo = 1.0;      // multiplier on pseudo-label records
};

struct LossTerms {
  double box3d = 0.0;
  double cls3d = 0.0;
  double box2d = 0.0;
  double cls2d = 0.0;
  double ign = 0.0;
  double decc = 0.0;
  bool decc_applied = false;

  double total() const { return box3d + cls3d + box2d + cls2d + ign + decc; }
};

/// Visible 2D supervision obtained by projecting a 3D record into the image.
/// Records entirely behind the camera or thinner than a pixel are dropped.
struct Target2D {
  Box2D box;
  int class_id = 0;
  std::size_t record = 0;
};
std::vector<Target2D> project_targets(const std::vector<SupervisionRecord>& targets, const CameraModel& cam);

/// Detection terms averaged over scenes plus the max-size term averaged over
/// classification samples. Accumulates gradients into `grads` when non-null.
LossTerms assemble_phase1_loss(const Model& model, const ParamStore& params, const std::vector<SceneSample>& scenes,
                               const std::vector<const ClassificationSample*>& classification,
                               const LossWeights& weights, ParamStore* grads);

/// Phase-1 terms over ground truth and pseudo records plus the contrastive
/// term over matched ROI embeddings and max-size embeddings. `aug_seed`
/// drives the augmented views of the augmentation mode.
LossTerms assemble_phase2_loss(const Model& model, const ParamStore& params, const std::vector<SceneSample>& scenes,
                               const std::vector<const ClassificationSample*>& classification,
                               const LossWeights& weights, const ContrastiveConfig& contrastive,
                               std::uint64_t aug_seed, ParamStore* grads);

}  // namespace ov3d
