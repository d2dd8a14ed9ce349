#pragma once

#include <Eigen/Core>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ov3d/geometry3d.hpp"
#include "ov3d/rng.hpp"
#include "ov3d/scenegen.hpp"

namespace ov3d {

using Mat = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

enum class Modality { kPointCloud, kImage };

/// Named dense tensors with shapes fixed at construction. Iteration order is
/// insertion order, which is also the checkpoint order.
class ParamStore {
 public:
  std::size_t add(const std::string& name, Mat value);

  std::size_t size() const { return values_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;

  Mat& operator[](std::size_t i) { return values_[i]; }
  const Mat& operator[](std::size_t i) const { return values_[i]; }
  Mat& at(std::string_view name) { return values_[index_of(name)]; }
  const Mat& at(std::string_view name) const { return values_[index_of(name)]; }

  ParamStore zeros_like() const;
  void set_zero();
  void add_scaled(const ParamStore& other, double scale);
  bool same_layout(const ParamStore& other) const;
  bool all_finite() const;
  std::size_t total_elements() const;
  bool operator==(const ParamStore& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<Mat> values_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

/// Dense layer y = W x + b over row-batched inputs (n x in -> n x out).
struct Linear {
  std::size_t weight = 0;
  std::size_t bias = 0;
  int in = 0;
  int out = 0;

  static Linear create(ParamStore& params, const std::string& name, int in, int out, Rng& rng);
  Mat forward(const ParamStore& params, const Mat& x) const;
  /// Accumulates parameter gradients; returns dL/dx when `want_input` is set.
  Mat backward(const ParamStore& params, const Mat& x, const Mat& dy, ParamStore& grads,
               bool want_input = true) const;
};

/// Shared per-point MLP, coordinate-wise max pool, then a linear layer.
struct PointEncoder {
  Linear l1;
  Linear l2;
  Linear l3;

  struct Cache {
    Mat x;
    Mat a1;
    Mat h1;
    Mat a2;
    Mat h2;
    std::vector<int> argmax;
    Mat pooled;
    VecX out;
  };

  static PointEncoder create(ParamStore& params, const std::string& name, int hidden1, int hidden2, int out,
                             Rng& rng);
  /// Throws EmptyRoi for zero points.
  Cache forward(const ParamStore& params, const Mat& points) const;
  Mat backward(const ParamStore& params, const Cache& cache, const VecX& d_out, ParamStore& grads,
               bool want_input = true) const;
};

/// Flattened crop, Linear -> ReLU -> Linear.
struct ImageEncoder {
  Linear l1;
  Linear l2;
  int crop_size = 32;

  struct Cache {
    Mat x;
    Mat a1;
    Mat h1;
    VecX out;
  };

  static ImageEncoder create(ParamStore& params, const std::string& name, int crop_size, int hidden, int out,
                             Rng& rng);
  /// The crop is resampled to crop_size x crop_size by nearest neighbor.
  Cache forward(const ParamStore& params, const Image& crop) const;
  void backward(const ParamStore& params, const Cache& cache, const VecX& d_out, ParamStore& grads) const;
};

/// Unit-norm embedding h = P f / |P f| tagged with label, modality and anchor.
struct EmbeddingVector {
  VecX h;
  int label = -1;
  Modality modality = Modality::kPointCloud;
  std::optional<Vec3> anchor;
};

/// Bias-free linear map followed by L2 normalization, so the embedding is
/// invariant to the scale of the feature.
struct ProjectionHead {
  std::size_t weight = 0;
  int in = 0;
  int out = 0;

  struct Cache {
    VecX f;
    VecX z;
    double norm = 0.0;
    VecX h;
  };

  static ProjectionHead create(ParamStore& params, const std::string& name, int in, int out, Rng& rng);
  /// Throws DegenerateNorm when |P f| < 1e-12.
  Cache forward(const ParamStore& params, const VecX& f) const;
  /// Backpropagates dL/dh through the normalization; returns dL/df.
  VecX backward(const ParamStore& params, const Cache& cache, const VecX& d_h, ParamStore& grads) const;
};

struct RoiFeature {
  VecX values;
  Modality modality = Modality::kPointCloud;
  std::optional<Vec3> anchor;
};

struct ModelConfig {
  int num_classes = 8;  // foreground vocabulary; background is index num_classes
  int queries_3d = 24;
  int queries_2d = 9;
  int point_hidden1 = 32;
  int point_hidden2 = 64;
  int feature_dim = 64;
  int embed_dim = 32;
  int global_dim = 32;
  int box_hidden = 64;
  int image_hidden = 64;
  int crop_size = 32;
  int neighborhood_points = 32;
  double neighborhood_radius = 1.0;
  int roi_max_points = 48;
  int image_pool = 8;
  int patch_pool = 16;
  int patch_window = 4;
  int query_dim = 8;

  int vocab() const { return num_classes + 1; }
  int background() const { return num_classes; }
};

/// Gradient of a scalar with respect to the seven box parameters.
struct Box3DGrad {
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Zero();
  double yaw = 0.0;
};

struct Box2DGrad {
  Vec2 min = Vec2::Zero();
  Vec2 max = Vec2::Zero();
};

struct Proposal3D {
  Box3D box;
  VecX logits;
  double confidence = 0.0;
  RoiFeature feature;
  Vec3 seed = Vec3::Zero();
  bool empty = false;
};

struct Proposal2D {
  Box2D box;
  VecX logits;
  double confidence = 0.0;
  RoiFeature feature;
  bool has_feature = false;
};

/// Layer layout shared by both detectors and heads. Holds only indices into
/// a ParamStore, so one Model serves any store with the same layout.
class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  /// Fresh parameters, Glorot-uniform weights and zero biases.
  ParamStore init(std::uint64_t seed) const;
  /// Throws FormatError if `params` does not match this layout.
  void check_layout(const ParamStore& params) const;

  PointEncoder global3d;
  PointEncoder local3d;
  PointEncoder roi3d;
  Linear box1_3d;
  Linear box2_3d;
  Linear cls3d;
  ProjectionHead proj3d;

  Linear global2d;
  Linear patch2d;
  std::size_t queries2d = 0;
  Linear box1_2d;
  Linear box2_2d;
  ImageEncoder roi2d;
  Linear cls2d;
  ProjectionHead proj2d;

 private:
  ParamStore build(Rng& rng) const;
  ModelConfig cfg_;
  ParamStore layout_;
};

// ---------------------------------------------------------------------------
// Single-feature operations.

RoiFeature encode_pointcloud_roi(const Model& model, const ParamStore& params, const std::vector<Vec3>& local_points);
RoiFeature encode_image_roi(const Model& model, const ParamStore& params, const Image& crop);
EmbeddingVector project_and_normalize(const Model& model, const ParamStore& params, const RoiFeature& f,
                                      int label = -1);
VecX classify(const ParamStore& params, const Linear& head, const VecX& f);

/// Softmax over logits.
VecX softmax(const VecX& logits);
/// Max softmax probability over foreground classes (last logit is background).
double foreground_confidence(const VecX& logits);
/// Argmax over foreground classes, lowest index on ties.
int foreground_argmax(const VecX& logits);

// ---------------------------------------------------------------------------
// Detectors.

struct Det3DCache;
struct Det2DCache;

struct Det3DOutput {
  std::vector<Proposal3D> proposals;
  std::shared_ptr<Det3DCache> cache;
};

struct Det2DOutput {
  std::vector<Proposal2D> proposals;
  std::shared_ptr<Det2DCache> cache;
};

/// ROI input for the points `inside` a box: centered on their centroid, world
/// axes, meters, strided down to at most `max_points`.
Mat roi_points(const std::vector<Vec3>& points, const std::vector<std::size_t>& inside, int max_points);

/// ROI selection (points inside a box, nearest-pixel crops) is piecewise
/// constant in the box and the backward pass treats it as a stop-gradient.
/// While a RoiGeometryFreeze is alive the first pass records every ROI box in
/// call order and later passes replay them, so finite differences see the
/// same function the backward pass differentiates. One per thread.
class RoiGeometryFreeze {
 public:
  RoiGeometryFreeze();
  ~RoiGeometryFreeze();
  RoiGeometryFreeze(const RoiGeometryFreeze&) = delete;
  RoiGeometryFreeze& operator=(const RoiGeometryFreeze&) = delete;
  /// Call before each evaluation.
  void begin_pass();
};

/// Identity unless a RoiGeometryFreeze is replaying.
Box3D roi_geometry(const Box3D& box);
Box2D roi_geometry(const Box2D& box);

/// Farthest-point sampling, starting from index 0.
std::vector<std::size_t> farthest_point_sample(const std::vector<Vec3>& points, int count);

Det3DOutput forward_detector_3d(const Model& model, const ParamStore& params, const std::vector<Vec3>& points,
                                const Vec3& extent);

struct Det3DGrads {
  std::vector<Box3DGrad> box;
  std::vector<VecX> logits;   // empty vector entries mean zero
  std::vector<VecX> feature;  // same convention
  explicit Det3DGrads(std::size_t q) : box(q), logits(q), feature(q) {}
};

void backward_detector_3d(const Model& model, const ParamStore& params, const Det3DOutput& out,
                          const Det3DGrads& grads_in, ParamStore& grads);

/// With `with_roi` false only boxes are produced; features, logits and
/// confidences can be filled later per proposal with compute_roi_2d.
Det2DOutput forward_detector_2d(const Model& model, const ParamStore& params, const Image& image,
                                bool with_roi = true);
void compute_roi_2d(const Model& model, const ParamStore& params, const Image& image, Det2DOutput& out,
                    std::size_t index);

struct Det2DGrads {
  std::vector<Box2DGrad> box;
  std::vector<VecX> logits;
  std::vector<VecX> feature;
  explicit Det2DGrads(std::size_t q) : box(q), logits(q), feature(q) {}
};

void backward_detector_2d(const Model& model, const ParamStore& params, const Det2DOutput& out,
                          const Det2DGrads& grads_in, ParamStore& grads);

// ---------------------------------------------------------------------------
// Verification and persistence.

/// Loss closure: returns the loss and, when `grads` is non-null, accumulates
/// the analytic gradient into it.
using LossClosure = std::function<double(const ParamStore& params, ParamStore* grads)>;

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
  /// The central difference cannot see below its rounding resolution
  /// ulp(loss) / epsilon, yet the 1e-8 floor turns that noise into relative
  /// errors near 1e-2 on flat pieces and saturated softmax entries. A
  /// coordinate is resolved when max(|analytic|, |fd|) is at least
  /// kResolvedFactor resolutions; the two groups are reported apart, the
  /// unresolved one as |analytic - fd| in units of the resolution.
  static constexpr double kResolvedFactor = 1e4;
  double max_relative_error_resolved = 0.0;
  double max_unresolved_error = 0.0;
  std::size_t unresolved = 0;
};

/// Central differences on `per_tensor` random coordinates of every tensor
/// (all coordinates when a tensor is smaller). Relative error is
/// |g_analytic - g_fd| / max(1e-8, |g_fd|). Throws NonFiniteGradient.
GradientCheckResult gradient_check(const LossClosure& loss, const ParamStore& params, double epsilon,
                                   std::size_t per_tensor = 50, std::uint64_t seed = 0,
                                   const std::vector<std::string>& only_tensors = {});

/// Writes atomically (temp file + rename).
void save_checkpoint(const std::string& path, const ParamStore& params);
ParamStore load_checkpoint(const std::string& path);
std::vector<char> serialize_checkpoint(const ParamStore& params);
ParamStore deserialize_checkpoint(const std::vector<char>& bytes);

}  // namespace ov3d
