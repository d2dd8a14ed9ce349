#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ov3d/geometry3d.hpp"

namespace ov3d {

enum class ShapeKind { kCuboid, kCylinder, kLShape };

struct SizeRange {
  double lo = 0.0;
  double hi = 0.0;
};

/// Synthetic object category. Class identity is carried jointly by shape,
/// size and (in images) color.
struct ObjectTemplate {
  int class_id = 0;
  std::string name;
  std::array<SizeRange, 3> size;  // width, depth, height in meters
  Vec3 color = Vec3::Zero();
  ShapeKind shape = ShapeKind::kCuboid;
};

/// Built-in catalog; class ids are dense 0..n-1. n must be in [2, 8].
std::vector<ObjectTemplate> object_catalog(int num_classes);

struct SceneConfig {
  int num_classes = 8;
  Vec3 extent = Vec3(5.0, 5.0, 2.5);  // room spans [0, extent] on each axis
  int min_objects = 1;
  int max_objects = 3;
  int num_points = 512;
  double clutter_fraction = 0.25;
  double wall_fraction = 0.4;  // share of clutter placed on the two far walls
  double center_margin = 1.2;
  double point_noise = 0.005;
  double yaw_max = 0.6;
  double color_jitter = 0.04;
  int image_width = 128;
  int image_height = 128;
  double camera_fov_deg = 70.0;
  int max_attempts = 1000;
  /// Restricts sampled object classes; empty means every catalog class.
  std::vector<int> class_pool;

  void validate() const;
};

struct SceneObject {
  Box3D box;
  int class_id = 0;
  Vec3 color = Vec3::Zero();
  /// Whether this annotation is visible to training.
  bool labeled = true;
};

struct Scene {
  std::int64_t id = 0;
  std::vector<Vec3> points;
  CameraModel camera;
  std::vector<SceneObject> objects;
  Vec3 extent = Vec3::Ones();
};

/// Dense H x W x C float image, row-major with interleaved channels.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, int c = 3, float fill = 0.0f)
      : height(h), width(w), channels(c), pixels(static_cast<std::size_t>(h) * w * c, fill) {}

  float& at(int y, int x, int ch) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + ch]; }
  float at(int y, int x, int ch) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + ch];
  }
  bool operator==(const Image&) const = default;
};

struct PairedImage {
  std::int64_t scene_id = 0;
  Image image;
};

struct ClassificationSample {
  Image image;
  int class_id = 0;
};

struct VocabularySplit {
  std::vector<int> seen;
  std::vector<int> test;
  std::vector<int> classification;

  std::vector<int> unseen() const;
  bool is_seen(int c) const;
  /// Throws ConfigError when seen is not a strict subset of test or test is
  /// not contained in classification.
  void validate() const;
};

constexpr float kBackgroundGray = 0.5f;

Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed, std::int64_t id = 0);

PairedImage render_paired_image(const Scene& scene);

/// Rasterizes the silhouette of one object: returns per-pixel coverage mask.
std::vector<std::uint8_t> object_silhouette(const SceneObject& obj, const CameraModel& cam,
                                            const std::vector<ObjectTemplate>& catalog);

struct ClassificationConfig {
  int per_class = 40;
  int crop_size = 32;
};

/// Balanced single-object crops for every class in `classes`.
std::vector<ClassificationSample> generate_classification_set(const SceneConfig& scene_cfg,
                                                              const ClassificationConfig& cfg,
                                                              const std::vector<int>& classes,
                                                              std::uint64_t seed);

VocabularySplit split_vocabulary(const std::vector<int>& all_classes, int n_unseen, std::uint64_t seed);

/// Nearest-neighbor resample of the pixel rectangle `box` to size x size.
Image crop_resize(const Image& image, const Box2D& box, int size);

}  // namespace ov3d
