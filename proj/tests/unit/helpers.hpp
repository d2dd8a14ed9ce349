#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "ov3d/dataset.hpp"
#include "ov3d/encoders.hpp"
#include "ov3d/geometry3d.hpp"
#include "ov3d/rng.hpp"

namespace ov3d::testing {

inline constexpr double kPi = std::numbers::pi;

inline Box3D random_box(Rng& rng, double spread = 2.0) {
  Box3D b;
  b.center = Vec3(rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-spread, spread));
  b.size = Vec3(rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0));
  b.yaw = rng.uniform(-kPi, kPi);
  return b;
}

/// Second box near the first so that most pairs overlap.
inline Box3D nearby_box(Rng& rng, const Box3D& a) {
  Box3D b;
  b.center = a.center + Vec3(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(-0.4, 0.4));
  b.size = a.size.cwiseProduct(Vec3(rng.uniform(0.6, 1.4), rng.uniform(0.6, 1.4), rng.uniform(0.6, 1.4)));
  b.yaw = a.yaw + rng.uniform(-1.0, 1.0);
  return b;
}

/// Small network so gradient checks stay fast.
inline ModelConfig tiny_model_config() {
  ModelConfig m;
  m.queries_3d = 4;
  m.queries_2d = 4;
  m.point_hidden1 = 8;
  m.point_hidden2 = 8;
  m.feature_dim = 8;
  m.embed_dim = 6;
  m.global_dim = 8;
  m.box_hidden = 8;
  m.image_hidden = 8;
  m.crop_size = 8;
  m.neighborhood_points = 8;
  m.roi_max_points = 12;
  m.image_pool = 4;
  m.patch_pool = 8;
  m.patch_window = 2;
  m.query_dim = 4;
  return m;
}

/// Initialization leaves biases at zero, which puts ReLU kinks exactly at
/// some seed points; a small perturbation moves them off the kink.
inline ParamStore perturbed_params(const Model& model, std::uint64_t seed, double scale = 0.05) {
  ParamStore p = model.init(seed);
  Rng rng(derive_seed(seed, 77));
  for (std::size_t t = 0; t < p.size(); ++t) {
    for (Eigen::Index i = 0; i < p[t].size(); ++i) p[t].data()[i] += scale * rng.normal();
  }
  return p;
}

inline SceneConfig small_scene_config() {
  SceneConfig c;
  c.num_points = 160;
  c.image_width = 48;
  c.image_height = 48;
  return c;
}

inline DataConfig small_data_config() {
  DataConfig d;
  d.train_scenes = 6;
  d.test_scenes = 3;
  d.classification_per_class = 2;
  d.unseen_classes = 4;
  return d;
}

}  // namespace ov3d::testing
