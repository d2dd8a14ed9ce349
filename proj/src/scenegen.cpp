#include "ov3d/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "ov3d/errors.hpp"
#include "ov3d/rng.hpp"

namespace ov3d {

namespace {

constexpr double kPi = std::numbers::pi;

// L-shape proportions: seat height as a fraction of the full height and
// backrest depth as a fraction of the full depth.
constexpr double kSeatFrac = 0.45;
constexpr double kBackFrac = 0.25;

struct LocalBlock {
  Vec3 lo;
  Vec3 hi;
};

std::vector<LocalBlock> lshape_blocks(const Vec3& size) {
  const Vec3 h = 0.5 * size;
  LocalBlock seat{Vec3(-h.x(), -h.y(), -h.z()), Vec3(h.x(), h.y(), -h.z() + kSeatFrac * size.z())};
  LocalBlock back{Vec3(-h.x(), h.y() - kBackFrac * size.y(), -h.z()), Vec3(h.x(), h.y(), h.z())};
  return {seat, back};
}

bool inside_block(const LocalBlock& b, const Vec3& p, double shrink) {
  for (int a = 0; a < 3; ++a) {
    if (p[a] <= b.lo[a] + shrink || p[a] >= b.hi[a] - shrink) return false;
  }
  return true;
}

// Uniform sample on the five visible faces (no bottom) of an axis-aligned block.
Vec3 sample_block_surface(const LocalBlock& b, Rng& rng) {
  const Vec3 e = b.hi - b.lo;
  const double a_top = e.x() * e.y();
  const double a_xz = e.x() * e.z();
  const double a_yz = e.y() * e.z();
  const double total = a_top + 2.0 * a_xz + 2.0 * a_yz;
  double r = rng.uniform() * total;
  const double u = rng.uniform();
  const double v = rng.uniform();
  if ((r -= a_top) < 0.0) return {b.lo.x() + u * e.x(), b.lo.y() + v * e.y(), b.hi.z()};
  if ((r -= a_xz) < 0.0) return {b.lo.x() + u * e.x(), b.lo.y(), b.lo.z() + v * e.z()};
  if ((r -= a_xz) < 0.0) return {b.lo.x() + u * e.x(), b.hi.y(), b.lo.z() + v * e.z()};
  if ((r -= a_yz) < 0.0) return {b.lo.x(), b.lo.y() + u * e.y(), b.lo.z() + v * e.z()};
  return {b.hi.x(), b.lo.y() + u * e.y(), b.lo.z() + v * e.z()};
}

Vec3 sample_surface_local(ShapeKind shape, const Vec3& size, Rng& rng) {
  const Vec3 h = 0.5 * size;
  switch (shape) {
    case ShapeKind::kCuboid:
      return sample_block_surface({-h, h}, rng);
    case ShapeKind::kCylinder: {
      const double a = h.x();
      const double b = h.y();
      const double side = 2.0 * kPi * std::sqrt(0.5 * (a * a + b * b)) * size.z();
      const double top = kPi * a * b;
      const double theta = rng.uniform(0.0, 2.0 * kPi);
      if (rng.uniform() * (side + top) < side) {
        return {a * std::cos(theta), b * std::sin(theta), rng.uniform(-h.z(), h.z())};
      }
      const double r = std::sqrt(rng.uniform());
      return {a * r * std::cos(theta), b * r * std::sin(theta), h.z()};
    }
    case ShapeKind::kLShape: {
      const auto blocks = lshape_blocks(size);
      const double v0 = (blocks[0].hi - blocks[0].lo).prod();
      const double v1 = (blocks[1].hi - blocks[1].lo).prod();
      for (;;) {
        const int pick = rng.uniform() * (v0 + v1) < v0 ? 0 : 1;
        const Vec3 p = sample_block_surface(blocks[pick], rng);
        if (!inside_block(blocks[1 - pick], p, 1e-9)) return p;
      }
    }
  }
  return Vec3::Zero();
}

// Outline polygons of an object in its local frame: (solid parts, top faces).
struct Outline {
  std::vector<std::vector<Vec3>> solids;
  std::vector<std::vector<Vec3>> tops;
};

std::vector<Vec3> block_corners(const LocalBlock& b) {
  std::vector<Vec3> out;
  for (int i = 0; i < 8; ++i) {
    out.emplace_back(i & 1 ? b.hi.x() : b.lo.x(), i & 2 ? b.hi.y() : b.lo.y(), i & 4 ? b.hi.z() : b.lo.z());
  }
  return out;
}

std::vector<Vec3> block_top(const LocalBlock& b) {
  return {Vec3(b.lo.x(), b.lo.y(), b.hi.z()), Vec3(b.hi.x(), b.lo.y(), b.hi.z()),
          Vec3(b.hi.x(), b.hi.y(), b.hi.z()), Vec3(b.lo.x(), b.hi.y(), b.hi.z())};
}

Outline object_outline(ShapeKind shape, const Vec3& size) {
  const Vec3 h = 0.5 * size;
  Outline out;
  switch (shape) {
    case ShapeKind::kCuboid: {
      const LocalBlock b{-h, h};
      out.solids.push_back(block_corners(b));
      out.tops.push_back(block_top(b));
      break;
    }
    case ShapeKind::kCylinder: {
      constexpr int kSegments = 24;
      std::vector<Vec3> solid;
      std::vector<Vec3> top;
      for (int i = 0; i < kSegments; ++i) {
        const double t = 2.0 * kPi * i / kSegments;
        const double x = h.x() * std::cos(t);
        const double y = h.y() * std::sin(t);
        solid.emplace_back(x, y, -h.z());
        solid.emplace_back(x, y, h.z());
        top.emplace_back(x, y, h.z());
      }
      out.solids.push_back(std::move(solid));
      out.tops.push_back(std::move(top));
      break;
    }
    case ShapeKind::kLShape: {
      for (const auto& b : lshape_blocks(size)) {
        out.solids.push_back(block_corners(b));
        out.tops.push_back(block_top(b));
      }
      break;
    }
  }
  return out;
}

std::vector<Vec2> convex_hull(std::vector<Vec2> pts) {
  std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  if (pts.size() < 3) return pts;
  std::vector<Vec2> hull(2 * pts.size());
  std::size_t k = 0;
  auto cross = [](const Vec2& o, const Vec2& a, const Vec2& b) {
    return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
  };
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0.0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i > 0; --i) {
    const auto& p = pts[i - 1];
    while (k >= t && cross(hull[k - 2], hull[k - 1], p) <= 0.0) --k;
    hull[k++] = p;
  }
  hull.resize(k - 1);
  return hull;
}

// Calls fn(y, x) for every pixel whose center lies inside the convex polygon.
template <typename Fn>
void raster_convex(const std::vector<Vec2>& hull, int width, int height, Fn&& fn) {
  if (hull.size() < 3) return;
  double x0 = hull[0].x(), x1 = x0, y0 = hull[0].y(), y1 = y0;
  for (const auto& p : hull) {
    x0 = std::min(x0, p.x());
    x1 = std::max(x1, p.x());
    y0 = std::min(y0, p.y());
    y1 = std::max(y1, p.y());
  }
  const int ix0 = std::max(0, static_cast<int>(std::floor(x0)));
  const int ix1 = std::min(width - 1, static_cast<int>(std::ceil(x1)));
  const int iy0 = std::max(0, static_cast<int>(std::floor(y0)));
  const int iy1 = std::min(height - 1, static_cast<int>(std::ceil(y1)));
  for (int y = iy0; y <= iy1; ++y) {
    for (int x = ix0; x <= ix1; ++x) {
      const Vec2 c(x + 0.5, y + 0.5);
      bool inside = true;
      for (std::size_t i = 0; i < hull.size() && inside; ++i) {
        const Vec2& a = hull[i];
        const Vec2& b = hull[(i + 1) % hull.size()];
        inside = (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x()) >= 0.0;
      }
      if (inside) fn(y, x);
    }
  }
}

// Projected convex hull of local-frame points; empty if any point is behind
// the camera.
std::vector<Vec2> projected_hull(const std::vector<Vec3>& local, const Box3D& box, const CameraModel& cam) {
  const Mat3 r = rotation_z(box.yaw);
  std::vector<Vec2> px;
  px.reserve(local.size());
  for (const auto& l : local) {
    const Vec3 pc = cam.to_camera(box.center + r * l);
    if (pc.z() <= 0.0) return {};
    px.push_back(cam.pixel(pc));
  }
  return convex_hull(std::move(px));
}

void paint_objects(Image& img, const std::vector<SceneObject>& objects, const CameraModel& cam,
                   const std::vector<ObjectTemplate>& catalog) {
  std::vector<std::size_t> order(objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // Far to near; ties resolved by index for determinism.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return cam.to_camera(objects[a].box.center).z() > cam.to_camera(objects[b].box.center).z();
  });
  for (std::size_t idx : order) {
    const SceneObject& obj = objects[idx];
    const Outline outline = object_outline(catalog.at(obj.class_id).shape, obj.box.size);
    auto paint = [&](const std::vector<Vec3>& poly, double shade) {
      const auto hull = projected_hull(poly, obj.box, cam);
      raster_convex(hull, img.width, img.height, [&](int y, int x) {
        for (int ch = 0; ch < 3; ++ch) {
          img.at(y, x, ch) = static_cast<float>(std::clamp(shade * obj.color[ch], 0.0, 1.0));
        }
      });
    };
    for (std::size_t part = 0; part < outline.solids.size(); ++part) {
      paint(outline.solids[part], 0.7);
      paint(outline.tops[part], 1.0);
    }
  }
}

Vec3 jittered_color(const Vec3& base, double jitter, Rng& rng) {
  Vec3 c;
  for (int k = 0; k < 3; ++k) c[k] = to_f32(std::clamp(base[k] + rng.uniform(-jitter, jitter), 0.0, 1.0));
  return c;
}

Vec3 sample_size(const ObjectTemplate& t, Rng& rng) {
  return {to_f32(rng.uniform(t.size[0].lo, t.size[0].hi)), to_f32(rng.uniform(t.size[1].lo, t.size[1].hi)),
          to_f32(rng.uniform(t.size[2].lo, t.size[2].hi))};
}

}  // namespace

std::vector<ObjectTemplate> object_catalog(int num_classes) {
  using S = ShapeKind;
  static const std::vector<ObjectTemplate> kAll = {
      {0, "crate", {{{0.50, 0.70}, {0.50, 0.70}, {0.45, 0.65}}}, Vec3(0.85, 0.15, 0.15), S::kCuboid},
      {1, "low_table", {{{1.00, 1.30}, {0.60, 0.80}, {0.35, 0.50}}}, Vec3(0.20, 0.75, 0.25), S::kCuboid},
      {2, "cabinet", {{{0.45, 0.60}, {0.40, 0.55}, {1.20, 1.50}}}, Vec3(0.20, 0.30, 0.85), S::kCuboid},
      {3, "bin", {{{0.35, 0.50}, {0.35, 0.50}, {0.50, 0.75}}}, Vec3(0.90, 0.85, 0.20), S::kCylinder},
      {4, "round_table", {{{0.80, 1.00}, {0.80, 1.00}, {0.55, 0.70}}}, Vec3(0.80, 0.20, 0.75), S::kCylinder},
      {5, "chair", {{{0.50, 0.60}, {0.50, 0.60}, {0.85, 1.00}}}, Vec3(0.20, 0.80, 0.85), S::kLShape},
      {6, "sofa", {{{1.30, 1.60}, {0.75, 0.90}, {0.70, 0.85}}}, Vec3(0.95, 0.55, 0.15), S::kLShape},
      {7, "bed", {{{1.50, 1.90}, {0.95, 1.20}, {0.40, 0.55}}}, Vec3(0.50, 0.30, 0.70), S::kCuboid},
  };
  if (num_classes < 2 || num_classes > static_cast<int>(kAll.size())) {
    throw ConfigError("scene.num_classes", "must be in [2, 8]");
  }
  return {kAll.begin(), kAll.begin() + num_classes};
}

void SceneConfig::validate() const {
  if (num_classes < 2 || num_classes > 8) throw ConfigError("scene.num_classes", "must be in [2, 8]");
  if ((extent.array() <= 0.0).any()) throw ConfigError("scene.extent", "must be positive");
  if (min_objects < 0 || max_objects < min_objects) throw ConfigError("scene.max_objects", "invalid object range");
  if (clutter_fraction < 0.0 || clutter_fraction >= 1.0) {
    throw ConfigError("scene.clutter_fraction", "must be in [0, 1)");
  }
  const int object_points = num_points - static_cast<int>(std::floor(clutter_fraction * num_points));
  if (num_points <= 0 || (max_objects > 0 && object_points / max_objects < 20)) {
    throw ConfigError("scene.num_points", "too small for 20 points per object");
  }
  if (image_width <= 0 || image_height <= 0) throw ConfigError("scene.image_width", "must be positive");
  for (int c : class_pool) {
    if (c < 0 || c >= num_classes) throw ConfigError("scene.class_pool", "class id out of range");
  }
}

std::vector<int> VocabularySplit::unseen() const {
  std::vector<int> out;
  for (int c : test) {
    if (!is_seen(c)) out.push_back(c);
  }
  return out;
}

bool VocabularySplit::is_seen(int c) const { return std::find(seen.begin(), seen.end(), c) != seen.end(); }

void VocabularySplit::validate() const {
  const std::set<int> s(seen.begin(), seen.end());
  const std::set<int> t(test.begin(), test.end());
  const std::set<int> k(classification.begin(), classification.end());
  if (!std::includes(t.begin(), t.end(), s.begin(), s.end()) || s.size() >= t.size()) {
    throw ConfigError("data.unseen_classes", "seen classes must be a strict subset of test classes");
  }
  if (!std::includes(k.begin(), k.end(), t.begin(), t.end())) {
    throw ConfigError("data.unseen_classes", "test classes must be covered by the classification vocabulary");
  }
}

Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed, std::int64_t id) {
  cfg.validate();
  const auto catalog = object_catalog(cfg.num_classes);
  Rng rng(seed);
  Scene scene;
  scene.id = id;
  scene.extent = cfg.extent;

  std::vector<int> pool = cfg.class_pool;
  if (pool.empty()) {
    for (int c = 0; c < cfg.num_classes; ++c) pool.push_back(c);
  }

  const int n_objects = cfg.min_objects + static_cast<int>(rng.index(cfg.max_objects - cfg.min_objects + 1));
  int attempts = 0;
  while (static_cast<int>(scene.objects.size()) < n_objects) {
    if (++attempts > cfg.max_attempts) {
      throw PlacementFailure("could not place " + std::to_string(n_objects) + " objects in " +
                             std::to_string(cfg.max_attempts) + " attempts");
    }
    const ObjectTemplate& t = catalog[pool[rng.index(pool.size())]];
    SceneObject obj;
    obj.class_id = t.class_id;
    obj.box.size = sample_size(t, rng);
    obj.box.yaw = to_f32(rng.uniform(-cfg.yaw_max, cfg.yaw_max));
    const double reach = 0.5 * std::hypot(obj.box.size.x(), obj.box.size.y()) + 0.05;
    if (2.0 * reach >= cfg.extent.x() || 2.0 * reach >= cfg.extent.y() || obj.box.size.z() > cfg.extent.z()) {
      continue;
    }
    obj.box.center = Vec3(to_f32(rng.uniform(reach, cfg.extent.x() - reach)),
                          to_f32(rng.uniform(reach, cfg.extent.y() - reach)), to_f32(0.5 * obj.box.size.z()));
    obj.color = jittered_color(t.color, cfg.color_jitter, rng);
    bool ok = true;
    for (const auto& other : scene.objects) {
      const double d = (other.box.center - obj.box.center).head<2>().norm();
      if (d < cfg.center_margin || iou_3d(other.box, obj.box) > 0.0) {
        ok = false;
        break;
      }
    }
    if (ok) scene.objects.push_back(obj);
  }

  const int n_clutter = static_cast<int>(std::floor(cfg.clutter_fraction * cfg.num_points));
  const int n_object_points = cfg.num_points - n_clutter;
  const int n_obj = static_cast<int>(scene.objects.size());
  std::vector<Vec3> points;
  points.reserve(cfg.num_points);
  for (int i = 0; i < n_obj; ++i) {
    const SceneObject& obj = scene.objects[i];
    const int count = n_object_points / n_obj + (i < n_object_points % n_obj ? 1 : 0);
    const Mat3 r = rotation_z(obj.box.yaw);
    const Vec3 half = 0.5 * obj.box.size;
    for (int k = 0; k < count; ++k) {
      Vec3 l = sample_surface_local(catalog[obj.class_id].shape, obj.box.size, rng);
      for (int a = 0; a < 3; ++a) {
        l[a] = std::clamp(l[a] + cfg.point_noise * rng.normal(), -half[a] * 0.999, half[a] * 0.999);
      }
      const Vec3 p = obj.box.center + r * l;
      points.emplace_back(to_f32(p.x()), to_f32(p.y()), to_f32(p.z()));
    }
  }

  const int n_wall = static_cast<int>(std::round(cfg.wall_fraction * n_clutter));
  // Floor and wall clutter. With no objects the object budget also goes to
  // the floor so that N stays fixed.
  const int n_floor = cfg.num_points - static_cast<int>(points.size()) - n_wall;
  int placed = 0;
  int guard = 0;
  while (placed < n_floor) {
    const Vec3 p(to_f32(rng.uniform(0.0, cfg.extent.x())), to_f32(rng.uniform(0.0, cfg.extent.y())),
                 to_f32(std::abs(cfg.point_noise * rng.normal())));
    bool occluded = false;
    for (const auto& obj : scene.objects) {
      Box3D grown = obj.box;
      grown.size += Vec3(0.02, 0.02, 0.02);
      if (box_contains(grown, p)) {
        occluded = true;
        break;
      }
    }
    if (occluded && ++guard < 100000) continue;
    if (occluded) break;
    points.push_back(p);
    ++placed;
  }
  for (int k = 0; k < n_wall; ++k) {
    const bool far_x = k % 2 == 0;
    const double along = rng.uniform(0.0, far_x ? cfg.extent.y() : cfg.extent.x());
    const double z = rng.uniform(0.0, cfg.extent.z());
    const Vec3 p = far_x ? Vec3(cfg.extent.x(), along, z) : Vec3(along, cfg.extent.y(), z);
    points.emplace_back(to_f32(p.x()), to_f32(p.y()), to_f32(p.z()));
  }
  scene.points = std::move(points);

  // Camera outside the near room corner looking at the room center.
  const Vec3 eye(-0.8, -0.8, 2.5);
  const Vec3 target(0.5 * cfg.extent.x(), 0.5 * cfg.extent.y(), 0.3);
  scene.camera = CameraModel::look_at(eye, target, cfg.camera_fov_deg, cfg.image_width, cfg.image_height);
  return scene;
}

std::vector<std::uint8_t> object_silhouette(const SceneObject& obj, const CameraModel& cam,
                                            const std::vector<ObjectTemplate>& catalog) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(cam.width) * cam.height, 0);
  const Outline outline = object_outline(catalog.at(obj.class_id).shape, obj.box.size);
  for (const auto& solid : outline.solids) {
    raster_convex(projected_hull(solid, obj.box, cam), cam.width, cam.height,
                  [&](int y, int x) { mask[static_cast<std::size_t>(y) * cam.width + x] = 1; });
  }
  return mask;
}

PairedImage render_paired_image(const Scene& scene) {
  const auto catalog = object_catalog(8);
  PairedImage out;
  out.scene_id = scene.id;
  out.image = Image(scene.camera.height, scene.camera.width, 3, kBackgroundGray);
  paint_objects(out.image, scene.objects, scene.camera, catalog);
  return out;
}

Image crop_resize(const Image& image, const Box2D& box, int size) {
  Image out(size, size, image.channels);
  const double w = box.width();
  const double h = box.height();
  for (int r = 0; r < size; ++r) {
    const int sy = std::clamp(static_cast<int>(std::floor(box.min.y() + (r + 0.5) * h / size)), 0, image.height - 1);
    for (int c = 0; c < size; ++c) {
      const int sx =
          std::clamp(static_cast<int>(std::floor(box.min.x() + (c + 0.5) * w / size)), 0, image.width - 1);
      for (int ch = 0; ch < image.channels; ++ch) out.at(r, c, ch) = image.at(sy, sx, ch);
    }
  }
  return out;
}

std::vector<ClassificationSample> generate_classification_set(const SceneConfig& scene_cfg,
                                                              const ClassificationConfig& cfg,
                                                              const std::vector<int>& classes,
                                                              std::uint64_t seed) {
  const auto catalog = object_catalog(scene_cfg.num_classes);
  constexpr int kCanvas = 96;
  std::vector<ClassificationSample> out;
  out.reserve(classes.size() * cfg.per_class);
  Rng rng(seed);
  // Interleave classes so any prefix of the corpus stays roughly balanced.
  for (int i = 0; i < cfg.per_class; ++i) {
    for (int c : classes) {
      const ObjectTemplate& t = catalog.at(c);
      SceneObject obj;
      obj.class_id = c;
      obj.box.size = sample_size(t, rng);
      obj.box.yaw = to_f32(rng.uniform(-kPi, kPi));
      obj.box.center = Vec3(0.0, 0.0, 0.5 * obj.box.size.z());
      obj.color = jittered_color(t.color, scene_cfg.color_jitter, rng);

      const double dist = rng.uniform(2.5, 4.5);
      const double azim = rng.uniform(-kPi, kPi);
      const double elev = rng.uniform(25.0, 45.0) * kPi / 180.0;
      const Vec3 target = obj.box.center;
      const Vec3 eye = target + dist * Vec3(std::cos(elev) * std::cos(azim), std::cos(elev) * std::sin(azim),
                                            std::sin(elev));
      const CameraModel cam = CameraModel::look_at(eye, target, 50.0, kCanvas, kCanvas);

      const float bg = static_cast<float>(rng.uniform(0.35, 0.65));
      Image canvas(kCanvas, kCanvas, 3, bg);
      for (float& v : canvas.pixels) v = static_cast<float>(std::clamp(v + 0.03 * rng.normal(), 0.0, 1.0));
      paint_objects(canvas, {obj}, cam, catalog);

      Box2D box = project_box_to_2d(obj.box, cam);
      const double mx = rng.uniform(0.05, 0.2) * box.width();
      const double my = rng.uniform(0.05, 0.2) * box.height();
      box.min = (box.min - Vec2(mx, my)).cwiseMax(Vec2::Zero());
      box.max = (box.max + Vec2(mx, my)).cwiseMin(Vec2(kCanvas, kCanvas));
      out.push_back({crop_resize(canvas, box, cfg.crop_size), c});
    }
  }
  return out;
}

VocabularySplit split_vocabulary(const std::vector<int>& all_classes, int n_unseen, std::uint64_t seed) {
  if (n_unseen <= 0 || n_unseen >= static_cast<int>(all_classes.size())) {
    throw ConfigError("data.unseen_classes", "must be in [1, number of classes)");
  }
  std::vector<int> shuffled = all_classes;
  Rng rng(seed);
  rng.shuffle(shuffled);
  VocabularySplit split;
  split.seen.assign(shuffled.begin() + n_unseen, shuffled.end());
  std::sort(split.seen.begin(), split.seen.end());
  split.test = all_classes;
  std::sort(split.test.begin(), split.test.end());
  split.classification = split.test;
  split.validate();
  return split;
}

}  // namespace ov3d
