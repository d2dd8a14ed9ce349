#include <map>
#include <set>

#include "doctest.h"
#include "ov3d/errors.hpp"
#include "ov3d/scenegen.hpp"
#include "unit/helpers.hpp"

using namespace ov3d;
using namespace ov3d::testing;

namespace {

int first_class_with(ShapeKind kind) {
  for (const auto& t : object_catalog(8)) {
    if (t.shape == kind) return t.class_id;
  }
  return -1;
}

bool same_scene(const Scene& a, const Scene& b) {
  if (a.points.size() != b.points.size() || a.objects.size() != b.objects.size()) return false;
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    if (a.points[i] != b.points[i]) return false;
  }
  for (std::size_t i = 0; i < a.objects.size(); ++i) {
    const auto& x = a.objects[i].box;
    const auto& y = b.objects[i].box;
    if (x.center != y.center || x.size != y.size || x.yaw != y.yaw) return false;
    if (a.objects[i].class_id != b.objects[i].class_id) return false;
  }
  return a.camera.rotation == b.camera.rotation && a.camera.translation == b.camera.translation;
}

}  // namespace

TEST_CASE("single cuboid without clutter keeps every point inside its box") {
  SceneConfig c;
  c.clutter_fraction = 0.0;
  c.min_objects = c.max_objects = 1;
  c.num_points = 500;
  c.class_pool = {first_class_with(ShapeKind::kCuboid)};
  const Scene s = generate_scene(c, 4);
  REQUIRE(s.objects.size() == 1);
  CHECK(s.points.size() == 500);
  CHECK(points_in_box(s.points, s.objects[0].box).size() == 500);
}

TEST_CASE("scene generation is deterministic") {
  const SceneConfig c;
  CHECK(same_scene(generate_scene(c, 9, 3), generate_scene(c, 9, 3)));
  CHECK_FALSE(same_scene(generate_scene(c, 9, 3), generate_scene(c, 10, 3)));
  CHECK(render_paired_image(generate_scene(c, 9)).image == render_paired_image(generate_scene(c, 9)).image);
}

TEST_CASE("every object has at least 20 interior points") {
  const SceneConfig c;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Scene s = generate_scene(c, seed);
    CHECK(static_cast<int>(s.points.size()) == c.num_points);
    for (const auto& o : s.objects) CHECK(points_in_box(s.points, o.box).size() >= 20);
    for (const auto& p : s.points) {
      CHECK(p.x() >= -1e-6);
      CHECK(p.x() <= c.extent.x() + 1e-6);
      CHECK(p.y() >= -1e-6);
      CHECK(p.y() <= c.extent.y() + 1e-6);
    }
  }
}

TEST_CASE("objects do not overlap") {
  const SceneConfig c;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Scene s = generate_scene(c, seed);
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      for (std::size_t j = i + 1; j < s.objects.size(); ++j) CHECK(iou_3d(s.objects[i].box, s.objects[j].box) == 0.0);
    }
  }
}

TEST_CASE("placement failure on an impossible room") {
  SceneConfig c;
  c.extent = Vec3(2.0, 2.0, 2.5);
  c.min_objects = c.max_objects = 3;
  c.num_points = 300;
  c.max_attempts = 200;
  CHECK_THROWS_AS(generate_scene(c, 1), PlacementFailure);
}

TEST_CASE("config validation names the key") {
  SceneConfig c;
  c.num_classes = 9;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "scene.num_classes");
  }
}

TEST_CASE("empty scene renders as uniform background") {
  Scene s = generate_scene(SceneConfig{}, 2);
  s.objects.clear();
  const Image img = render_paired_image(s).image;
  for (float v : img.pixels) CHECK(v == kBackgroundGray);
}

TEST_CASE("object on the optical axis renders centered on the principal point") {
  SceneObject obj;
  obj.class_id = first_class_with(ShapeKind::kCuboid);
  obj.box.center = Vec3(0, 0, 0.5);
  obj.box.size = Vec3(1.0, 1.0, 1.0);
  obj.color = Vec3(0.9, 0.1, 0.1);
  Scene s;
  s.objects = {obj};
  s.camera = CameraModel::look_at(Vec3(-4, 0, 0.5), Vec3(0, 0, 0.5), 60.0, 64, 64);
  const auto mask = object_silhouette(obj, s.camera, object_catalog(8));
  int x0 = 64, x1 = -1, y0 = 64, y1 = -1;
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      if (!mask[y * 64 + x]) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  REQUIRE(x1 >= x0);
  CHECK(std::abs(0.5 * (x0 + x1 + 1) - s.camera.cx) <= 1.0);
  CHECK(std::abs(0.5 * (y0 + y1 + 1) - s.camera.cy) <= 1.0);
  const Image img = render_paired_image(s).image;
  CHECK(img.at(32, 32, 0) != kBackgroundGray);
}

TEST_CASE("silhouettes lie inside the projected rectangle") {
  const SceneConfig c;
  const auto catalog = object_catalog(8);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Scene s = generate_scene(c, seed);
    for (const auto& o : s.objects) {
      const Box2D r = project_box_to_2d(o.box, s.camera);
      const auto mask = object_silhouette(o, s.camera, catalog);
      for (int y = 0; y < s.camera.height; ++y) {
        for (int x = 0; x < s.camera.width; ++x) {
          if (!mask[y * s.camera.width + x]) continue;
          const bool inside = x + 1 >= r.min.x() - 1.0 && x <= r.max.x() + 1.0 && y + 1 >= r.min.y() - 1.0 &&
                              y <= r.max.y() + 1.0;
          CHECK(inside);
        }
      }
    }
  }
}

TEST_CASE("label mask changes no geometry or pixels") {
  Scene s = generate_scene(SceneConfig{}, 5);
  const Image before = render_paired_image(s).image;
  const auto points = s.points;
  for (auto& o : s.objects) o.labeled = !o.labeled;
  CHECK(render_paired_image(s).image == before);
  CHECK(s.points == points);
}

TEST_CASE("classification corpus is balanced and deterministic") {
  const SceneConfig sc;
  ClassificationConfig cc;
  cc.per_class = 10;
  const std::vector<int> classes{0, 1, 2, 3, 4, 5, 6, 7};
  const auto a = generate_classification_set(sc, cc, classes, 3);
  const auto b = generate_classification_set(sc, cc, classes, 3);
  REQUIRE(a.size() == 80);
  std::map<int, int> hist;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++hist[a[i].class_id];
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].class_id == b[i].class_id);
    CHECK(a[i].image.height == cc.crop_size);
  }
  for (int c : classes) CHECK(hist[c] == 10);
}

TEST_CASE("classification samples are separable by nearest centroid") {
  const SceneConfig sc;
  ClassificationConfig cc;
  cc.per_class = 40;
  const std::vector<int> classes{0, 1, 2, 3, 4, 5, 6, 7};
  const auto train = generate_classification_set(sc, cc, classes, 100);
  const auto held = generate_classification_set(sc, cc, classes, 200);
  // Mean color of non-background pixels plus foreground fraction.
  auto describe = [](const Image& img) {
    Eigen::Vector4d f = Eigen::Vector4d::Zero();
    int n = 0;
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        const Vec3 c(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
        if ((c - Vec3::Constant(c.mean())).norm() < 0.08) continue;
        f.head<3>() += c;
        ++n;
      }
    }
    if (n > 0) f.head<3>() /= n;
    f[3] = static_cast<double>(n) / (img.height * img.width);
    return f;
  };
  std::map<int, Eigen::Vector4d> centroid;
  std::map<int, int> count;
  for (const auto& s : train) {
    if (!centroid.count(s.class_id)) centroid[s.class_id] = Eigen::Vector4d::Zero();
    centroid[s.class_id] += describe(s.image);
    ++count[s.class_id];
  }
  for (auto& [c, v] : centroid) v /= count[c];
  int correct = 0;
  for (const auto& s : held) {
    const auto f = describe(s.image);
    int best = -1;
    double best_d = 1e300;
    for (const auto& [c, v] : centroid) {
      const double d = (f - v).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    correct += best == s.class_id;
  }
  CHECK(static_cast<double>(correct) / held.size() > 0.9);
}

TEST_CASE("vocabulary split") {
  const std::vector<int> all{0, 1, 2, 3, 4, 5, 6, 7};
  CHECK_THROWS_AS(split_vocabulary(all, 0, 1), ConfigError);
  const auto a = split_vocabulary(all, 4, 7);
  const auto b = split_vocabulary(all, 4, 7);
  CHECK(a.seen == b.seen);
  CHECK(a.seen.size() == 4);
  CHECK(a.unseen().size() == 4);
  for (int c : a.seen) CHECK(a.is_seen(c));

  std::set<std::vector<int>> distinct;
  std::set<int> ever_unseen;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = split_vocabulary(all, 4, seed);
    distinct.insert(s.seen);
    for (int c : s.unseen()) ever_unseen.insert(c);
  }
  CHECK(distinct.size() > 1);
  CHECK(ever_unseen.size() == all.size());

  VocabularySplit bad;
  bad.seen = {0, 1};
  bad.test = {0, 1};
  bad.classification = {0, 1};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("crop resize samples nearest pixels") {
  Image img(4, 4, 1);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) img.at(y, x, 0) = static_cast<float>(10 * y + x);
  }
  const Image out = crop_resize(img, Box2D{Vec2(2, 0), Vec2(4, 2)}, 2);
  CHECK(out.at(0, 0, 0) == 2.0f);
  CHECK(out.at(0, 1, 0) == 3.0f);
  CHECK(out.at(1, 0, 0) == 12.0f);
  CHECK(out.at(1, 1, 0) == 13.0f);
}
