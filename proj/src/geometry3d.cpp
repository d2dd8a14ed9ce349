#include "ov3d/geometry3d.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <tuple>

#include "ov3d/errors.hpp"
#include "ov3d/rng.hpp"

namespace ov3d {

namespace {

constexpr double kPi = std::numbers::pi;

// Boundary tolerance for containment; corners recomputed through a rotation
// round trip land within a few ulps of the faces.
constexpr double kContainTol = 1e-9;

double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

double polygon_area(const std::vector<Vec2>& poly) {
  double s = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    s += cross2(poly[i], poly[(i + 1) % poly.size()]);
  }
  return 0.5 * s;
}

std::array<Vec2, 4> bev_rectangle(const Box3D& box) {
  const auto c = corners_of_box3d(box);
  return {Vec2(c[0].x(), c[0].y()), Vec2(c[1].x(), c[1].y()), Vec2(c[2].x(), c[2].y()),
          Vec2(c[3].x(), c[3].y())};
}

// Canonical ordering so that iou_3d(a, b) and iou_3d(b, a) run the same
// floating-point operations.
bool box_less(const Box3D& a, const Box3D& b) {
  return std::tie(a.center.x(), a.center.y(), a.center.z(), a.size.x(), a.size.y(), a.size.z(), a.yaw) <
         std::tie(b.center.x(), b.center.y(), b.center.z(), b.size.x(), b.size.y(), b.size.z(), b.yaw);
}

}  // namespace

double normalize_yaw(double yaw) {
  double y = std::fmod(yaw + kPi, 2.0 * kPi);
  if (y < 0.0) y += 2.0 * kPi;
  y -= kPi;
  if (y >= kPi) y -= 2.0 * kPi;
  return y;
}

bool Box3D::valid() const {
  return center.allFinite() && std::isfinite(yaw) && size.x() > 0.0 && size.y() > 0.0 && size.z() > 0.0 &&
         yaw >= -kPi && yaw < kPi;
}

bool CameraModel::valid() const {
  if (!(fx > 0.0 && fy > 0.0 && width > 0 && height > 0)) return false;
  return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-9;
}

CameraModel CameraModel::look_at(const Vec3& eye, const Vec3& target, double fov_deg, int width, int height) {
  const Vec3 forward = (target - eye).normalized();
  const Vec3 right = forward.cross(Vec3::UnitZ()).normalized();
  const Vec3 down = forward.cross(right);
  CameraModel cam;
  cam.rotation.row(0) = right.transpose();
  cam.rotation.row(1) = down.transpose();
  cam.rotation.row(2) = forward.transpose();
  cam.translation = -cam.rotation * eye;
  cam.fx = 0.5 * width / std::tan(0.5 * fov_deg * kPi / 180.0);
  cam.fy = cam.fx;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.width = width;
  cam.height = height;
  return cam;
}

Mat3 rotation_z(double yaw) {
  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  Mat3 r;
  r << c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0;
  return r;
}

std::array<Vec3, 8> corners_of_box3d(const Box3D& box) {
  static constexpr double kSigns[4][2] = {{-1, -1}, {1, -1}, {1, 1}, {-1, 1}};
  const Mat3 r = rotation_z(box.yaw);
  const Vec3 half = 0.5 * box.size;
  std::array<Vec3, 8> out;
  for (int layer = 0; layer < 2; ++layer) {
    const double sz = layer == 0 ? -1.0 : 1.0;
    for (int k = 0; k < 4; ++k) {
      const Vec3 local(kSigns[k][0] * half.x(), kSigns[k][1] * half.y(), sz * half.z());
      out[layer * 4 + k] = box.center + r * local;
    }
  }
  return out;
}

Box2D project_box_to_2d(const Box3D& box, const CameraModel& cam) {
  double x0 = std::numeric_limits<double>::infinity();
  double y0 = x0;
  double x1 = -x0;
  double y1 = -x0;
  bool any = false;
  for (const Vec3& corner : corners_of_box3d(box)) {
    const Vec3 pc = cam.to_camera(corner);
    if (pc.z() <= 0.0) continue;
    any = true;
    const Vec2 px = cam.pixel(pc);
    x0 = std::min(x0, px.x());
    y0 = std::min(y0, px.y());
    x1 = std::max(x1, px.x());
    y1 = std::max(y1, px.y());
  }
  if (!any) throw AllBehindCamera();
  const double w = cam.width;
  const double h = cam.height;
  Box2D out;
  out.min = Vec2(std::clamp(x0, 0.0, w), std::clamp(y0, 0.0, h));
  out.max = Vec2(std::clamp(x1, 0.0, w), std::clamp(y1, 0.0, h));
  return out;
}

Vec3 to_box_frame(const Vec3& p, const Box3D& box) {
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  const Vec3 d = p - box.center;
  return {c * d.x() + s * d.y(), -s * d.x() + c * d.y(), d.z()};
}

bool box_contains(const Box3D& box, const Vec3& p) {
  const Vec3 l = to_box_frame(p, box);
  for (int a = 0; a < 3; ++a) {
    if (std::abs(l[a]) > 0.5 * box.size[a] + kContainTol) return false;
  }
  return true;
}

std::vector<std::size_t> points_in_box(std::span<const Vec3> points, const Box3D& box) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (box_contains(box, points[i])) out.push_back(i);
  }
  return out;
}

double convex_intersection_area(std::span<const Vec2> a, std::span<const Vec2> b) {
  // Sutherland-Hodgman: clip polygon a against each edge of b.
  std::vector<Vec2> poly(a.begin(), a.end());
  for (std::size_t e = 0; e < b.size() && !poly.empty(); ++e) {
    const Vec2& e0 = b[e];
    const Vec2& e1 = b[(e + 1) % b.size()];
    const Vec2 edge = e1 - e0;
    std::vector<Vec2> next;
    next.reserve(poly.size() + 2);
    for (std::size_t i = 0; i < poly.size(); ++i) {
      const Vec2& p = poly[i];
      const Vec2& q = poly[(i + 1) % poly.size()];
      const double sp = cross2(edge, p - e0);
      const double sq = cross2(edge, q - e0);
      if (sp >= 0.0) next.push_back(p);
      if ((sp >= 0.0) != (sq >= 0.0)) {
        const double t = sp / (sp - sq);
        next.push_back(p + t * (q - p));
      }
    }
    poly = std::move(next);
  }
  if (poly.size() < 3) return 0.0;
  const double area = polygon_area(poly);
  return area > 1e-12 ? area : 0.0;
}

double iou_3d(const Box3D& a_in, const Box3D& b_in) {
  const bool swap = box_less(b_in, a_in);
  const Box3D& a = swap ? b_in : a_in;
  const Box3D& b = swap ? a_in : b_in;

  const double za0 = a.center.z() - 0.5 * a.size.z();
  const double za1 = a.center.z() + 0.5 * a.size.z();
  const double zb0 = b.center.z() - 0.5 * b.size.z();
  const double zb1 = b.center.z() + 0.5 * b.size.z();
  const double dz = std::min(za1, zb1) - std::max(za0, zb0);
  if (dz <= 0.0) return 0.0;

  const auto ra = bev_rectangle(a);
  const auto rb = bev_rectangle(b);
  const double area = convex_intersection_area(ra, rb);
  if (area <= 0.0) return 0.0;
  const double inter = area * dz;
  const double uni = a.volume() + b.volume() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double iou_2d(const Box2D& a, const Box2D& b) {
  const double iw = std::min(a.max.x(), b.max.x()) - std::max(a.min.x(), b.min.x());
  const double ih = std::min(a.max.y(), b.max.y()) - std::max(a.min.y(), b.min.y());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

double iou_3d_oracle_mc(const Box3D& a, const Box3D& b, std::size_t n_samples, std::uint64_t seed) {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const Box3D* box : {&a, &b}) {
    for (const Vec3& c : corners_of_box3d(*box)) {
      lo = lo.cwiseMin(c);
      hi = hi.cwiseMax(c);
    }
  }
  Rng rng(seed);
  std::size_t in_a = 0;
  std::size_t in_b = 0;
  std::size_t in_both = 0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    const Vec3 p(rng.uniform(lo.x(), hi.x()), rng.uniform(lo.y(), hi.y()), rng.uniform(lo.z(), hi.z()));
    const bool ia = box_contains(a, p);
    const bool ib = box_contains(b, p);
    in_a += ia;
    in_b += ib;
    in_both += ia && ib;
  }
  const std::size_t uni = in_a + in_b - in_both;
  return uni == 0 ? 0.0 : static_cast<double>(in_both) / static_cast<double>(uni);
}

}  // namespace ov3d
