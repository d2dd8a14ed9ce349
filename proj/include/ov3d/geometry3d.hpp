#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace ov3d {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Wraps an angle into [-pi, pi).
double normalize_yaw(double yaw);

/// Oriented 3D box: center, (width, depth, height) and a rotation about +z.
struct Box3D {
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Ones();
  double yaw = 0.0;

  double volume() const { return size.x() * size.y() * size.z(); }
  bool valid() const;
};

/// Axis-aligned image rectangle in pixels.
struct Box2D {
  Vec2 min = Vec2::Zero();
  Vec2 max = Vec2::Zero();

  double width() const { return max.x() - min.x(); }
  double height() const { return max.y() - min.y(); }
  double area() const { return width() * height(); }
  bool valid() const { return max.x() >= min.x() && max.y() >= min.y(); }
};

/// Pinhole camera. world -> camera is x_c = rotation * x_w + translation,
/// camera looks down +z with +x right and +y down.
struct CameraModel {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  int width = 1;
  int height = 1;

  bool valid() const;
  Vec3 to_camera(const Vec3& world) const { return rotation * world + translation; }
  /// Pixel coordinates of a camera-frame point with positive depth.
  Vec2 pixel(const Vec3& cam) const { return {fx * cam.x() / cam.z() + cx, fy * cam.y() / cam.z() + cy}; }

  /// Camera at `eye` looking at `target`, world up is +z, square pixels.
  static CameraModel look_at(const Vec3& eye, const Vec3& target, double fov_deg, int width, int height);
};

Mat3 rotation_z(double yaw);

/// Corners ordered bottom face counter-clockwise (seen from +z), then the top
/// face in the same order.
std::array<Vec3, 8> corners_of_box3d(const Box3D& box);

/// Axis-aligned rectangle of the projected corners, clipped to the image.
/// Throws AllBehindCamera when no corner has positive depth.
Box2D project_box_to_2d(const Box3D& box, const CameraModel& cam);

/// Coordinates of `p` in the box frame (centered, yaw removed).
Vec3 to_box_frame(const Vec3& p, const Box3D& box);

/// Indices of points inside the closed box.
std::vector<std::size_t> points_in_box(std::span<const Vec3> points, const Box3D& box);

bool box_contains(const Box3D& box, const Vec3& p);

/// Area of the intersection of two convex polygons given counter-clockwise.
double convex_intersection_area(std::span<const Vec2> a, std::span<const Vec2> b);

double iou_3d(const Box3D& a, const Box3D& b);
double iou_2d(const Box2D& a, const Box2D& b);

/// Monte-Carlo IoU estimate over the axis-aligned hull of both boxes.
double iou_3d_oracle_mc(const Box3D& a, const Box3D& b, std::size_t n_samples, std::uint64_t seed);

}  // namespace ov3d
