#pragma once

#include <cmath>
#include <vector>

#include "ftfoot/tensor.hpp"

namespace ftfoot {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::sqrt(dot(a, a)); }

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

inline Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(Vec3 a, Vec3 b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(Vec3 a) {
  const double n = norm(a);
  return n > 0.0 ? (1.0 / n) * a : Vec3{};
}

// Row-major 3x3 rotation.
struct Mat3 {
  double m[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }
  static Mat3 rot_z(double yaw);
  static Mat3 rot_x(double pitch);

  Vec3 operator*(Vec3 v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& o) const;
  Mat3 transposed() const;
  Vec3 col(int j) const { return {m[j], m[3 + j], m[6 + j]}; }
  double orthonormality_error() const;  // max-norm of R^T R - I
};

// Rigid transform, p_world = R * p_local + t.
struct Pose {
  Mat3 rotation;
  Vec3 translation;

  Vec3 apply(Vec3 p) const { return rotation * p + translation; }
  Pose inverse() const {
    Pose inv;
    inv.rotation = rotation.transposed();
    inv.translation = -1.0 * (inv.rotation * translation);
    return inv;
  }
  Pose compose(const Pose& other) const {  // this ∘ other
    return {rotation * other.rotation, rotation * other.translation + translation};
  }
};

struct Intrinsics {
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
};

// One RGB-D observation: rgb 3 x h x w in [0,1], depth 1 x h x w in meters
// (0 marks invalid), camera intrinsics, world-from-camera pose.
struct RgbdFrame {
  Tensor rgb;
  Tensor depth;
  Intrinsics intrinsics;
  Pose pose;
  int frame_id = 0;

  int height() const { return depth.dim(1); }
  int width() const { return depth.dim(2); }
  void validate() const;  // checks invariants (rotation orthonormal, ranges)
};

struct SurfaceNormalImage {
  Tensor normals;   // 3 x h x w, unit vectors in the camera frame where valid
  Tensor validity;  // 1 x h x w in {0,1}
};

struct FootprintMask {
  Tensor mask;   // 1 x h x w in {0,1}
  Tensor valid;  // 1 x h x w in {0,1}
  bool empty_warning = false;
};

struct TraversabilityMap {
  Tensor prob;  // 1 x h x w in [0,1]
};

struct TimedPose {
  double timestamp = 0.0;
  Pose pose;  // world-from-robot; robot frame: +x forward, +y left, +z up
};

struct Trajectory {
  std::vector<TimedPose> poses;  // strictly increasing timestamps
  double robot_width = 0.5;      // meters

  void validate() const;
};

// point(i,j) = depth(i,j) * ((j-cx)/fx, (i-cy)/fy, 1); invalid depth -> 0.
Tensor unproject(const Tensor& depth, const Intrinsics& intr);

// Projects a camera-frame point; returns false when behind the camera.
bool project(const Intrinsics& intr, Vec3 p_cam, double& u, double& v);

// Central-difference normals of the unprojected depth, oriented toward the
// camera. Pixels adjacent to invalid depth (and the border) get validity 0.
SurfaceNormalImage normals_from_depth(const Tensor& depth, const Intrinsics& intr);

// Rasterizes the ground strip swept ahead of the frame's pose (width
// traj.robot_width, horizon meters of arc length) through the frame's camera.
FootprintMask project_footprint(const Trajectory& traj, const RgbdFrame& frame, double horizon = 10.0);

}  // namespace ftfoot
