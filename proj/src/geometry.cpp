#include "ftfoot/geometry.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>
#include <string>

namespace ftfoot {

Mat3 Mat3::rot_z(double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  Mat3 r;
  r.m[0] = c;
  r.m[1] = -s;
  r.m[3] = s;
  r.m[4] = c;
  return r;
}

Mat3 Mat3::rot_x(double pitch) {
  const double c = std::cos(pitch), s = std::sin(pitch);
  Mat3 r;
  r.m[4] = c;
  r.m[5] = -s;
  r.m[7] = s;
  r.m[8] = c;
  return r;
}

Mat3 Mat3::operator*(const Mat3& o) const {
  Mat3 r;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += m[i * 3 + k] * o.m[k * 3 + j];
      r.m[i * 3 + j] = acc;
    }
  }
  return r;
}

Mat3 Mat3::transposed() const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.m[i * 3 + j] = m[j * 3 + i];
  return r;
}

double Mat3::orthonormality_error() const {
  const Mat3 rtr = transposed() * *this;
  double err = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double target = i == j ? 1.0 : 0.0;
      err = std::max(err, std::fabs(rtr.m[i * 3 + j] - target));
    }
  }
  return err;
}

void RgbdFrame::validate() const {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) throw std::invalid_argument("RgbdFrame: rgb must be 3xhxw, got " + shape_str(rgb));
  if (depth.rank() != 3 || depth.dim(0) != 1) {
    throw std::invalid_argument("RgbdFrame: depth must be 1xhxw, got " + shape_str(depth));
  }
  if (rgb.dim(1) != depth.dim(1) || rgb.dim(2) != depth.dim(2)) {
    throw std::invalid_argument("RgbdFrame: rgb " + shape_str(rgb) + " vs depth " + shape_str(depth));
  }
  if (pose.rotation.orthonormality_error() > 1e-9) {
    throw std::invalid_argument("RgbdFrame: rotation is not orthonormal");
  }
  for (int64_t i = 0; i < depth.size(); ++i) {
    if (depth[i] < 0.0) throw std::invalid_argument("RgbdFrame: negative depth");
  }
  for (int64_t i = 0; i < rgb.size(); ++i) {
    if (rgb[i] < 0.0 || rgb[i] > 1.0) throw std::invalid_argument("RgbdFrame: rgb out of [0,1]");
  }
}

void Trajectory::validate() const {
  if (robot_width <= 0.0) throw std::invalid_argument("Trajectory: robot_width must be positive");
  for (size_t i = 1; i < poses.size(); ++i) {
    if (poses[i].timestamp <= poses[i - 1].timestamp) {
      throw std::invalid_argument("Trajectory: timestamps not strictly increasing at index " + std::to_string(i));
    }
  }
}

Tensor unproject(const Tensor& depth, const Intrinsics& intr) {
  if (depth.rank() != 3 || depth.dim(0) != 1) {
    throw std::invalid_argument("unproject: depth must be 1xhxw, got " + shape_str(depth));
  }
  if (intr.fx <= 0.0 || intr.fy <= 0.0) throw std::invalid_argument("unproject: fx, fy must be positive");
  const int h = depth.dim(1), w = depth.dim(2);
  Tensor pts({3, h, w});
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const int64_t px = static_cast<int64_t>(i) * w + j;
      const double d = depth[px];
      if (d <= 0.0) continue;  // leaves (0,0,0)
      pts[px] = d * (j - intr.cx) / intr.fx;
      pts[plane + px] = d * (i - intr.cy) / intr.fy;
      pts[2 * plane + px] = d;
    }
  }
  return pts;
}

bool project(const Intrinsics& intr, Vec3 p_cam, double& u, double& v) {
  if (p_cam.z <= 1e-9) return false;
  u = intr.fx * p_cam.x / p_cam.z + intr.cx;
  v = intr.fy * p_cam.y / p_cam.z + intr.cy;
  return true;
}

SurfaceNormalImage normals_from_depth(const Tensor& depth, const Intrinsics& intr) {
  const Tensor pts = unproject(depth, intr);
  const int h = depth.dim(1), w = depth.dim(2);
  const int64_t plane = static_cast<int64_t>(h) * w;
  SurfaceNormalImage out;
  out.normals = Tensor({3, h, w});
  out.validity = Tensor({1, h, w});

  auto depth_ok = [&](int i, int j) { return depth[static_cast<int64_t>(i) * w + j] > 0.0; };
  auto point = [&](int i, int j) -> Vec3 {
    const int64_t px = static_cast<int64_t>(i) * w + j;
    return {pts[px], pts[plane + px], pts[2 * plane + px]};
  };

  for (int i = 1; i + 1 < h; ++i) {
    for (int j = 1; j + 1 < w; ++j) {
      if (!depth_ok(i, j) || !depth_ok(i, j - 1) || !depth_ok(i, j + 1) || !depth_ok(i - 1, j) ||
          !depth_ok(i + 1, j)) {
        continue;
      }
      const Vec3 du = point(i, j + 1) - point(i, j - 1);
      const Vec3 dv = point(i + 1, j) - point(i - 1, j);
      Vec3 n = cross(du, dv);
      const double len = norm(n);
      if (len < 1e-12) continue;
      n = (1.0 / len) * n;
      if (dot(n, point(i, j)) > 0.0) n = -1.0 * n;  // orient toward the camera
      const int64_t px = static_cast<int64_t>(i) * w + j;
      out.normals[px] = n.x;
      out.normals[plane + px] = n.y;
      out.normals[2 * plane + px] = n.z;
      out.validity[px] = 1.0;
    }
  }
  return out;
}

namespace {

struct Poly {
  // small 2-D polygon in image coordinates
  std::vector<Vec2> pts;
};

// Clips a camera-frame polygon against z >= z_near; emits intersection points.
std::vector<Vec3> clip_near(const std::vector<Vec3>& poly, double z_near) {
  std::vector<Vec3> out;
  const size_t n = poly.size();
  for (size_t i = 0; i < n; ++i) {
    const Vec3& a = poly[i];
    const Vec3& b = poly[(i + 1) % n];
    const bool ain = a.z >= z_near;
    const bool bin = b.z >= z_near;
    if (ain) out.push_back(a);
    if (ain != bin) {
      const double t = (z_near - a.z) / (b.z - a.z);
      out.push_back(a + t * (b - a));
    }
  }
  return out;
}

bool point_in_polygon(const Poly& poly, double x, double y) {
  bool inside = false;
  const size_t n = poly.pts.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2& pi = poly.pts[i];
    const Vec2& pj = poly.pts[j];
    if ((pi.y > y) != (pj.y > y)) {
      const double xint = pj.x + (y - pj.y) / (pi.y - pj.y) * (pi.x - pj.x);
      if (x < xint) inside = !inside;
    }
  }
  return inside;
}

void rasterize(const Poly& poly, Tensor& mask) {
  if (poly.pts.size() < 3) return;
  const int h = mask.dim(1), w = mask.dim(2);
  double xmin = std::numeric_limits<double>::max(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const Vec2& p : poly.pts) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  const int j0 = std::max(0, static_cast<int>(std::floor(xmin)));
  const int j1 = std::min(w - 1, static_cast<int>(std::ceil(xmax)));
  const int i0 = std::max(0, static_cast<int>(std::floor(ymin)));
  const int i1 = std::min(h - 1, static_cast<int>(std::ceil(ymax)));
  for (int i = i0; i <= i1; ++i) {
    for (int j = j0; j <= j1; ++j) {
      if (point_in_polygon(poly, j + 0.5, i + 0.5)) mask.at(0, i, j) = 1.0;
    }
  }
}

}  // namespace

FootprintMask project_footprint(const Trajectory& traj, const RgbdFrame& frame, double horizon) {
  traj.validate();
  const int h = frame.height(), w = frame.width();
  FootprintMask out;
  out.mask = Tensor({1, h, w});
  out.valid = Tensor::full({1, h, w}, 1.0);

  if (traj.poses.empty()) {
    out.empty_warning = true;
    return out;
  }

  // Anchor: trajectory pose nearest to the camera's ground position; poses
  // from there on are "future" relative to the frame.
  const Vec3 cam = frame.pose.translation;
  size_t anchor = 0;
  double best = std::numeric_limits<double>::max();
  for (size_t i = 0; i < traj.poses.size(); ++i) {
    const Vec3 d = traj.poses[i].pose.translation - cam;
    const double dist2 = d.x * d.x + d.y * d.y;
    if (dist2 < best) {
      best = dist2;
      anchor = i;
    }
  }
  if (anchor + 1 >= traj.poses.size()) {
    out.empty_warning = true;
    return out;
  }

  const Pose cam_from_world = frame.pose.inverse();
  const double half = 0.5 * traj.robot_width;
  double arc = 0.0;
  for (size_t i = anchor; i + 1 < traj.poses.size() && arc < horizon; ++i) {
    const Pose& pa = traj.poses[i].pose;
    const Pose& pb = traj.poses[i + 1].pose;
    arc += norm(pb.translation - pa.translation);

    // lateral direction = robot +y (left) at each pose
    const Vec3 la = pa.rotation.col(1);
    const Vec3 lb = pb.rotation.col(1);
    const std::vector<Vec3> quad_world = {
        pa.translation + half * la,
        pa.translation - half * la,
        pb.translation - half * lb,
        pb.translation + half * lb,
    };
    std::vector<Vec3> quad_cam;
    quad_cam.reserve(4);
    for (const Vec3& p : quad_world) quad_cam.push_back(cam_from_world.apply(p));
    const std::vector<Vec3> clipped = clip_near(quad_cam, 0.05);
    if (clipped.size() < 3) continue;
    Poly poly;
    for (const Vec3& p : clipped) {
      double u, v;
      project(frame.intrinsics, p, u, v);
      poly.pts.push_back({u, v});
    }
    rasterize(poly, out.mask);
  }

  bool any = false;
  for (int64_t i = 0; i < out.mask.size(); ++i) any = any || out.mask[i] != 0.0;
  out.empty_warning = !any;
  return out;
}

}  // namespace ftfoot
