#include <cmath>

#include "doctest.h"
#include "ftfoot/geometry.hpp"
#include "test_util.hpp"

using namespace ftfoot;
using testutil::random_tensor;

namespace {

constexpr double kPi = 3.14159265358979323846;

Intrinsics test_intr() { return {64.0, 64.0, 31.5, 31.5}; }

// camera at `height` above the origin looking straight ahead (+x world),
// pitched down by `pitch` radians. Camera axes: +z forward, +x right, +y down.
Pose camera_pose(double height, double pitch) {
  // columns are the camera axes expressed in world coordinates
  Mat3 level;
  // cam x -> world -y (right), cam y -> world -z (down), cam z -> world +x
  level.m[0] = 0;
  level.m[1] = 0;
  level.m[2] = 1;
  level.m[3] = -1;
  level.m[4] = 0;
  level.m[5] = 0;
  level.m[6] = 0;
  level.m[7] = -1;
  level.m[8] = 0;
  Pose p;
  p.rotation = level * Mat3::rot_x(-pitch);
  p.translation = {0, 0, height};
  return p;
}

}  // namespace

TEST_CASE("unproject closed forms") {
  auto intr = test_intr();
  SUBCASE("principal point maps to optical axis") {
    Tensor depth({1, 64, 64});
    // principal point (31.5, 31.5) falls between pixels; use exact intrinsics on pixel 10
    Intrinsics at_pixel{32.0, 32.0, 10.0, 12.0};
    depth.at(0, 12, 10) = 2.5;
    Tensor pts = unproject(depth, at_pixel);
    CHECK(pts.at(0, 12, 10) == 0.0);
    CHECK(pts.at(1, 12, 10) == 0.0);
    CHECK(pts.at(2, 12, 10) == 2.5);
  }
  SUBCASE("invalid depth maps to zero point") {
    Tensor depth({1, 4, 4});
    Tensor pts = unproject(depth, intr);
    for (int64_t i = 0; i < pts.size(); ++i) CHECK(pts[i] == 0.0);
  }
  SUBCASE("random pixel matches closed form exactly") {
    Tensor depth({1, 64, 64});
    depth.at(0, 20, 45) = 3.25;
    Tensor pts = unproject(depth, intr);
    CHECK(pts.at(0, 20, 45) == 3.25 * (45 - intr.cx) / intr.fx);
    CHECK(pts.at(1, 20, 45) == 3.25 * (20 - intr.cy) / intr.fy);
    CHECK(pts.at(2, 20, 45) == 3.25);
  }
  SUBCASE("project-unproject round trip") {
    Tensor depth({1, 64, 64});
    for (int i = 0; i < 64; ++i)
      for (int j = 0; j < 64; ++j) depth.at(0, i, j) = 2.0 + 0.01 * i + 0.02 * j;
    Tensor pts = unproject(depth, intr);
    for (int i = 0; i < 64; i += 7) {
      for (int j = 0; j < 64; j += 5) {
        Vec3 p{pts.at(0, i, j), pts.at(1, i, j), pts.at(2, i, j)};
        double u, v;
        REQUIRE(project(intr, p, u, v));
        CHECK(std::fabs(u - j) <= 1e-6);
        CHECK(std::fabs(v - i) <= 1e-6);
      }
    }
  }
}

TEST_CASE("normals_from_depth planes and ramps") {
  auto intr = test_intr();
  SUBCASE("fronto-parallel plane gives (0,0,-1)") {
    Tensor depth = Tensor::full({1, 32, 32}, 4.0);
    auto sn = normals_from_depth(depth, intr);
    int checked = 0;
    for (int i = 0; i < 32; ++i) {
      for (int j = 0; j < 32; ++j) {
        if (sn.validity.at(0, i, j) == 0.0) continue;
        CHECK(sn.normals.at(0, i, j) == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(sn.normals.at(1, i, j) == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(sn.normals.at(2, i, j) == doctest::Approx(-1.0).epsilon(1e-9));
        ++checked;
      }
    }
    CHECK(checked == 30 * 30);
  }
  SUBCASE("ground plane below a level camera: constant normals with -y component") {
    // depth of the plane z_world = 0 seen from a camera at height 2 looking
    // slightly down: compute depth analytically per pixel
    const Pose pose = camera_pose(2.0, 0.5);
    Tensor depth({1, 64, 64});
    for (int i = 0; i < 64; ++i) {
      for (int j = 0; j < 64; ++j) {
        Vec3 dir_cam{(j - intr.cx) / intr.fx, (i - intr.cy) / intr.fy, 1.0};
        Vec3 dir_world = pose.rotation * dir_cam;
        if (dir_world.z >= -1e-9) continue;  // ray does not hit the ground
        const double t = -pose.translation.z / dir_world.z;  // ground at z=0
        depth.at(0, i, j) = t;  // t parameterizes depth since dir_cam.z == 1
      }
    }
    auto sn = normals_from_depth(depth, intr);
    // world up in camera coordinates
    const Vec3 up_cam = pose.rotation.transposed() * Vec3{0, 0, 1};
    int checked = 0;
    for (int i = 2; i < 62; i += 3) {
      for (int j = 2; j < 62; j += 3) {
        if (sn.validity.at(0, i, j) == 0.0) continue;
        Vec3 n{sn.normals.at(0, i, j), sn.normals.at(1, i, j), sn.normals.at(2, i, j)};
        CHECK(std::fabs(n.x - up_cam.x) <= 1e-6);
        CHECK(std::fabs(n.y - up_cam.y) <= 1e-6);
        CHECK(std::fabs(n.z - up_cam.z) <= 1e-6);
        CHECK(n.y < 0.0);
        ++checked;
      }
    }
    CHECK(checked > 100);
  }
  SUBCASE("45 degree ramp within 2 degrees away from borders") {
    // plane z_cam = a*x_cam + d  (45 degrees about the camera y axis)
    const double d = 5.0;
    Tensor depth({1, 64, 64});
    for (int i = 0; i < 64; ++i) {
      for (int j = 0; j < 64; ++j) {
        const double xr = (j - intr.cx) / intr.fx;
        // z = x + d with x = z*xr -> z (1 - xr) = d
        const double denom = 1.0 - xr;
        if (denom <= 0.05) continue;
        depth.at(0, i, j) = d / denom;
      }
    }
    auto sn = normals_from_depth(depth, intr);
    const Vec3 expect = normalized(Vec3{1.0, 0.0, -1.0});
    for (int i = 8; i < 56; i += 5) {
      for (int j = 8; j < 56; j += 5) {
        if (sn.validity.at(0, i, j) == 0.0) continue;
        Vec3 n{sn.normals.at(0, i, j), sn.normals.at(1, i, j), sn.normals.at(2, i, j)};
        const double cosang = std::clamp(dot(n, expect), -1.0, 1.0);
        CHECK(std::acos(cosang) * 180.0 / kPi <= 2.0);
      }
    }
  }
  SUBCASE("unit norm wherever valid") {
    Rng rng(5);
    Tensor depth = random_tensor({1, 16, 16}, rng, 1.0, 6.0);
    depth.at(0, 4, 4) = 0.0;  // hole
    auto sn = normals_from_depth(depth, test_intr());
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) {
        if (sn.validity.at(0, i, j) == 0.0) continue;
        const double n = std::sqrt(sn.normals.at(0, i, j) * sn.normals.at(0, i, j) +
                                   sn.normals.at(1, i, j) * sn.normals.at(1, i, j) +
                                   sn.normals.at(2, i, j) * sn.normals.at(2, i, j));
        CHECK(std::fabs(n - 1.0) <= 1e-6);
      }
    }
    // pixels adjacent to the hole are invalid
    CHECK(sn.validity.at(0, 4, 4) == 0.0);
    CHECK(sn.validity.at(0, 4, 5) == 0.0);
    CHECK(sn.validity.at(0, 3, 4) == 0.0);
  }
}

namespace {

Trajectory straight_trajectory(double x0, double x1, double step, double width) {
  Trajectory traj;
  traj.robot_width = width;
  int idx = 0;
  for (double x = x0; x <= x1 + 1e-9; x += step) {
    TimedPose tp;
    tp.timestamp = 0.1 * idx++;
    tp.pose.rotation = Mat3::identity();  // +x forward, +y left
    tp.pose.translation = {x, 0.0, 0.0};
    traj.poses.push_back(tp);
  }
  return traj;
}

RgbdFrame frame_at_origin() {
  RgbdFrame f;
  f.rgb = Tensor({3, 64, 64});
  f.depth = Tensor({1, 64, 64});
  f.intrinsics = test_intr();
  f.pose = camera_pose(1.5, 0.45);
  f.frame_id = 0;
  return f;
}

}  // namespace

TEST_CASE("project_footprint straight run is symmetric about the centerline") {
  auto traj = straight_trajectory(0.0, 9.0, 0.5, 1.0);
  auto frame = frame_at_origin();
  auto fp = project_footprint(traj, frame);
  CHECK_FALSE(fp.empty_warning);
  int total = 0;
  for (int i = 0; i < 64; ++i) {
    int left = 0, right = 0;
    for (int j = 0; j < 32; ++j) left += fp.mask.at(0, i, j) != 0.0 ? 1 : 0;
    for (int j = 32; j < 64; ++j) right += fp.mask.at(0, i, j) != 0.0 ? 1 : 0;
    CHECK(std::abs(left - right) <= 1);
    total += left + right;
  }
  CHECK(total > 0);
}

TEST_CASE("project_footprint behind the camera is empty with a warning") {
  auto traj = straight_trajectory(-12.0, -2.0, 0.5, 1.0);
  auto frame = frame_at_origin();
  // nearest pose is behind; all quads project behind the camera
  auto fp = project_footprint(traj, frame);
  for (int64_t i = 0; i < fp.mask.size(); ++i) CHECK(fp.mask[i] == 0.0);
  CHECK(fp.empty_warning);
}

TEST_CASE("project_footprint matches a dense point-projection oracle") {
  Trajectory traj;
  traj.robot_width = 1.0;
  for (int i = 0; i < 2; ++i) {
    TimedPose tp;
    tp.timestamp = i;
    tp.pose.translation = {1.0 + i * 1.0, 0.0, 0.0};
    traj.poses.push_back(tp);
  }
  auto frame = frame_at_origin();
  auto fp = project_footprint(traj, frame);

  // oracle: project a dense grid of points of the quad [1,2] x [-0.5,0.5]
  Tensor oracle({1, 64, 64});
  const Pose cam_from_world = frame.pose.inverse();
  for (double x = 1.0; x <= 2.0; x += 0.002) {
    for (double y = -0.5; y <= 0.5; y += 0.002) {
      const Vec3 p = cam_from_world.apply({x, y, 0.0});
      double u, v;
      if (!project(frame.intrinsics, p, u, v)) continue;
      const int j = static_cast<int>(std::floor(u));
      const int i = static_cast<int>(std::floor(v));
      if (i < 0 || i >= 64 || j < 0 || j >= 64) continue;
      oracle.at(0, i, j) = 1.0;
    }
  }
  // agreement within one pixel: every disagreeing pixel must have an
  // agreeing neighbor
  for (int i = 0; i < 64; ++i) {
    for (int j = 0; j < 64; ++j) {
      if (fp.mask.at(0, i, j) == oracle.at(0, i, j)) continue;
      bool near = false;
      for (int di = -1; di <= 1 && !near; ++di) {
        for (int dj = -1; dj <= 1 && !near; ++dj) {
          const int ii = i + di, jj = j + dj;
          if (ii < 0 || ii >= 64 || jj < 0 || jj >= 64) continue;
          near = fp.mask.at(0, i, j) == oracle.at(0, ii, jj);
        }
      }
      CHECK(near);
    }
  }
}

TEST_CASE("project_footprint is monotone in robot width") {
  auto frame = frame_at_origin();
  auto narrow = project_footprint(straight_trajectory(0.0, 8.0, 0.5, 0.6), frame);
  auto wide = project_footprint(straight_trajectory(0.0, 8.0, 0.5, 1.4), frame);
  for (int64_t i = 0; i < narrow.mask.size(); ++i) {
    if (narrow.mask[i] != 0.0) CHECK(wide.mask[i] != 0.0);
  }
}

TEST_CASE("trajectory validation") {
  Trajectory traj = straight_trajectory(0.0, 2.0, 0.5, 1.0);
  traj.poses[1].timestamp = traj.poses[0].timestamp;
  CHECK_THROWS_AS(traj.validate(), std::invalid_argument);
  Trajectory bad_width = straight_trajectory(0.0, 2.0, 0.5, 1.0);
  bad_width.robot_width = 0.0;
  CHECK_THROWS_AS(bad_width.validate(), std::invalid_argument);
}
