#include "ftfoot/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ftfoot/dataset.hpp"
#include "ftfoot/rng.hpp"

namespace ftfoot::synth {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kMaxRange = 35.0;

double smoothstep(double edge0, double edge1, double x) {
  const double t = std::clamp((x - edge0) / (edge1 - edge0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

double segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  if (len2 <= 0.0) return norm(p - a);
  const double t = std::clamp(dot(p - a, ab) / len2, 0.0, 1.0);
  return norm(p - (a + t * ab));
}
}  // namespace

void SceneSpec::validate() const {
  if (corridor.size() < 2) throw std::invalid_argument("SceneSpec: corridor needs at least two points");
  if (corridor_width <= 0.0) throw std::invalid_argument("SceneSpec: corridor_width must be positive");
  for (const Obstacle& o : obstacles) {
    if (o.radius <= 0.0) throw std::invalid_argument("SceneSpec: obstacle radii must be positive");
  }
}

double corridor_distance(const SceneSpec& spec, double x, double y) {
  double best = std::numeric_limits<double>::max();
  for (size_t i = 0; i + 1 < spec.corridor.size(); ++i) {
    best = std::min(best, segment_distance({x, y}, spec.corridor[i], spec.corridor[i + 1]));
  }
  return best;
}

double terrain_height(const SceneSpec& spec, double x, double y) {
  const TerrainParams& t = spec.terrain;
  double h = std::tan(t.slope_deg * kPi / 180.0) * x;
  if (t.bump_amplitude != 0.0) {
    // bumps fade out across a 0.5 m band at the corridor edge
    const double d = corridor_distance(spec, x, y);
    const double damp = smoothstep(spec.corridor_width * 0.5, spec.corridor_width * 0.5 + 0.5, d);
    const double f = 2.0 * kPi * t.bump_frequency;
    h += t.bump_amplitude * std::sin(f * x + 0.7) * std::sin(f * y + 1.9) * damp;
  }
  for (const Obstacle& o : spec.obstacles) {
    const double dx = x - o.position.x, dy = y - o.position.y;
    const double s = o.radius * 0.5;
    h += o.height * std::exp(-(dx * dx + dy * dy) / (2.0 * s * s));
  }
  return h;
}

namespace {

double obstacle_contribution(const SceneSpec& spec, double x, double y) {
  double h = 0.0;
  for (const Obstacle& o : spec.obstacles) {
    const double dx = x - o.position.x, dy = y - o.position.y;
    const double s = o.radius * 0.5;
    h += o.height * std::exp(-(dx * dx + dy * dy) / (2.0 * s * s));
  }
  return h;
}

// First heightfield crossing along pos = origin + t * dir, bisected to ~1e-9.
double raycast(const SceneSpec& spec, Vec3 origin, Vec3 dir, double t0, double t1, double step) {
  auto above = [&](double t) {
    const Vec3 p = origin + t * dir;
    return p.z - terrain_height(spec, p.x, p.y);
  };
  double prev_t = t0;
  double prev_v = above(t0);
  if (prev_v <= 0.0) return t0;
  for (double t = t0 + step; t <= t1; t += step) {
    const double v = above(t);
    if (v <= 0.0) {
      double lo = prev_t, hi = t;
      for (int it = 0; it < 50; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (above(mid) <= 0.0) {
          hi = mid;
        } else {
          lo = mid;
        }
      }
      return 0.5 * (lo + hi);
    }
    prev_t = t;
    prev_v = v;
  }
  return -1.0;
}

Vec3 terrain_normal(const SceneSpec& spec, double x, double y) {
  const double eps = 1e-4;
  const double hx = (terrain_height(spec, x + eps, y) - terrain_height(spec, x - eps, y)) / (2.0 * eps);
  const double hy = (terrain_height(spec, x, y + eps) - terrain_height(spec, x, y - eps)) / (2.0 * eps);
  return normalized(Vec3{-hx, -hy, 1.0});
}

}  // namespace

Trajectory corridor_trajectory(const SceneSpec& spec, double robot_width) {
  Trajectory traj;
  traj.robot_width = robot_width;
  const double spacing = 0.25;
  double next_s = 0.0, walked = 0.0;
  int idx = 0;
  for (size_t i = 0; i + 1 < spec.corridor.size(); ++i) {
    const Vec2 a = spec.corridor[i];
    const Vec2 b = spec.corridor[i + 1];
    const double len = norm(b - a);
    if (len <= 0.0) continue;
    const double yaw = std::atan2(b.y - a.y, b.x - a.x);
    while (next_s <= walked + len) {
      const double t = (next_s - walked) / len;
      const Vec2 p = a + t * (b - a);
      TimedPose tp;
      tp.timestamp = 0.1 * idx++;
      tp.pose.rotation = Mat3::rot_z(yaw);
      tp.pose.translation = {p.x, p.y, terrain_height(spec, p.x, p.y)};
      traj.poses.push_back(tp);
      next_s += spacing;
    }
    walked += len;
  }
  return traj;
}

Pose camera_on_trajectory(const SceneSpec& spec, double arc, double cam_height, double pitch) {
  Trajectory traj = corridor_trajectory(spec, 0.4);
  if (traj.poses.size() < 2) throw std::invalid_argument("camera_on_trajectory: degenerate corridor");
  double acc = 0.0;
  size_t pick = 0;
  for (size_t i = 0; i + 1 < traj.poses.size(); ++i) {
    acc += norm(traj.poses[i + 1].pose.translation - traj.poses[i].pose.translation);
    if (acc >= arc) {
      pick = i;
      break;
    }
    pick = i;
  }
  const Pose& robot = traj.poses[pick].pose;
  // camera axes in robot coordinates: x right, y down (pitched), z forward-down
  const double cp = std::cos(pitch), sp = std::sin(pitch);
  Mat3 cam_in_robot;
  cam_in_robot.m[0] = 0;
  cam_in_robot.m[1] = -sp;
  cam_in_robot.m[2] = cp;
  cam_in_robot.m[3] = -1;
  cam_in_robot.m[4] = 0;
  cam_in_robot.m[5] = 0;
  cam_in_robot.m[6] = 0;
  cam_in_robot.m[7] = -cp;
  cam_in_robot.m[8] = -sp;
  Pose cam;
  cam.rotation = robot.rotation * cam_in_robot;
  cam.translation = robot.translation + Vec3{0, 0, cam_height};
  return cam;
}

SceneSample generate_scene(const SceneSpec& spec, const Intrinsics& intr, const Pose& camera_pose, int h, int w,
                           int frame_id, double robot_width) {
  spec.validate();
  const Vec3 origin = camera_pose.translation;
  if (origin.z <= terrain_height(spec, origin.x, origin.y)) {
    throw std::invalid_argument("generate_scene: camera below the terrain");
  }

  SceneSample out;
  out.frame.rgb = Tensor({3, h, w});
  out.frame.depth = Tensor({1, h, w});
  out.frame.intrinsics = intr;
  out.frame.pose = camera_pose;
  out.frame.frame_id = frame_id;
  out.gt_normals.normals = Tensor({3, h, w});
  out.gt_normals.validity = Tensor({1, h, w});
  out.gt_traversable = Tensor({1, h, w});

  Rng noise(spec.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(frame_id + 1)));
  const int64_t plane = static_cast<int64_t>(h) * w;
  const Mat3 world_from_cam = camera_pose.rotation;
  const Mat3 cam_from_world = camera_pose.rotation.transposed();

  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const int64_t px = static_cast<int64_t>(i) * w + j;
      // three noise draws per pixel, always, to keep the stream aligned
      const double n0 = noise.gaussian(), n1 = noise.gaussian(), n2 = noise.gaussian();

      const Vec3 dir_cam{(j - intr.cx) / intr.fx, (i - intr.cy) / intr.fy, 1.0};
      const Vec3 dir_world = world_from_cam * dir_cam;
      const double depth = raycast(spec, origin, dir_world, 0.2, kMaxRange, 0.04);
      if (depth <= 0.0) {
        // sky: invalid depth, muted blue
        out.frame.rgb[px] = std::clamp(0.55 + 0.05 * n0, 0.0, 1.0);
        out.frame.rgb[plane + px] = std::clamp(0.65 + 0.05 * n1, 0.0, 1.0);
        out.frame.rgb[2 * plane + px] = std::clamp(0.80 + 0.05 * n2, 0.0, 1.0);
        continue;
      }
      out.frame.depth[px] = depth;
      const Vec3 hit = origin + depth * dir_world;

      // ground-truth surface normal in the camera frame, oriented to the camera
      Vec3 n_cam = cam_from_world * terrain_normal(spec, hit.x, hit.y);
      const Vec3 p_cam = depth * dir_cam;
      if (dot(n_cam, p_cam) > 0.0) n_cam = -1.0 * n_cam;
      out.gt_normals.normals[px] = n_cam.x;
      out.gt_normals.normals[plane + px] = n_cam.y;
      out.gt_normals.normals[2 * plane + px] = n_cam.z;
      out.gt_normals.validity[px] = 1.0;

      const double corridor_d = corridor_distance(spec, hit.x, hit.y);
      const bool on_obstacle = obstacle_contribution(spec, hit.x, hit.y) > 0.05;
      const bool on_corridor = corridor_d <= spec.corridor_width * 0.5 && !on_obstacle;
      out.gt_traversable[px] = on_corridor ? 1.0 : 0.0;

      const TextureClass& tex =
          on_obstacle ? spec.obstacle_texture : (on_corridor ? spec.corridor_texture : spec.offroad_texture);
      const double noise_draws[3] = {n0, n1, n2};
      for (int ch = 0; ch < 3; ++ch) {
        out.frame.rgb[ch * plane + px] = std::clamp(tex.mean_rgb[ch] + tex.sigma * noise_draws[ch], 0.0, 1.0);
      }
    }
  }
  out.traj = corridor_trajectory(spec, robot_width);
  return out;
}

SceneSpec random_scene_spec(uint64_t seed) {
  Rng rng(seed);
  SceneSpec spec;
  spec.seed = seed;
  spec.terrain.slope_deg = rng.uniform(0.0, 6.0);
  spec.terrain.bump_amplitude = rng.uniform(0.10, 0.28);
  spec.terrain.bump_frequency = rng.uniform(0.4, 1.1);
  spec.corridor_width = rng.uniform(2.2, 3.0);

  const double amp = rng.uniform(0.0, 2.5);
  const double wavelen = rng.uniform(12.0, 25.0);
  const double phase = rng.uniform(0.0, 2.0 * kPi);
  const double y0 = rng.uniform(-2.0, 2.0);
  for (double x = 0.0; x <= 30.0; x += 2.0) {
    spec.corridor.push_back({x, y0 + amp * std::sin(2.0 * kPi * x / wavelen + phase)});
  }

  const int n_obstacles = 2 + rng.uniform_int(4);
  for (int i = 0; i < n_obstacles; ++i) {
    Obstacle o;
    const double along = rng.uniform(4.0, 26.0);
    const double side = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(spec.corridor_width * 0.5 + 0.8, 6.0);
    const double yc = y0 + amp * std::sin(2.0 * kPi * along / wavelen + phase);
    o.position = {along, yc + side};
    o.radius = rng.uniform(0.4, 1.0);
    o.height = rng.uniform(0.4, 1.2);
    spec.obstacles.push_back(o);
  }
  return spec;
}

std::vector<std::string> generate_corpus(const std::string& root, const CorpusParams& params) {
  DatasetWriter writer(root);
  std::vector<std::string> ids;
  Rng rng(params.seed);
  const int n_eval = static_cast<int>(std::lround(params.count * params.eval_fraction));
  const int n_train = params.count - n_eval;

  for (int i = 0; i < params.count; ++i) {
    const uint64_t scene_seed = params.seed * 1000003ULL + static_cast<uint64_t>(i);
    SceneSpec spec = random_scene_spec(scene_seed);
    const double arc = 2.0 + rng.uniform(0.0, 4.0);
    const Pose cam = camera_on_trajectory(spec, arc, params.cam_height, params.cam_pitch);
    Intrinsics intr{params.focal, params.focal, params.image_size / 2.0 - 0.5, params.image_size / 2.0 - 0.5};
    SceneSample sample =
        generate_scene(spec, intr, cam, params.image_size, params.image_size, i, params.robot_width);
    FootprintMask fp = project_footprint(sample.traj, sample.frame);

    TrainSample ts;
    ts.frame = sample.frame;
    ts.footprint = fp;
    ts.gt_normals = sample.gt_normals;
    ts.gt_traversable = sample.gt_traversable;
    const std::string id = writer.add_sample(ts, i < n_train ? "train" : "eval");
    ids.push_back(id);
  }
  writer.finalize();
  return ids;
}

}  // namespace ftfoot::synth
