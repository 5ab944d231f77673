#pragma once

#include <string>
#include <vector>

#include "ftfoot/geometry.hpp"

namespace ftfoot::synth {

struct TerrainParams {
  double slope_deg = 3.0;       // base plane rises along world +x
  double bump_amplitude = 0.15;  // meters, damped to zero inside the corridor
  double bump_frequency = 0.8;   // cycles per meter
};

struct TextureClass {
  double mean_rgb[3] = {0.5, 0.5, 0.5};
  double sigma = 0.18;
};

struct Obstacle {
  Vec2 position;
  double radius = 0.5;  // meters
  double height = 0.8;  // meters
};

struct SceneSpec {
  uint64_t seed = 0;
  TerrainParams terrain;
  std::vector<Vec2> corridor;  // centerline polyline, world x-y
  double corridor_width = 2.4;
  std::vector<Obstacle> obstacles;
  TextureClass corridor_texture{{0.46, 0.38, 0.27}, 0.18};
  TextureClass offroad_texture{{0.30, 0.43, 0.26}, 0.18};
  TextureClass obstacle_texture{{0.36, 0.35, 0.34}, 0.18};

  void validate() const;
};

// Analytic heightfield sampled by the ray caster and the ground-truth normals.
double terrain_height(const SceneSpec& spec, double x, double y);
double corridor_distance(const SceneSpec& spec, double x, double y);

struct SceneSample {
  RgbdFrame frame;
  SurfaceNormalImage gt_normals;
  Tensor gt_traversable;  // 1 x h x w
  Trajectory traj;
};

// Ray-casts the heightfield through a pinhole camera. Pure function of its
// arguments; identical inputs produce bit-identical output.
SceneSample generate_scene(const SceneSpec& spec, const Intrinsics& intr, const Pose& camera_pose, int h, int w,
                           int frame_id = 0, double robot_width = 0.4);

// Pose sequence along the corridor centerline (0.25 m spacing), wheels on the
// terrain, yaw along the tangent.
Trajectory corridor_trajectory(const SceneSpec& spec, double robot_width);

// Camera mounted above the trajectory pose at arc length `arc`, pitched down.
Pose camera_on_trajectory(const SceneSpec& spec, double arc, double cam_height = 1.1, double pitch = 0.42);

// Randomized scene around a curved corridor; deterministic in seed.
SceneSpec random_scene_spec(uint64_t seed);

struct CorpusParams {
  int count = 240;
  double eval_fraction = 1.0 / 6.0;
  int image_size = 64;
  uint64_t seed = 0;
  double robot_width = 0.4;
  double cam_height = 1.1;
  double cam_pitch = 0.42;
  double focal = 64.0;  // pixels
};

// Writes `count` samples in the dataset directory format with a train/eval
// manifest. Returns the sample ids in order.
std::vector<std::string> generate_corpus(const std::string& root, const CorpusParams& params);

}  // namespace ftfoot::synth
