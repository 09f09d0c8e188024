// Procedural synthetic scene with an analytic brute-force renderer, smooth
// trajectory generation, and dataset manifest IO. This module is the ground
// truth everything else is validated against: it shares no rendering code
// with the field/renderer path, only the compositing definition.

#pragma once

#include <string>
#include <vector>

#include "latitude/geometry.hpp"
#include "latitude/image.hpp"
#include "latitude/rng.hpp"

namespace latitude {

struct SpherePrimitive {
  Vec3 center = Vec3::Zero();
  double radius = 1.0;
  Vec3 rgb = Vec3::Ones();
  double density = 1.0;
};

struct BoxPrimitive {
  Vec3 bmin = Vec3::Zero();
  Vec3 bmax = Vec3::Ones();
  Vec3 rgb = Vec3::Ones();
  double density = 1.0;
};

struct SyntheticScene {
  std::vector<SpherePrimitive> spheres;
  std::vector<BoxPrimitive> boxes;
  Vec3 background = Vec3(0.5, 0.5, 0.5);
  Vec3 bbox_min = Vec3(-10, -10, 0);
  Vec3 bbox_max = Vec3(10, 10, 8);
  std::vector<Vec3> tints;  // per-image color multipliers on primitive colors

  // Density/color at a point; primitives are disjoint by construction and
  // matched in declaration order. Returns false in free space.
  bool lookup(const Vec3& x, double& sigma, Vec3& rgb) const;
  double diameter() const { return (bbox_max - bbox_min).norm(); }
  Vec3 centroid() const { return 0.5 * (bbox_min + bbox_max); }
};

struct SceneGenConfig {
  int min_primitives = 8;
  int max_primitives = 16;
  Vec3 bbox_min = Vec3(-10, -10, 0);
  Vec3 bbox_max = Vec3(10, 10, 8);
  Vec3 background = Vec3(0.58, 0.62, 0.68);
  double density = 6.0;         // constant inside every primitive
  double min_radius = 1.0;
  double max_radius = 2.4;
  double tint_lo = 0.9, tint_hi = 1.1;
};

// Non-overlapping primitives with distinct saturated colors; n_tints entries
// of the per-image tint table, each channel uniform in [tint_lo, tint_hi].
SyntheticScene generate_scene(const SceneGenConfig& cfg, int n_tints, Rng& rng);

// Dense ray march against the analytic scene. Steps have length at most
// step_size and are additionally split exactly at primitive boundaries, so
// each step sees constant density/color and refining step_size does not move
// the result. The tint multiplies primitive colors only.
Image oracle_render(const Pose& pose, const CameraIntrinsics& K, const SyntheticScene& scene,
                    double step_size, const Vec3& tint, double near, double far);

// Same compositing definition as the neural renderer, written independently
// here so tests can compare the two implementations on identical inputs.
Vec3 oracle_composite(const MatX& colors, const VecX& sigmas, const VecX& depths, double far,
                      const Vec3& background);

struct TrajectoryConfig {
  double radius = 12.0;         // loop radius around the scene centroid
  double radial_jitter = 0.08;  // fraction of radius, smooth modulation
  double phase = 0.0;           // start angle, radians
};

// Poses on a smooth loop at exactly the given altitude, each oriented toward
// the scene centroid (camera +z forward, image up along world +z), with
// quaternions canonicalized to w >= 0.
std::vector<Pose> generate_trajectory(const SyntheticScene& scene, int n_poses, double altitude,
                                      Rng& rng, const TrajectoryConfig& cfg);

struct Frame {
  std::string file;
  Pose pose;
  int tint = 0;
  std::string split;  // "train" or "test"
};

struct Dataset {
  CameraIntrinsics intrinsics;
  std::vector<Frame> frames;
  double near = 0.0, far = 0.0;
  Vec3 background = Vec3(0.5, 0.5, 0.5);
  std::string scene_file;  // relative to the dataset directory
  std::uint64_t seed = 0;

  std::vector<int> split_indices(const std::string& split) const;
};

// Shared sampling window for a camera set: slightly inside the closest
// camera-to-box distance out to just past the farthest box corner.
void compute_near_far(const std::vector<Pose>& poses, const SyntheticScene& scene, double& near,
                      double& far);

void save_scene(const std::string& path, const SyntheticScene& scene);
SyntheticScene load_scene(const std::string& path);

// manifest.json in the dataset directory. Reading validates that every
// referenced image file exists (MissingFileError naming the file) and that
// poses parse (ParseError).
void write_dataset(const std::string& dir, const Dataset& dataset);
Dataset read_dataset(const std::string& dir);

Image load_frame_image(const std::string& dir, const Frame& frame);

}  // namespace latitude
