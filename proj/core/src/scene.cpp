#include "latitude/scene.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "latitude/threading.hpp"

#include <json.hpp>

namespace latitude {

namespace fs = std::filesystem;
using nlohmann::json;

bool SyntheticScene::lookup(const Vec3& x, double& sigma, Vec3& rgb) const {
  for (const auto& s : spheres) {
    if ((x - s.center).squaredNorm() <= s.radius * s.radius) {
      sigma = s.density;
      rgb = s.rgb;
      return true;
    }
  }
  for (const auto& b : boxes) {
    if ((x.array() >= b.bmin.array()).all() && (x.array() <= b.bmax.array()).all()) {
      sigma = b.density;
      rgb = b.rgb;
      return true;
    }
  }
  sigma = 0.0;
  rgb = background;
  return false;
}

namespace {

Vec3 hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h, 1.0) * 6.0;
  const double xx = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  Vec3 rgb;
  if (hp < 1) rgb = Vec3(c, xx, 0);
  else if (hp < 2) rgb = Vec3(xx, c, 0);
  else if (hp < 3) rgb = Vec3(0, c, xx);
  else if (hp < 4) rgb = Vec3(0, xx, c);
  else if (hp < 5) rgb = Vec3(xx, 0, c);
  else rgb = Vec3(c, 0, xx);
  return rgb.array() + (v - c);
}

// Conservative bounding-sphere separation keeps placement rejection simple.
struct Placed {
  Vec3 center;
  double radius;
};

}  // namespace

SyntheticScene generate_scene(const SceneGenConfig& cfg, int n_tints, Rng& rng) {
  if (n_tints < 1) throw DomainError("generate_scene needs at least one tint entry");
  SyntheticScene scene;
  scene.background = cfg.background;
  scene.bbox_min = cfg.bbox_min;
  scene.bbox_max = cfg.bbox_max;

  const int count =
      cfg.min_primitives + static_cast<int>(rng.uniform_index(cfg.max_primitives - cfg.min_primitives + 1));
  std::vector<Placed> placed;
  const double golden = 0.61803398875;
  double hue = rng.uniform();
  for (int i = 0; i < count; ++i) {
    hue = std::fmod(hue + golden, 1.0);
    const Vec3 rgb = hsv_to_rgb(hue, rng.uniform(0.55, 0.95), rng.uniform(0.65, 1.0));
    for (int attempt = 0; attempt < 256; ++attempt) {
      const double r = rng.uniform(cfg.min_radius, cfg.max_radius);
      Vec3 c;
      bool inside = true;
      for (int a = 0; a < 3; ++a) {
        const double lo = cfg.bbox_min[a] + r;
        const double hi = cfg.bbox_max[a] - r;
        if (lo >= hi) {
          inside = false;
          break;
        }
        c[a] = rng.uniform(lo, hi);
      }
      if (!inside) continue;
      bool overlaps = false;
      for (const auto& p : placed) {
        if ((c - p.center).norm() < r + p.radius + 0.2) {
          overlaps = true;
          break;
        }
      }
      if (overlaps) continue;

      placed.push_back({c, r});
      if (rng.uniform() < 0.6) {
        scene.spheres.push_back({c, r, rgb, cfg.density});
      } else {
        // Box inscribed in the bounding sphere, with sides scaled per axis.
        Vec3 half;
        for (int a = 0; a < 3; ++a) half[a] = r * rng.uniform(0.55, 1.0) / std::sqrt(3.0) * 1.5;
        half = half.cwiseMin(r);
        scene.boxes.push_back({c - half, c + half, rgb, cfg.density});
      }
      break;
    }
  }

  scene.tints.reserve(n_tints);
  for (int i = 0; i < n_tints; ++i) {
    scene.tints.emplace_back(rng.uniform(cfg.tint_lo, cfg.tint_hi),
                             rng.uniform(cfg.tint_lo, cfg.tint_hi),
                             rng.uniform(cfg.tint_lo, cfg.tint_hi));
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Oracle rendering
// ---------------------------------------------------------------------------

namespace {

// Entry/exit of a ray against each primitive, clipped to [near, far].
void boundary_events(const SyntheticScene& scene, const Vec3& o, const Vec3& d, double near,
                     double far, std::vector<double>& events) {
  auto push = [&](double t) {
    if (t > near && t < far) events.push_back(t);
  };
  for (const auto& s : scene.spheres) {
    const Vec3 oc = o - s.center;
    const double b = oc.dot(d);
    const double c = oc.squaredNorm() - s.radius * s.radius;
    const double disc = b * b - c;
    if (disc <= 0.0) continue;
    const double root = std::sqrt(disc);
    push(-b - root);
    push(-b + root);
  }
  for (const auto& bx : scene.boxes) {
    double t0 = near, t1 = far;
    bool hit = true;
    for (int a = 0; a < 3 && hit; ++a) {
      if (std::abs(d[a]) < 1e-12) {
        if (o[a] < bx.bmin[a] || o[a] > bx.bmax[a]) hit = false;
        continue;
      }
      double ta = (bx.bmin[a] - o[a]) / d[a];
      double tb = (bx.bmax[a] - o[a]) / d[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
      if (t0 > t1) hit = false;
    }
    if (hit) {
      push(t0);
      push(t1);
    }
  }
}

Vec3 march_ray(const SyntheticScene& scene, const Vec3& o, const Vec3& d, double step_size,
               const Vec3& tint, double near, double far) {
  std::vector<double> events;
  boundary_events(scene, o, d, near, far, events);
  std::sort(events.begin(), events.end());

  // Walk [near, far] in steps of at most step_size, splitting at boundaries
  // so every segment has constant density and color.
  Vec3 out = Vec3::Zero();
  double transmittance = 1.0;
  double t = near;
  std::size_t ev = 0;
  double sigma;
  Vec3 rgb;
  while (t < far) {
    double t_next = std::min(t + step_size, far);
    while (ev < events.size() && events[ev] <= t + 1e-12) ++ev;
    if (ev < events.size() && events[ev] < t_next) t_next = events[ev];
    const double mid = 0.5 * (t + t_next);
    const bool hit = scene.lookup(o + mid * d, sigma, rgb);
    if (hit && sigma > 0.0) {
      const double alpha = 1.0 - std::exp(-sigma * (t_next - t));
      out += transmittance * alpha * (rgb.cwiseProduct(tint));
      transmittance *= 1.0 - alpha;
      if (transmittance < 1e-10) return out;  // opaque; nothing behind contributes
    }
    t = t_next;
  }
  return out + transmittance * scene.background;
}

}  // namespace

Image oracle_render(const Pose& pose, const CameraIntrinsics& K, const SyntheticScene& scene,
                    double step_size, const Vec3& tint, double near, double far) {
  if (!(step_size > 0.0)) throw DomainError("oracle_render requires step_size > 0");
  K.validate();
  Image image(K.width, K.height);
  const Mat3 R = pose.rotation_matrix();
  const Vec3 o = pose.translation();
  parallel_for(static_cast<std::size_t>(K.height), [&](std::size_t y0, std::size_t y1) {
    for (std::size_t y = y0; y < y1; ++y) {
      for (int x = 0; x < K.width; ++x) {
        const Vec3 cam((x + 0.5 - K.cx) / K.fx, (y + 0.5 - K.cy) / K.fy, 1.0);
        const Vec3 d = (R * cam).normalized();
        image.set_pixel(x, static_cast<int>(y), march_ray(scene, o, d, step_size, tint, near, far));
      }
    }
  }, 4);
  return image;
}

Vec3 oracle_composite(const MatX& colors, const VecX& sigmas, const VecX& depths, double far,
                      const Vec3& background) {
  Vec3 out = Vec3::Zero();
  double transmittance = 1.0;
  for (Eigen::Index i = 0; i < depths.size(); ++i) {
    const double delta = (i + 1 < depths.size() ? depths[i + 1] : far) - depths[i];
    const double alpha = 1.0 - std::exp(-sigmas[i] * delta);
    out += transmittance * alpha * colors.col(i);
    transmittance *= 1.0 - alpha;
  }
  return out + transmittance * background;
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

namespace {

Pose look_at(const Vec3& position, const Vec3& target) {
  const Vec3 forward = (target - position).normalized();
  Vec3 down = -Vec3::UnitZ() + forward.z() * forward;  // -(up projected off forward)
  if (down.norm() < 1e-9) down = Vec3::UnitX();        // looking straight up/down
  down.normalize();
  const Vec3 right = down.cross(forward);
  Mat3 R;
  R.col(0) = right;
  R.col(1) = down;
  R.col(2) = forward;
  return Pose(Quat(R), position).canonicalized();
}

}  // namespace

std::vector<Pose> generate_trajectory(const SyntheticScene& scene, int n_poses, double altitude,
                                      Rng& rng, const TrajectoryConfig& cfg) {
  if (n_poses < 1) throw DomainError("generate_trajectory needs n_poses >= 1");
  const Vec3 center = scene.centroid();
  // Smooth radial modulation: two low harmonics with random phases.
  const double p1 = rng.uniform(0.0, 2.0 * kPi);
  const double p2 = rng.uniform(0.0, 2.0 * kPi);
  const double a1 = cfg.radial_jitter * rng.uniform(0.4, 1.0);
  const double a2 = cfg.radial_jitter * rng.uniform(0.2, 0.6);

  std::vector<Pose> poses;
  poses.reserve(n_poses);
  for (int i = 0; i < n_poses; ++i) {
    const double angle = cfg.phase + 2.0 * kPi * i / n_poses;
    const double radius =
        cfg.radius * (1.0 + a1 * std::sin(2.0 * angle + p1) + a2 * std::sin(3.0 * angle + p2));
    const Vec3 position(center.x() + radius * std::cos(angle),
                        center.y() + radius * std::sin(angle), altitude);
    poses.push_back(look_at(position, center));
  }
  return poses;
}

void compute_near_far(const std::vector<Pose>& poses, const SyntheticScene& scene, double& near,
                      double& far) {
  double min_d = std::numeric_limits<double>::infinity();
  double max_d = 0.0;
  for (const auto& pose : poses) {
    const Vec3& p = pose.translation();
    const Vec3 clamped = p.cwiseMax(scene.bbox_min).cwiseMin(scene.bbox_max);
    min_d = std::min(min_d, (p - clamped).norm());
    for (int corner = 0; corner < 8; ++corner) {
      const Vec3 c((corner & 1) ? scene.bbox_max.x() : scene.bbox_min.x(),
                   (corner & 2) ? scene.bbox_max.y() : scene.bbox_min.y(),
                   (corner & 4) ? scene.bbox_max.z() : scene.bbox_min.z());
      max_d = std::max(max_d, (p - c).norm());
    }
  }
  near = std::max(0.05 * max_d, 0.5 * min_d);
  far = 1.05 * max_d;
}

// ---------------------------------------------------------------------------
// JSON IO
// ---------------------------------------------------------------------------

namespace {

json vec3_to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3 vec3_from_json(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw ParseError(std::string("expected 3-vector for ") + what);
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

json pose_to_json(const Pose& p) {
  const Vec3& t = p.translation();
  const Quat& q = p.rotation();
  return json::array({t.x(), t.y(), t.z(), q.w(), q.x(), q.y(), q.z()});
}

Pose pose_from_json(const json& j) {
  if (!j.is_array() || j.size() != 7) throw ParseError("pose must be a 7-element array");
  return Pose(Quat(j[3].get<double>(), j[4].get<double>(), j[5].get<double>(), j[6].get<double>()),
              Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>()));
}

}  // namespace

void save_scene(const std::string& path, const SyntheticScene& scene) {
  json j;
  j["background"] = vec3_to_json(scene.background);
  j["bbox_min"] = vec3_to_json(scene.bbox_min);
  j["bbox_max"] = vec3_to_json(scene.bbox_max);
  j["spheres"] = json::array();
  for (const auto& s : scene.spheres) {
    j["spheres"].push_back({{"center", vec3_to_json(s.center)},
                            {"radius", s.radius},
                            {"rgb", vec3_to_json(s.rgb)},
                            {"density", s.density}});
  }
  j["boxes"] = json::array();
  for (const auto& b : scene.boxes) {
    j["boxes"].push_back({{"min", vec3_to_json(b.bmin)},
                          {"max", vec3_to_json(b.bmax)},
                          {"rgb", vec3_to_json(b.rgb)},
                          {"density", b.density}});
  }
  j["tints"] = json::array();
  for (const auto& t : scene.tints) j["tints"].push_back(vec3_to_json(t));

  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << j.dump(2) << '\n';
}

SyntheticScene load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("cannot open scene file: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("scene json: " + std::string(e.what()));
  }
  SyntheticScene scene;
  scene.background = vec3_from_json(j.at("background"), "background");
  scene.bbox_min = vec3_from_json(j.at("bbox_min"), "bbox_min");
  scene.bbox_max = vec3_from_json(j.at("bbox_max"), "bbox_max");
  for (const auto& s : j.value("spheres", json::array())) {
    scene.spheres.push_back({vec3_from_json(s.at("center"), "sphere center"),
                             s.at("radius").get<double>(), vec3_from_json(s.at("rgb"), "rgb"),
                             s.at("density").get<double>()});
  }
  for (const auto& b : j.value("boxes", json::array())) {
    scene.boxes.push_back({vec3_from_json(b.at("min"), "box min"),
                           vec3_from_json(b.at("max"), "box max"),
                           vec3_from_json(b.at("rgb"), "rgb"), b.at("density").get<double>()});
  }
  for (const auto& t : j.value("tints", json::array())) {
    scene.tints.push_back(vec3_from_json(t, "tint"));
  }
  return scene;
}

std::vector<int> Dataset::split_indices(const std::string& split) const {
  std::vector<int> idx;
  for (int i = 0; i < static_cast<int>(frames.size()); ++i) {
    if (frames[i].split == split) idx.push_back(i);
  }
  return idx;
}

void write_dataset(const std::string& dir, const Dataset& dataset) {
  json j;
  j["seed"] = dataset.seed;
  j["intrinsics"] = {{"fx", dataset.intrinsics.fx}, {"fy", dataset.intrinsics.fy},
                     {"cx", dataset.intrinsics.cx}, {"cy", dataset.intrinsics.cy},
                     {"width", dataset.intrinsics.width}, {"height", dataset.intrinsics.height}};
  j["near"] = dataset.near;
  j["far"] = dataset.far;
  j["background"] = vec3_to_json(dataset.background);
  j["scene"] = dataset.scene_file;
  j["frames"] = json::array();
  for (const auto& f : dataset.frames) {
    j["frames"].push_back({{"file", f.file},
                           {"pose", pose_to_json(f.pose)},
                           {"tint", f.tint},
                           {"split", f.split}});
  }
  fs::create_directories(dir);
  const std::string path = (fs::path(dir) / "manifest.json").string();
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << j.dump(2) << '\n';
}

Dataset read_dataset(const std::string& dir) {
  const std::string path = (fs::path(dir) / "manifest.json").string();
  std::ifstream in(path);
  if (!in) throw MissingFileError("cannot open dataset manifest: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("dataset manifest: " + std::string(e.what()));
  }

  Dataset ds;
  try {
    ds.seed = j.at("seed").get<std::uint64_t>();
    const auto& k = j.at("intrinsics");
    ds.intrinsics = {k.at("fx").get<double>(), k.at("fy").get<double>(),
                     k.at("cx").get<double>(), k.at("cy").get<double>(),
                     k.at("width").get<int>(), k.at("height").get<int>()};
    ds.near = j.at("near").get<double>();
    ds.far = j.at("far").get<double>();
    ds.background = vec3_from_json(j.at("background"), "background");
    ds.scene_file = j.value("scene", "");
    for (const auto& f : j.at("frames")) {
      Frame frame;
      frame.file = f.at("file").get<std::string>();
      frame.pose = pose_from_json(f.at("pose"));
      frame.tint = f.at("tint").get<int>();
      frame.split = f.at("split").get<std::string>();
      ds.frames.push_back(frame);
    }
  } catch (const json::exception& e) {
    throw ParseError("dataset manifest: " + std::string(e.what()));
  }
  ds.intrinsics.validate();

  for (const auto& f : ds.frames) {
    const fs::path img = fs::path(dir) / f.file;
    if (!fs::exists(img)) throw MissingFileError("manifest references missing image: " + img.string());
  }
  if (!ds.scene_file.empty() && !fs::exists(fs::path(dir) / ds.scene_file)) {
    throw MissingFileError("manifest references missing scene file: " + ds.scene_file);
  }
  return ds;
}

Image load_frame_image(const std::string& dir, const Frame& frame) {
  return read_png((fs::path(dir) / frame.file).string());
}

}  // namespace latitude
