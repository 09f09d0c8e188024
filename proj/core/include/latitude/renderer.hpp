// Ray generation, stratified depth sampling, volume compositing, photometric
// loss, and the loss gradient with respect to a pose twist.
//
// Camera model: +z forward, pixel centers at (u+0.5, v+0.5), directions
// ((u+0.5-cx)/fx, (v+0.5-cy)/fy, 1) rotated into the world frame and
// normalized. Depth samples live on a fixed [near, far] window shared by a
// whole dataset so rendering stays differentiable in the pose.

#pragma once

#include <optional>
#include <vector>

#include "latitude/field.hpp"
#include "latitude/geometry.hpp"
#include "latitude/image.hpp"
#include "latitude/rng.hpp"

namespace latitude {

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double near = 0.0, far = 1.0;
};

using PixelSet = std::vector<Eigen::Vector2i>;

struct RenderOptions {
  int samples_per_ray = 64;
  double near = 0.1;
  double far = 10.0;
  Vec3 background = Vec3(0.5, 0.5, 0.5);
  bool deterministic = false;  // bin midpoints instead of stratified jitter
};

// Throws DomainError when a pixel lies outside the image bounds.
std::vector<Ray> generate_rays(const Pose& pose, const CameraIntrinsics& K, const PixelSet& pixels,
                               double near = 0.0, double far = 1.0);

// One uniform draw per equal-width bin of [near, far]; strictly increasing.
// With rng == nullptr returns the bin midpoints (deterministic mode).
VecX stratified_depths(double near, double far, int n, Rng* rng);

// Emission-absorption compositing over one ray. delta_i = s_{i+1} - s_i with
// the last delta reaching far; the leftover transmittance multiplies the
// background color. Optional weights output has N+1 entries (samples then
// background) and sums to 1 exactly.
Vec3 composite(const MatX& colors, const VecX& sigmas, const VecX& depths, double far,
               const Vec3& background, VecX* weights = nullptr);

// Reverse pass of composite for a given upstream d(loss)/d(pixel).
void composite_backward(const MatX& colors, const VecX& sigmas, const VecX& depths, double far,
                        const Vec3& background, const Vec3& d_out, MatX& d_colors, VecX& d_sigmas);

// Sum over rays of squared L2 color residuals (columns of 3xR matrices).
double photometric_loss(const MatX& rendered, const MatX& observed);
double photometric_loss_mean(const MatX& rendered, const MatX& observed);

// Evenly covering deterministic pixel set (row-major strided grid).
PixelSet deterministic_pixels(const CameraIntrinsics& K, int count);
PixelSet sample_pixels(const CameraIntrinsics& K, int count, Rng& rng);

// A rendered pixel batch with everything the reverse pass needs retained.
template <typename S>
struct RayBatch {
  PixelSet pixels;
  MatXT<S> origins;       // 3 x R
  MatXT<S> directions;    // 3 x R, unit
  MatXT<S> depths;        // N x R, strictly increasing per column
  MatXT<S> embeddings;    // d_app x R
  MatXT<S> sample_color;  // 3 x (R*N), sample j of ray r at column r*N+j
  VecXT<S> sample_sigma;  // R*N
  MatXT<S> colors;        // 3 x R, composited
  double far = 0.0;
  Vec3 background = Vec3::Zero();

  int num_rays() const { return static_cast<int>(origins.cols()); }
  int samples_per_ray() const { return static_cast<int>(depths.rows()); }
};

// Evaluates the field and composites a batch whose origins, directions,
// depths, embeddings, far, and background are already set. Rays need not
// share a camera (the trainer mixes images in one batch).
template <typename S>
void shade_batch(const PartitionedField<S>& field, RayBatch<S>& batch, const VecX& omega);

// Renders a pixel set at a pose. The embedding is either one column
// broadcast to all rays or a d_app x R matrix.
template <typename S>
RayBatch<S> render_pixels(const PartitionedField<S>& field, const Pose& pose,
                          const CameraIntrinsics& K, const PixelSet& pixels,
                          const MatXT<S>& embeddings, const VecX& omega,
                          const RenderOptions& options, Rng* rng);

// Per-sample upstream gradients (d color, d sigma) from per-ray upstream
// d(loss)/d(pixel color).
template <typename S>
void composite_backward_batch(const RayBatch<S>& batch, const MatXT<S>& d_colors,
                              MatXT<S>& d_sample_color, VecXT<S>& d_sample_sigma);

// d(photometric loss)/d(twist) at a zero increment about the pose the batch
// was rendered from: chains compositing -> field position/direction
// gradients -> the ray dependence on a world-frame increment.
template <typename S>
Vec6 twist_gradient(const PartitionedField<S>& field, const RayBatch<S>& batch,
                    const MatXT<S>& d_colors, const VecX& omega);

// Photometric loss of a batch against observed pixels plus the twist
// gradient about exp(xi) * base (re-anchored at the current estimate).
template <typename S>
struct TwistStepResult {
  double loss = 0.0;
  double loss_mean = 0.0;
  Vec6 gradient = Vec6::Zero();
};

template <typename S>
TwistStepResult<S> loss_grad_wrt_twist(const PartitionedField<S>& field, const Image& observed,
                                       const PixelSet& pixels, const Pose& base_pose,
                                       const Twist& xi, const CameraIntrinsics& K,
                                       const MatXT<S>& embeddings, const VecX& omega,
                                       const RenderOptions& options, Rng* rng);

// Full-frame render (rows processed in bounded chunks).
template <typename S>
Image render_image(const PartitionedField<S>& field, const Pose& pose, const CameraIntrinsics& K,
                   const VecXT<S>& embedding, const VecX& omega, const RenderOptions& options,
                   Rng* rng = nullptr);

// Observed pixel colors gathered into a 3 x R matrix.
MatX gather_pixels(const Image& image, const PixelSet& pixels);

}  // namespace latitude
