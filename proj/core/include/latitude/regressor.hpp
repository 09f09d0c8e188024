// Absolute pose regression: a small stride-2 conv stack followed by fully
// connected layers, ending in a 3-vector position and 4-vector quaternion
// head. Trained on real renders of the dataset plus virtual images rendered
// by the field at poses sampled around the training trajectory, with
// appearance embeddings interpolated between training images.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "latitude/field.hpp"
#include "latitude/image.hpp"
#include "latitude/renderer.hpp"
#include "latitude/scene.hpp"

namespace latitude {

struct RegressorConfig {
  std::vector<int> conv_widths = {16, 32, 64, 64};  // stride-2 3x3 blocks
  std::vector<int> fc_widths = {256, 128, 64};      // hidden FC layers before the 7-d head
  int input_width = 96, input_height = 96;
};

class RegressorNet {
 public:
  RegressorNet() = default;
  explicit RegressorNet(const RegressorConfig& cfg);

  const RegressorConfig& config() const { return cfg_; }
  VecXT<float>& params() { return params_; }
  const VecXT<float>& params() const { return params_; }

  void init(Rng& rng);

  // Raw 7-vector head outputs (tx ty tz qw qx qy qz), one column per image.
  // Images are resized to the configured input size on ingest.
  MatXT<float> forward(const std::vector<const Image*>& batch) const;

  // Forward plus parameter gradients for upstream d(loss)/d(head) columns.
  MatXT<float> forward_backward(const std::vector<const Image*>& batch,
                                const MatXT<float>& d_head, VecXT<float>& param_grads) const;

  // Single-pass variant: upstream(b, head_b) supplies d(loss)/d(head) for
  // image b right after its forward, so each image is processed once.
  MatXT<float> forward_backward_fn(
      const std::vector<const Image*>& batch,
      const std::function<VecXT<float>(int, const VecXT<float>&)>& upstream,
      VecXT<float>& param_grads) const;

  int flat_feature_dim() const { return flat_dim_; }

 private:
  struct Layout;
  RegressorConfig cfg_;
  std::vector<detail::LayerSpec> conv_, fc_;
  detail::LayerSpec head_;
  int flat_dim_ = 0;
  VecXT<float> params_;
};

// Head output -> Pose (quaternion normalized). The raw head is used inside
// the training loss; normalization happens only at this boundary.
Pose head_to_pose(const VecXT<float>& head);

// Sum of the position L2 error and gamma times the L2 distance between the
// raw predicted quaternion and the normalized target quaternion (norms, not
// squared norms).
double apr_loss(const VecXT<float>& pred_head, const Pose& target, double gamma);

// Gradient of apr_loss in the raw head coordinates.
VecXT<float> apr_loss_grad(const VecXT<float>& pred_head, const Pose& target, double gamma);

struct AugmentConfig {
  double rect_w = 3.0;            // sampling rectangle extent along x (scene units)
  double rect_h = 3.0;            // extent along y
  int samples_per_anchor = 2;
  double theta_max = 0.0873;      // radians, per-axis orientation perturbation
  std::vector<int> render_epochs = {0};
  int render_samples_per_ray = 32;
  int anchor_stride = 1;          // use every k-th training pose as an anchor
};

// Virtual poses: positions uniform in the axis-aligned rect_w x rect_h
// horizontal rectangle centered on each anchor (altitude unchanged);
// orientations copy the anchor then apply independent per-axis rotations
// uniform in [-theta_max, theta_max]. Quaternions canonicalized to w >= 0.
std::vector<Pose> sample_virtual_poses(const std::vector<Pose>& anchors, const AugmentConfig& cfg,
                                       Rng& rng);

// Convex combination lambda*e_i + (1-lambda)*e_j of two distinct rows of the
// appearance table, lambda uniform in [0,1]. Throws DomainError with fewer
// than two rows.
VecXT<float> interpolate_embedding(const MatXT<float>& table_columns, Rng& rng);

struct RegressorTrainConfig {
  int epochs = 120;
  int batch_size = 16;
  double lr_start = 1e-4;
  double lr_end = 2e-5;
  double gamma = 250.0;
  double beta = 0.8;  // weight of the synthetic-image loss term
  bool augment = true;
  AugmentConfig aug;
  std::uint64_t seed = 1;
};

struct RegressorTrainResult {
  RegressorNet net;
  std::vector<double> epoch_loss;  // mean combined loss per epoch
  int virtual_images_rendered = 0;
};

RegressorTrainResult train_regressor(const Dataset& dataset, const std::vector<Image>& images,
                                     const PartitionedField<float>& field,
                                     const RegressorConfig& net_cfg,
                                     const RegressorTrainConfig& cfg,
                                     const std::function<void(int, double)>& on_epoch = nullptr);

Pose predict_pose(const Image& image, const RegressorNet& net);

void save_regressor(const std::string& path, const RegressorNet& net);
RegressorNet load_regressor(const std::string& path);

}  // namespace latitude
