// Field training: random ray batches across all training images, Adam with
// exponential learning-rate decay, periodic checkpoints and held-out PSNR.
//
// Training always uses the full-frequency encoding (all band weights 1); the
// low-pass schedule applies only at localization time against a trained
// field. There is no density noise regularizer anywhere in the loop.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "latitude/field.hpp"
#include "latitude/renderer.hpp"
#include "latitude/scene.hpp"

namespace latitude {

struct TrainConfig {
  int iterations = 3000;
  int rays_per_step = 1024;
  int samples_per_ray = 64;
  double lr_start = 5e-4;
  double lr_end = 5e-5;
  std::uint64_t seed = 1;
  int checkpoint_every = 1000;   // 0 disables intermediate checkpoints
  int eval_every = 500;          // 0 disables PSNR evaluation during training
  int eval_images = 3;           // held-out views per evaluation
  int eval_samples_per_ray = 64; // deterministic midpoint sampling for eval
  bool deterministic = false;    // midpoint depths (for exactness tests)
};

struct TrainLogRow {
  int step = 0;
  double loss = 0.0;       // summed squared residual over the batch
  double loss_mean = 0.0;  // per-ray mean, for reading curves
  double lr = 0.0;
  double psnr_val = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  PartitionedField<float> field;
  std::vector<TrainLogRow> log;
  double final_psnr = std::numeric_limits<double>::quiet_NaN();
};

// 10*log10(1/MSE) over [0,1] float images; +inf for identical inputs.
// Throws DimensionError when sizes differ.
double psnr(const Image& a, const Image& b);

// dataset.frames and images are aligned; training rays come from the train
// split, PSNR evaluation from the test split. Writes field.ckpt, periodic
// checkpoints, and train_log.csv into out_dir when it is non-empty. A
// non-finite loss aborts with NonFiniteError after writing a diagnostic
// snapshot checkpoint.
TrainResult train_field(const Dataset& dataset, const std::vector<Image>& images,
                        const SceneBounds& bounds, const FieldConfig& field_cfg,
                        const TrainConfig& cfg, const std::string& out_dir = "",
                        const std::function<void(const TrainLogRow&)>& on_step = nullptr);

// Mean PSNR of the field against the given frames (midpoint sampling, mean
// appearance embedding).
double evaluate_psnr(const PartitionedField<float>& field, const Dataset& dataset,
                     const std::vector<Image>& images, const std::vector<int>& frame_indices,
                     int samples_per_ray);

void write_train_log(const std::string& path, const std::vector<TrainLogRow>& log,
                     std::uint64_t seed);

}  // namespace latitude
