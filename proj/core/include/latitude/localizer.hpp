// Pose optimization against a trained field, and the two-stage localization
// pipeline (regressor prior + photometric refinement).
//
// Tangent mode keeps one persistent twist as the optimizer variable with
// consistent Adam moments; each step's gradient is evaluated about the
// current pose exp(xi) * prior (re-anchored), so it stays exact as xi grows.
// Recursive mode instead applies each Adam step to the pose immediately and
// re-anchors the moments' coordinates every step; the first steps of the two
// modes coincide by construction.

#pragma once

#include <string>
#include <vector>

#include "latitude/encoding.hpp"
#include "latitude/field.hpp"
#include "latitude/regressor.hpp"
#include "latitude/renderer.hpp"

namespace latitude {

enum class OptimMode { kTangent, kSe3Recursive };

struct TdlfConfig {
  bool enabled = true;
  double alpha0_frac = 0.4;  // truncation offset as a fraction of l_pos
  int update_interval = 50;
};

struct EarlyStopConfig {
  bool enabled = true;
  int window = 50;
  double rel_improvement = 1e-4;
};

struct LocalizerConfig {
  int iterations = 500;
  int rays_per_step = 256;
  int samples_per_ray = 64;
  double lr = 1e-2;
  double lr_decay = 0.1;  // lr shrinks to lr*lr_decay over the run
  OptimMode mode = OptimMode::kTangent;
  TdlfConfig tdlf;
  EarlyStopConfig early_stop;
  double divergence_guard = 0.75;  // stop when drift exceeds this fraction of scene diameter
  std::uint64_t seed = 1;
  bool deterministic = false;
};

struct StepRecord {
  int step = 0;
  double alpha = 0.0;
  double loss = 0.0;  // batch-mean photometric loss
  double t_err = std::numeric_limits<double>::quiet_NaN();
  double r_err = std::numeric_limits<double>::quiet_NaN();
};

struct OptimizationTrace {
  std::vector<StepRecord> steps;
  Pose final_pose;
  bool converged = false;
  std::string stop_reason;
};

// Refines a prior pose by minimizing the photometric loss of omega-masked
// renders against the observed image. ground_truth, when given, only fills
// the per-step error columns of the trace. The appearance embedding is
// frozen to the table mean for the whole optimization.
std::pair<Pose, OptimizationTrace> optimize_pose(const Image& observed, const Pose& prior,
                                                 const PartitionedField<float>& field,
                                                 const CameraIntrinsics& K,
                                                 const RenderOptions& render,
                                                 const LocalizerConfig& cfg,
                                                 const Pose* ground_truth = nullptr);

struct LocalizeReport {
  Pose prior;
  Pose refined;
  bool converged = false;
  OptimizationTrace trace;
  bool has_truth = false;
  PoseError prior_error;
  PoseError refined_error;
};

// Two-stage pipeline: regressor prior, then photometric refinement. On a
// failed refinement (divergence guard or non-finite loss) the prior is
// returned as the result, flagged not converged.
LocalizeReport localize(const Image& observed, const RegressorNet& regressor,
                        const PartitionedField<float>& field, const CameraIntrinsics& K,
                        const RenderOptions& render, const LocalizerConfig& cfg,
                        const Pose* ground_truth = nullptr);

// CSV: "step,alpha,loss,t_err,r_err" with a seed header line.
void write_trace_csv(const std::string& path, const OptimizationTrace& trace, std::uint64_t seed);

}  // namespace latitude
