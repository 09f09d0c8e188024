#include "latitude/localizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "latitude/adam.hpp"

namespace latitude {

std::pair<Pose, OptimizationTrace> optimize_pose(const Image& observed, const Pose& prior,
                                                 const PartitionedField<float>& field,
                                                 const CameraIntrinsics& K,
                                                 const RenderOptions& render,
                                                 const LocalizerConfig& cfg,
                                                 const Pose* ground_truth) {
  if (!prior.translation().allFinite()) throw NonFiniteError("optimize_pose: non-finite prior");
  if (cfg.tdlf.enabled &&
      !(cfg.tdlf.alpha0_frac >= 0.0 && cfg.tdlf.alpha0_frac <= 1.0)) {
    throw DomainError("tdlf.alpha0_frac must lie in [0, 1]");
  }
  if (cfg.iterations < cfg.tdlf.update_interval && cfg.tdlf.enabled) {
    throw DomainError("iterations must be at least the schedule update interval");
  }

  const int L = field.config().l_pos;
  const double alpha0_bands = cfg.tdlf.alpha0_frac * L;
  const double diameter = field.bounds().diameter();

  MatXT<float> emb(field.config().d_app, 1);
  emb.col(0) = field.mean_embedding();

  Rng pixel_rng(cfg.seed, "localizer.rays");
  Rng depth_rng(cfg.seed, "localizer.depths");

  Adam<double> adam(6);
  Vec6 xi = Vec6::Zero();        // tangent mode: the persistent variable
  Pose current = prior;          // recursive mode: the evolving pose
  const double lr_end = cfg.lr * cfg.lr_decay;

  OptimizationTrace trace;
  trace.converged = true;
  trace.stop_reason = "completed";
  std::vector<double> losses;
  losses.reserve(cfg.iterations);

  RenderOptions opts = render;
  opts.samples_per_ray = cfg.samples_per_ray;
  opts.deterministic = cfg.deterministic;

  for (int step = 0; step < cfg.iterations; ++step) {
    const double alpha =
        cfg.tdlf.enabled ? schedule_alpha(step, cfg.iterations, cfg.tdlf.update_interval) : 1.0;
    const VecX omega =
        cfg.tdlf.enabled ? band_weights(alpha, alpha0_bands, L) : VecX::Ones(L);

    const PixelSet pixels = cfg.deterministic
                                ? deterministic_pixels(K, cfg.rays_per_step)
                                : sample_pixels(K, cfg.rays_per_step, pixel_rng);

    const Pose base = cfg.mode == OptimMode::kTangent ? prior : current;
    const Twist step_xi = cfg.mode == OptimMode::kTangent
                              ? Twist::from_vector(xi)
                              : Twist{};
    const auto result = loss_grad_wrt_twist<float>(field, observed, pixels, base, step_xi, K, emb,
                                                   omega, opts, cfg.deterministic ? nullptr : &depth_rng);

    const Pose pose_now = apply_increment(step_xi, base);
    StepRecord rec;
    rec.step = step;
    rec.alpha = alpha;
    rec.loss = result.loss_mean;
    if (ground_truth) {
      const PoseError err = pose_errors(pose_now, *ground_truth);
      rec.t_err = err.translation;
      rec.r_err = err.rotation_deg;
    }
    trace.steps.push_back(rec);
    losses.push_back(result.loss_mean);

    if (!std::isfinite(result.loss)) {
      trace.converged = false;
      trace.stop_reason = "non-finite loss";
      break;
    }

    const double lr = exp_decay_lr(cfg.lr, lr_end, step, cfg.iterations);
    if (cfg.mode == OptimMode::kTangent) {
      adam.step(xi, result.gradient, lr);
      current = apply_increment(Twist::from_vector(xi), prior);
    } else {
      // Moments persist but their anchor resets: the update applies to the
      // pose immediately and the increment variable returns to zero.
      Vec6 delta = Vec6::Zero();
      adam.step(delta, result.gradient, lr);
      current = apply_increment(Twist::from_vector(delta), current);
    }

    const double drift = (current.translation() - prior.translation()).norm();
    if (drift > cfg.divergence_guard * diameter) {
      trace.converged = false;
      trace.stop_reason = "divergence guard";
      break;
    }

    if (cfg.early_stop.enabled && static_cast<int>(losses.size()) > cfg.early_stop.window) {
      const int w = cfg.early_stop.window;
      const double before =
          *std::min_element(losses.begin(), losses.end() - w);
      const double recent = *std::min_element(losses.end() - w, losses.end());
      if (before - recent < cfg.early_stop.rel_improvement * std::abs(before)) {
        trace.stop_reason = "loss plateau";
        break;
      }
    }
  }

  trace.final_pose = current;
  return {current, trace};
}

LocalizeReport localize(const Image& observed, const RegressorNet& regressor,
                        const PartitionedField<float>& field, const CameraIntrinsics& K,
                        const RenderOptions& render, const LocalizerConfig& cfg,
                        const Pose* ground_truth) {
  LocalizeReport report;
  report.prior = predict_pose(observed, regressor);
  auto [refined, trace] = optimize_pose(observed, report.prior, field, K, render, cfg, ground_truth);
  report.converged = trace.converged;
  report.refined = trace.converged ? refined : report.prior;
  report.trace = std::move(trace);
  if (ground_truth) {
    report.has_truth = true;
    report.prior_error = pose_errors(report.prior, *ground_truth);
    report.refined_error = pose_errors(report.refined, *ground_truth);
  }
  return report;
}

void write_trace_csv(const std::string& path, const OptimizationTrace& trace,
                     std::uint64_t seed) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "# seed=" << seed << "\n";
  out << "step,alpha,loss,t_err,r_err\n";
  char buf[200];
  for (const auto& s : trace.steps) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g", s.step, s.alpha, s.loss, s.t_err,
                  s.r_err);
    out << buf << "\n";
  }
  out << "# final " << format_pose_line(trace.final_pose) << "\n";
  out << "# converged " << (trace.converged ? 1 : 0) << " reason \"" << trace.stop_reason
      << "\"\n";
}

}  // namespace latitude
