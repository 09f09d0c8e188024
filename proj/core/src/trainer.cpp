#include "latitude/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "latitude/adam.hpp"

namespace latitude {

namespace fs = std::filesystem;

double psnr(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) {
    throw DimensionError("psnr: image sizes differ");
  }
  double mse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.data.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

double evaluate_psnr(const PartitionedField<float>& field, const Dataset& dataset,
                     const std::vector<Image>& images, const std::vector<int>& frame_indices,
                     int samples_per_ray) {
  if (frame_indices.empty()) return std::numeric_limits<double>::quiet_NaN();
  RenderOptions options;
  options.samples_per_ray = samples_per_ray;
  options.near = dataset.near;
  options.far = dataset.far;
  options.background = dataset.background;
  options.deterministic = true;
  const VecXT<float> emb = field.mean_embedding();
  const VecX omega = VecX::Ones(field.config().l_pos);

  double sum = 0.0;
  for (int idx : frame_indices) {
    const Image rendered =
        render_image(field, dataset.frames[idx].pose, dataset.intrinsics, emb, omega, options);
    sum += psnr(rendered, images[idx]);
  }
  return sum / static_cast<double>(frame_indices.size());
}

void write_train_log(const std::string& path, const std::vector<TrainLogRow>& log,
                     std::uint64_t seed) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "# seed=" << seed << "\n";
  out << "step,loss,lr,psnr_val\n";
  char buf[160];
  for (const auto& row : log) {
    if (std::isnan(row.psnr_val)) {
      std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,", row.step, row.loss, row.lr);
    } else {
      std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g", row.step, row.loss, row.lr,
                    row.psnr_val);
    }
    out << buf << "\n";
  }
}

TrainResult train_field(const Dataset& dataset, const std::vector<Image>& images,
                        const SceneBounds& bounds, const FieldConfig& field_cfg,
                        const TrainConfig& cfg, const std::string& out_dir,
                        const std::function<void(const TrainLogRow&)>& on_step) {
  if (cfg.iterations <= 0) throw DomainError("train_field: iterations must be positive");
  if (!(cfg.lr_end < cfg.lr_start)) throw DomainError("train_field: lr_end must be < lr_start");
  const std::vector<int> train_idx = dataset.split_indices("train");
  const std::vector<int> test_idx = dataset.split_indices("test");
  if (train_idx.empty()) throw DomainError("train_field: dataset has no train split");
  if (images.size() != dataset.frames.size()) {
    throw DimensionError("train_field: images must align with dataset frames");
  }

  const int n_train = static_cast<int>(train_idx.size());
  PartitionedField<float> field(field_cfg, bounds, n_train);
  {
    Rng init_rng(cfg.seed, "train.init");
    field.init(init_rng);
  }
  Rng ray_rng(cfg.seed, "train.rays");
  Rng depth_rng(cfg.seed, "train.depths");

  Adam<float> adam(field.params().size());
  const VecX omega = VecX::Ones(field_cfg.l_pos);
  const int N = cfg.samples_per_ray;
  const int R = cfg.rays_per_step;
  const int d_app = field_cfg.d_app;

  GradRequest req;
  req.params = true;
  req.embedding = true;

  TrainResult result{std::move(field), {}, std::numeric_limits<double>::quiet_NaN()};
  PartitionedField<float>& f = result.field;
  if (!out_dir.empty()) fs::create_directories(out_dir);

  std::vector<int> ray_image(R);
  for (int step = 0; step < cfg.iterations; ++step) {
    const double lr = exp_decay_lr(cfg.lr_start, cfg.lr_end, step, cfg.iterations);

    // Rays drawn uniformly over (train image, pixel).
    RayBatch<float> batch;
    batch.far = dataset.far;
    batch.background = dataset.background;
    batch.origins.resize(3, R);
    batch.directions.resize(3, R);
    batch.depths.resize(N, R);
    batch.embeddings.resize(d_app, R);
    MatX observed(3, R);
    batch.pixels.resize(R);
    for (int r = 0; r < R; ++r) {
      const int ti = static_cast<int>(ray_rng.uniform_index(n_train));
      const int frame = train_idx[ti];
      const int u = static_cast<int>(ray_rng.uniform_index(dataset.intrinsics.width));
      const int v = static_cast<int>(ray_rng.uniform_index(dataset.intrinsics.height));
      ray_image[r] = ti;
      batch.pixels[r] = Eigen::Vector2i(u, v);
      const Pose& pose = dataset.frames[frame].pose;
      const Vec3 cam((u + 0.5 - dataset.intrinsics.cx) / dataset.intrinsics.fx,
                     (v + 0.5 - dataset.intrinsics.cy) / dataset.intrinsics.fy, 1.0);
      batch.origins.col(r) = pose.translation().cast<float>();
      batch.directions.col(r) = (pose.rotation() * cam).normalized().cast<float>();
      batch.depths.col(r) =
          stratified_depths(dataset.near, dataset.far, N, cfg.deterministic ? nullptr : &depth_rng)
              .cast<float>();
      batch.embeddings.col(r) = f.embedding(ti);
      observed.col(r) = images[frame].pixel(u, v);
    }

    shade_batch(f, batch, omega);
    const MatX rendered = batch.colors.cast<double>();
    const double loss = photometric_loss(rendered, observed);
    if (!std::isfinite(loss)) {
      if (!out_dir.empty()) {
        save_field((fs::path(out_dir) / "diverged.ckpt").string(), f);
        write_train_log((fs::path(out_dir) / "train_log.csv").string(), result.log, cfg.seed);
      }
      throw NonFiniteError("training loss became non-finite at step " + std::to_string(step));
    }

    const MatXT<float> d_colors = (2.0 * (rendered - observed)).cast<float>();
    MatXT<float> d_sample_color;
    VecXT<float> d_sample_sigma;
    composite_backward_batch(batch, d_colors, d_sample_color, d_sample_sigma);

    MatXT<float> X, D, E;
    {
      // Rebuild flattened inputs for the reverse pass.
      X.resize(3, static_cast<Eigen::Index>(R) * N);
      D.resize(3, static_cast<Eigen::Index>(R) * N);
      E.resize(d_app, static_cast<Eigen::Index>(R) * N);
      for (int r = 0; r < R; ++r) {
        for (int j = 0; j < N; ++j) {
          const Eigen::Index col = static_cast<Eigen::Index>(r) * N + j;
          X.col(col) = batch.origins.col(r) + batch.depths(j, r) * batch.directions.col(r);
          D.col(col) = batch.directions.col(r);
          E.col(col) = batch.embeddings.col(r);
        }
      }
    }
    FieldGradients<float> grads;
    f.forward_backward(X, D, E, omega, d_sample_color, d_sample_sigma, req, grads);

    // Scatter per-sample embedding gradients into the appearance block.
    for (int r = 0; r < R; ++r) {
      const std::size_t off = f.appearance_offset() + std::size_t(ray_image[r]) * d_app;
      for (int j = 0; j < N; ++j) {
        grads.params.segment(static_cast<Eigen::Index>(off), d_app) +=
            grads.d_emb.col(static_cast<Eigen::Index>(r) * N + j);
      }
    }

    adam.step(f.params(), grads.params, lr);

    TrainLogRow row;
    row.step = step;
    row.loss = loss;
    row.loss_mean = loss / R;
    row.lr = lr;
    const bool eval_now =
        cfg.eval_every > 0 && !test_idx.empty() &&
        ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.iterations);
    if (eval_now) {
      std::vector<int> eval_idx(test_idx.begin(),
                                test_idx.begin() + std::min<std::size_t>(cfg.eval_images,
                                                                         test_idx.size()));
      row.psnr_val = evaluate_psnr(f, dataset, images, eval_idx, cfg.eval_samples_per_ray);
      result.final_psnr = row.psnr_val;
    }
    result.log.push_back(row);
    if (on_step) on_step(row);

    if (!out_dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
        step + 1 < cfg.iterations) {
      char name[64];
      std::snprintf(name, sizeof(name), "field_step%06d.ckpt", step + 1);
      save_field((fs::path(out_dir) / name).string(), f);
    }
  }

  if (!out_dir.empty()) {
    save_field((fs::path(out_dir) / "field.ckpt").string(), f);
    write_train_log((fs::path(out_dir) / "train_log.csv").string(), result.log, cfg.seed);
  }
  return result;
}

}  // namespace latitude
