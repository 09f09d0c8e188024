#include "latitude/regressor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "latitude/adam.hpp"

namespace latitude {

namespace {

using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatF> weight_view(const VecXT<float>& p, const detail::LayerSpec& l) {
  return {p.data() + l.w_off, l.rows, l.cols};
}
Eigen::Map<RowMatF> weight_view(VecXT<float>& p, const detail::LayerSpec& l) {
  return {p.data() + l.w_off, l.rows, l.cols};
}
Eigen::Map<const VecXT<float>> bias_view(const VecXT<float>& p, const detail::LayerSpec& l) {
  return {p.data() + l.b_off, l.rows};
}
Eigen::Map<VecXT<float>> bias_view(VecXT<float>& p, const detail::LayerSpec& l) {
  return {p.data() + l.b_off, l.rows};
}

constexpr int kKernel = 3, kStride = 2, kPad = 1;

int conv_out(int in) { return (in + 2 * kPad - kKernel) / kStride + 1; }

// Planar channel-major image tensor (ch x h x w flattened row-major per channel).
struct Tensor {
  int ch = 0, h = 0, w = 0;
  VecXT<float> data;
  float at(int c, int y, int x) const {
    return data[(static_cast<Eigen::Index>(c) * h + y) * w + x];
  }
};

Tensor to_tensor(const Image& img) {
  Tensor t;
  t.ch = 3;
  t.h = img.height;
  t.w = img.width;
  t.data.resize(static_cast<Eigen::Index>(3) * img.height * img.width);
  Eigen::Index at = 0;
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) t.data[at++] = img.at(x, y, c);
    }
  }
  return t;
}

// im2col for 3x3 stride-2 pad-1: output (ch*9) x (oh*ow).
void im2col(const Tensor& in, MatXT<float>& cols) {
  const int oh = conv_out(in.h), ow = conv_out(in.w);
  cols.setZero(static_cast<Eigen::Index>(in.ch) * 9, static_cast<Eigen::Index>(oh) * ow);
  for (int c = 0; c < in.ch; ++c) {
    for (int ky = 0; ky < kKernel; ++ky) {
      for (int kx = 0; kx < kKernel; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * kKernel + ky) * kKernel + kx;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * kStride + ky - kPad;
          if (iy < 0 || iy >= in.h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * kStride + kx - kPad;
            if (ix < 0 || ix >= in.w) continue;
            cols(row, static_cast<Eigen::Index>(oy) * ow + ox) = in.at(c, iy, ix);
          }
        }
      }
    }
  }
}

// Transpose of im2col: scatters column gradients back onto the input tensor.
void col2im(const MatXT<float>& cols, Tensor& out) {
  const int oh = conv_out(out.h), ow = conv_out(out.w);
  out.data.setZero();
  for (int c = 0; c < out.ch; ++c) {
    for (int ky = 0; ky < kKernel; ++ky) {
      for (int kx = 0; kx < kKernel; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(c) * kKernel + ky) * kKernel + kx;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * kStride + ky - kPad;
          if (iy < 0 || iy >= out.h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * kStride + kx - kPad;
            if (ix < 0 || ix >= out.w) continue;
            out.data[(static_cast<Eigen::Index>(c) * out.h + iy) * out.w + ix] +=
                cols(row, static_cast<Eigen::Index>(oy) * ow + ox);
          }
        }
      }
    }
  }
}

}  // namespace

RegressorNet::RegressorNet(const RegressorConfig& cfg) : cfg_(cfg) {
  if (cfg.conv_widths.empty() || cfg.fc_widths.empty()) {
    throw DomainError("regressor needs at least one conv and one fc layer");
  }
  std::size_t at = 0;
  auto add = [&at](int rows, int cols) {
    detail::LayerSpec l;
    l.rows = rows;
    l.cols = cols;
    l.w_off = at;
    l.b_off = at + static_cast<std::size_t>(rows) * cols;
    at = l.end();
    return l;
  };
  int ch = 3, h = cfg.input_height, w = cfg.input_width;
  for (int width : cfg.conv_widths) {
    conv_.push_back(add(width, ch * 9));
    ch = width;
    h = conv_out(h);
    w = conv_out(w);
  }
  flat_dim_ = ch * h * w;
  int in = flat_dim_;
  for (int width : cfg.fc_widths) {
    fc_.push_back(add(width, in));
    in = width;
  }
  head_ = add(7, in);
  params_ = VecXT<float>::Zero(static_cast<Eigen::Index>(at));
}

void RegressorNet::init(Rng& rng) {
  params_.setZero();
  auto he_uniform = [&](const detail::LayerSpec& l) {
    auto w = weight_view(params_, l);
    const double limit = std::sqrt(6.0 / l.cols);
    for (int r = 0; r < l.rows; ++r) {
      for (int c = 0; c < l.cols; ++c) w(r, c) = static_cast<float>(rng.uniform(-limit, limit));
    }
  };
  for (const auto& l : conv_) he_uniform(l);
  for (const auto& l : fc_) he_uniform(l);
  he_uniform(head_);
  // Identity-ish starting pose: zero the head bias except qw = 1 so early
  // predictions are valid quaternions near identity.
  bias_view(params_, head_).setZero();
  params_[head_.b_off + 3] = 1.0f;
}

namespace {

struct ForwardCache {
  std::vector<Tensor> conv_in;          // input tensor of each conv layer
  std::vector<MatXT<float>> conv_cols;  // im2col matrices
  std::vector<MatXT<float>> conv_out;   // post-relu activations (ch x oh*ow)
  std::vector<VecXT<float>> fc_out;     // post-relu fc activations
  VecXT<float> flat;
};

}  // namespace

MatXT<float> RegressorNet::forward(const std::vector<const Image*>& batch) const {
  VecXT<float> dummy;
  return forward_backward_fn(batch, nullptr, dummy);
}

MatXT<float> RegressorNet::forward_backward(const std::vector<const Image*>& batch,
                                            const MatXT<float>& d_head,
                                            VecXT<float>& param_grads) const {
  if (d_head.rows() != 7 || d_head.cols() != static_cast<Eigen::Index>(batch.size())) {
    throw DimensionError("regressor upstream gradient must be 7 x batch");
  }
  return forward_backward_fn(
      batch, [&d_head](int b, const VecXT<float>&) { return VecXT<float>(d_head.col(b)); },
      param_grads);
}

MatXT<float> RegressorNet::forward_backward_fn(
    const std::vector<const Image*>& batch,
    const std::function<VecXT<float>(int, const VecXT<float>&)>& upstream,
    VecXT<float>& param_grads) const {
  const int B = static_cast<int>(batch.size());
  const bool want_back = static_cast<bool>(upstream);
  if (want_back) param_grads = VecXT<float>::Zero(params_.size());
  MatXT<float> heads(7, B);

  for (int b = 0; b < B; ++b) {
    const Image* img = batch[b];
    Image resized;
    if (img->width != cfg_.input_width || img->height != cfg_.input_height) {
      resized = resize_bilinear(*img, cfg_.input_width, cfg_.input_height);
      img = &resized;
    }

    ForwardCache cache;
    Tensor t = to_tensor(*img);
    for (std::size_t i = 0; i < conv_.size(); ++i) {
      cache.conv_in.push_back(t);
      MatXT<float> cols;
      im2col(t, cols);
      auto w = weight_view(params_, conv_[i]);
      MatXT<float> out = w * cols;
      out.colwise() += bias_view(params_, conv_[i]);
      out = out.cwiseMax(0.0f);
      cache.conv_cols.push_back(std::move(cols));
      cache.conv_out.push_back(out);
      Tensor next;
      next.ch = conv_[i].rows;
      next.h = conv_out(t.h);
      next.w = conv_out(t.w);
      next.data.resize(out.size());
      // out is (ch x positions), column-major; the tensor wants channel-major planes.
      for (int c = 0; c < next.ch; ++c) {
        for (Eigen::Index p = 0; p < out.cols(); ++p) {
          next.data[static_cast<Eigen::Index>(c) * out.cols() + p] = out(c, p);
        }
      }
      t = std::move(next);
    }
    cache.flat = t.data;

    VecXT<float> h = cache.flat;
    for (std::size_t i = 0; i < fc_.size(); ++i) {
      auto w = weight_view(params_, fc_[i]);
      VecXT<float> z = w * h + bias_view(params_, fc_[i]);
      h = z.cwiseMax(0.0f);
      cache.fc_out.push_back(h);
    }
    {
      auto w = weight_view(params_, head_);
      heads.col(b) = w * h + bias_view(params_, head_);
    }

    if (!want_back) continue;

    // Reverse pass for this image, accumulating into param_grads.
    VecXT<float> dh;
    {
      const VecXT<float> up = upstream(b, heads.col(b));
      weight_view(param_grads, head_).noalias() +=
          up * cache.fc_out.back().transpose();
      bias_view(param_grads, head_) += up;
      dh = weight_view(params_, head_).transpose() * up;
    }
    for (int i = static_cast<int>(fc_.size()) - 1; i >= 0; --i) {
      dh.array() *= (cache.fc_out[i].array() > 0.0f).cast<float>();
      const VecXT<float>& in = (i == 0) ? cache.flat : cache.fc_out[i - 1];
      weight_view(param_grads, fc_[i]).noalias() += dh * in.transpose();
      bias_view(param_grads, fc_[i]) += dh;
      dh = weight_view(params_, fc_[i]).transpose() * dh;
    }

    // dh is now the gradient at the flattened last conv output (channel-major).
    for (int i = static_cast<int>(conv_.size()) - 1; i >= 0; --i) {
      const Eigen::Index positions = cache.conv_out[i].cols();
      MatXT<float> dout(conv_[i].rows, positions);
      for (int c = 0; c < conv_[i].rows; ++c) {
        for (Eigen::Index p = 0; p < positions; ++p) {
          dout(c, p) = dh[static_cast<Eigen::Index>(c) * positions + p];
        }
      }
      dout.array() *= (cache.conv_out[i].array() > 0.0f).cast<float>();
      weight_view(param_grads, conv_[i]).noalias() += dout * cache.conv_cols[i].transpose();
      bias_view(param_grads, conv_[i]) += dout.rowwise().sum();
      if (i > 0) {
        const MatXT<float> dcols = weight_view(params_, conv_[i]).transpose() * dout;
        Tensor din = cache.conv_in[i];  // shape reuse
        col2im(dcols, din);
        dh = din.data;
      }
    }
  }
  return heads;
}

Pose head_to_pose(const VecXT<float>& head) {
  if (head.size() != 7) throw DimensionError("pose head must have 7 values");
  Quat q(head[3], head[4], head[5], head[6]);
  return Pose(q, Vec3(head[0], head[1], head[2]));
}

double apr_loss(const VecXT<float>& pred_head, const Pose& target, double gamma) {
  if (pred_head.size() != 7) throw DimensionError("pose head must have 7 values");
  const Vec3 dx = Vec3(pred_head[0], pred_head[1], pred_head[2]) - target.translation();
  const Quat tq = target.rotation().normalized();
  Vec4 dq(pred_head[3] - tq.w(), pred_head[4] - tq.x(), pred_head[5] - tq.y(),
          pred_head[6] - tq.z());
  return dx.norm() + gamma * dq.norm();
}

VecXT<float> apr_loss_grad(const VecXT<float>& pred_head, const Pose& target, double gamma) {
  const Vec3 dx = Vec3(pred_head[0], pred_head[1], pred_head[2]) - target.translation();
  const Quat tq = target.rotation().normalized();
  Vec4 dq(pred_head[3] - tq.w(), pred_head[4] - tq.x(), pred_head[5] - tq.y(),
          pred_head[6] - tq.z());
  VecXT<float> g = VecXT<float>::Zero(7);
  const double nx = dx.norm();
  if (nx > 1e-12) {
    g[0] = static_cast<float>(dx.x() / nx);
    g[1] = static_cast<float>(dx.y() / nx);
    g[2] = static_cast<float>(dx.z() / nx);
  }
  const double nq = dq.norm();
  if (nq > 1e-12) {
    for (int i = 0; i < 4; ++i) g[3 + i] = static_cast<float>(gamma * dq[i] / nq);
  }
  return g;
}

std::vector<Pose> sample_virtual_poses(const std::vector<Pose>& anchors, const AugmentConfig& cfg,
                                       Rng& rng) {
  if (anchors.empty()) throw DomainError("sample_virtual_poses needs anchors");
  std::vector<Pose> out;
  out.reserve(anchors.size() * cfg.samples_per_anchor);
  for (const Pose& anchor : anchors) {
    for (int s = 0; s < cfg.samples_per_anchor; ++s) {
      Vec3 t = anchor.translation();
      t.x() += rng.uniform(-0.5 * cfg.rect_w, 0.5 * cfg.rect_w);
      t.y() += rng.uniform(-0.5 * cfg.rect_h, 0.5 * cfg.rect_h);
      Quat q = anchor.rotation();
      const double ax = rng.uniform(-cfg.theta_max, cfg.theta_max);
      const double ay = rng.uniform(-cfg.theta_max, cfg.theta_max);
      const double az = rng.uniform(-cfg.theta_max, cfg.theta_max);
      q = q * Eigen::AngleAxisd(ax, Vec3::UnitX()) * Eigen::AngleAxisd(ay, Vec3::UnitY()) *
          Eigen::AngleAxisd(az, Vec3::UnitZ());
      out.push_back(Pose(q, t).canonicalized());
    }
  }
  return out;
}

VecXT<float> interpolate_embedding(const MatXT<float>& table_columns, Rng& rng) {
  const Eigen::Index n = table_columns.cols();
  if (n < 2) throw DomainError("interpolate_embedding needs at least two embeddings");
  const Eigen::Index i = static_cast<Eigen::Index>(rng.uniform_index(n));
  Eigen::Index j = static_cast<Eigen::Index>(rng.uniform_index(n - 1));
  if (j >= i) ++j;
  const float lambda = static_cast<float>(rng.uniform());
  return lambda * table_columns.col(i) + (1.0f - lambda) * table_columns.col(j);
}

RegressorTrainResult train_regressor(const Dataset& dataset, const std::vector<Image>& images,
                                     const PartitionedField<float>& field,
                                     const RegressorConfig& net_cfg,
                                     const RegressorTrainConfig& cfg,
                                     const std::function<void(int, double)>& on_epoch) {
  const std::vector<int> train_idx = dataset.split_indices("train");
  if (train_idx.empty()) throw DomainError("train_regressor: dataset has no train split");

  RegressorTrainResult result;
  result.net = RegressorNet(net_cfg);
  {
    Rng init_rng(cfg.seed, "regressor.init");
    result.net.init(init_rng);
  }
  Rng batch_rng(cfg.seed, "regressor.batches");
  // Synthetic-set draws come from their own streams so that disabling the
  // augmentation (or zeroing beta) leaves the real-batch sequence untouched.
  Rng syn_rng(cfg.seed, "regressor.syn_batches");
  Rng aug_rng(cfg.seed, "regressor.augment");

  // Appearance table columns for embedding interpolation.
  MatXT<float> table(field.config().d_app, field.n_images());
  for (int i = 0; i < field.n_images(); ++i) table.col(i) = field.embedding(i);

  RenderOptions render_opts;
  render_opts.samples_per_ray = cfg.aug.render_samples_per_ray;
  render_opts.near = dataset.near;
  render_opts.far = dataset.far;
  render_opts.background = dataset.background;
  render_opts.deterministic = true;

  std::vector<Image> virtual_images;
  std::vector<Pose> virtual_poses;

  Adam<float> adam(result.net.params().size());
  const int steps_per_epoch =
      std::max<int>(1, static_cast<int>(train_idx.size()) / cfg.batch_size);
  const int64_t total_steps = static_cast<int64_t>(cfg.epochs) * steps_per_epoch;
  int64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.augment &&
        std::find(cfg.aug.render_epochs.begin(), cfg.aug.render_epochs.end(), epoch) !=
            cfg.aug.render_epochs.end()) {
      // Regenerate the virtual set; the previous one is dropped first so the
      // peak count never exceeds one regeneration batch.
      virtual_images.clear();
      virtual_poses.clear();
      std::vector<Pose> anchors;
      for (std::size_t i = 0; i < train_idx.size(); i += std::max(1, cfg.aug.anchor_stride)) {
        anchors.push_back(dataset.frames[train_idx[i]].pose);
      }
      virtual_poses = sample_virtual_poses(anchors, cfg.aug, aug_rng);
      const VecX omega = VecX::Ones(field.config().l_pos);
      for (const Pose& pose : virtual_poses) {
        const VecXT<float> emb = interpolate_embedding(table, aug_rng);
        virtual_images.push_back(
            render_image(field, pose, dataset.intrinsics, emb, omega, render_opts));
      }
      result.virtual_images_rendered += static_cast<int>(virtual_images.size());
    }

    std::vector<int> order = train_idx;
    batch_rng.shuffle(order);

    double epoch_loss = 0.0;
    int epoch_terms = 0;
    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      const double lr = exp_decay_lr(cfg.lr_start, cfg.lr_end, step, total_steps);

      std::vector<const Image*> real_batch;
      std::vector<const Pose*> real_targets;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const int frame = order[(s * cfg.batch_size + b) % order.size()];
        real_batch.push_back(&images[frame]);
        real_targets.push_back(&dataset.frames[frame].pose);
      }

      std::vector<const Image*> syn_batch;
      std::vector<const Pose*> syn_targets;
      if (cfg.augment && !virtual_images.empty()) {
        for (int b = 0; b < cfg.batch_size; ++b) {
          const int vi = static_cast<int>(syn_rng.uniform_index(virtual_images.size()));
          syn_batch.push_back(&virtual_images[vi]);
          syn_targets.push_back(&virtual_poses[vi]);
        }
      }

      auto run = [&](const std::vector<const Image*>& batch,
                     const std::vector<const Pose*>& targets, VecXT<float>& grads) -> double {
        double loss = 0.0;
        const float inv_n = 1.0f / static_cast<float>(batch.size());
        result.net.forward_backward_fn(
            batch,
            [&](int b, const VecXT<float>& head) {
              loss += apr_loss(head, *targets[b], cfg.gamma);
              return VecXT<float>(apr_loss_grad(head, *targets[b], cfg.gamma) * inv_n);
            },
            grads);
        return loss / static_cast<double>(batch.size());
      };

      VecXT<float> grads;
      const double real_loss = run(real_batch, real_targets, grads);
      double combined = real_loss;
      if (!syn_batch.empty()) {
        VecXT<float> syn_grads;
        const double syn_loss = run(syn_batch, syn_targets, syn_grads);
        grads += static_cast<float>(cfg.beta) * syn_grads;
        combined += cfg.beta * syn_loss;
      }
      adam.step(result.net.params(), grads, lr);
      epoch_loss += combined;
      ++epoch_terms;
    }
    result.epoch_loss.push_back(epoch_loss / std::max(1, epoch_terms));
    if (on_epoch) on_epoch(epoch, result.epoch_loss.back());
  }
  return result;
}

Pose predict_pose(const Image& image, const RegressorNet& net) {
  const MatXT<float> head = net.forward({&image});
  return head_to_pose(head.col(0));
}

// ---------------------------------------------------------------------------
// Checkpoint IO (same manifest + flat float32 scheme as field checkpoints)
// ---------------------------------------------------------------------------

void save_regressor(const std::string& path, const RegressorNet& net) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  const RegressorConfig& cfg = net.config();
  out << "latitude_regressor_v1\n";
  out << "conv";
  for (int w : cfg.conv_widths) out << ' ' << w;
  out << "\nfc";
  for (int w : cfg.fc_widths) out << ' ' << w;
  out << "\ninput " << cfg.input_width << ' ' << cfg.input_height << "\nparams "
      << net.params().size() << "\ndata\n";
  out.write(reinterpret_cast<const char*>(net.params().data()),
            static_cast<std::streamsize>(net.params().size() * sizeof(float)));
  if (!out) throw IoError("write failed: " + path);
}

RegressorNet load_regressor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "latitude_regressor_v1") {
    throw ParseError("not a regressor checkpoint: " + path, 1);
  }
  RegressorConfig cfg;
  cfg.conv_widths.clear();
  cfg.fc_widths.clear();
  long long n_params = -1;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line == "data") break;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "conv") {
      int w;
      while (ss >> w) cfg.conv_widths.push_back(w);
    } else if (key == "fc") {
      int w;
      while (ss >> w) cfg.fc_widths.push_back(w);
    } else if (key == "input") {
      ss >> cfg.input_width >> cfg.input_height;
      if (ss.fail()) throw ParseError("malformed checkpoint line", line_no);
    } else if (key == "params") {
      ss >> n_params;
      if (ss.fail()) throw ParseError("malformed checkpoint line", line_no);
    } else {
      throw ParseError("unknown checkpoint key: " + key, line_no);
    }
  }
  RegressorNet net{cfg};
  if (static_cast<long long>(net.params().size()) != n_params) {
    throw ParseError("checkpoint parameter count does not match its architecture");
  }
  in.read(reinterpret_cast<char*>(net.params().data()),
          static_cast<std::streamsize>(n_params * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(n_params * sizeof(float))) {
    throw ParseError("truncated checkpoint data: " + path);
  }
  return net;
}

}  // namespace latitude
