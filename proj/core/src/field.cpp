#include "latitude/field.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace latitude {

namespace {

constexpr std::size_t kBlock = 4096;  // samples per work block

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
Eigen::Map<const RowMat<S>> weight_view(const VecXT<S>& p, const detail::LayerSpec& l) {
  return {p.data() + l.w_off, l.rows, l.cols};
}
template <typename S>
Eigen::Map<RowMat<S>> weight_view(VecXT<S>& p, const detail::LayerSpec& l) {
  return {p.data() + l.w_off, l.rows, l.cols};
}
template <typename S>
Eigen::Map<const VecXT<S>> bias_view(const VecXT<S>& p, const detail::LayerSpec& l) {
  return {p.data() + l.b_off, l.rows};
}
template <typename S>
Eigen::Map<VecXT<S>> bias_view(VecXT<S>& p, const detail::LayerSpec& l) {
  return {p.data() + l.b_off, l.rows};
}

template <typename S>
S softplus(S z) {
  return z > S(20) ? z : S(std::log1p(std::exp(z)));
}
template <typename S>
S sigmoid(S z) {
  if (z >= S(0)) {
    const S e = S(std::exp(-z));
    return S(1) / (S(1) + e);
  }
  const S e = S(std::exp(z));
  return e / (S(1) + e);
}

template <typename S>
void relu_inplace(MatXT<S>& m) {
  m = m.cwiseMax(S(0));
}

template <typename S>
void encode_block(const MatXT<S>& raw, int bands, const VecXT<S>& omega, bool include_raw,
                  MatXT<S>& trig_cos, MatXT<S>& trig_sin, MatXT<S>& feat) {
  const Eigen::Index n = raw.cols();
  trig_cos.resize(3 * bands, n);
  trig_sin.resize(3 * bands, n);
  feat.resize(3 * (2 * bands + (include_raw ? 1 : 0)), n);
  Eigen::Index at = 0;
  if (include_raw) {
    feat.topRows(3) = raw;
    at = 3;
  }
  for (int k = 0; k < bands; ++k) {
    const S freq = static_cast<S>(std::ldexp(kPi, k));
    trig_cos.middleRows(3 * k, 3) = (raw.array() * freq).cos().matrix();
    trig_sin.middleRows(3 * k, 3) = (raw.array() * freq).sin().matrix();
    const S w = omega[k];
    feat.middleRows(at, 3) = w * trig_cos.middleRows(3 * k, 3);
    feat.middleRows(at + 3, 3) = w * trig_sin.middleRows(3 * k, 3);
    at += 6;
  }
}

// d(loss)/d(raw input) from the feature gradient of one encoding. Masked
// bands (omega_k = 0) contribute nothing, matching the forward mask.
template <typename S>
void encode_backward_block(const MatXT<S>& d_feat, int bands, const VecXT<S>& omega,
                           bool include_raw, const MatXT<S>& trig_cos, const MatXT<S>& trig_sin,
                           MatXT<S>& d_raw) {
  const Eigen::Index n = d_feat.cols();
  Eigen::Index at = 0;
  if (include_raw) {
    d_raw = d_feat.topRows(3);
    at = 3;
  } else {
    d_raw = MatXT<S>::Zero(3, n);
  }
  for (int k = 0; k < bands; ++k) {
    const S freq = static_cast<S>(std::ldexp(kPi, k));
    const S w = omega[k] * freq;
    d_raw.array() -= w * (d_feat.middleRows(at, 3).array() * trig_sin.middleRows(3 * k, 3).array());
    d_raw.array() +=
        w * (d_feat.middleRows(at + 3, 3).array() * trig_cos.middleRows(3 * k, 3).array());
    at += 6;
  }
}

}  // namespace

namespace detail {

CellLayout make_cell_layout(const FieldConfig& cfg, std::size_t base) {
  CellLayout layout;
  std::size_t at = base;
  auto add = [&at](int rows, int cols) {
    LayerSpec l;
    l.rows = rows;
    l.cols = cols;
    l.w_off = at;
    l.b_off = at + static_cast<std::size_t>(rows) * cols;
    at = l.end();
    return l;
  };
  for (int i = 0; i < cfg.depth; ++i) {
    const int in = (i == 0) ? cfg.pos_feat_dim()
                            : cfg.width + (i == cfg.skip_layer() ? cfg.pos_feat_dim() : 0);
    layout.trunk.push_back(add(cfg.width, in));
  }
  layout.sigma_head = add(1, cfg.width);
  layout.color_hidden = add(cfg.color_width, cfg.color_in_dim());
  layout.color_out = add(3, cfg.color_width);
  layout.param_count = at - base;
  return layout;
}

}  // namespace detail

std::size_t cell_param_count(const FieldConfig& cfg) {
  return detail::make_cell_layout(cfg, 0).param_count;
}

std::size_t total_param_count(const FieldConfig& cfg, int n_images) {
  return cell_param_count(cfg) * cfg.num_cells() + static_cast<std::size_t>(cfg.d_app) * n_images;
}

SceneBounds SceneBounds::from_min_max(const Vec3& lo, const Vec3& hi, double margin) {
  SceneBounds b;
  b.center = 0.5 * (lo + hi);
  b.half = (0.5 * (hi - lo) * margin).cwiseMax(1e-9);
  return b;
}

template <typename S>
PartitionedField<S>::PartitionedField(const FieldConfig& cfg, const SceneBounds& bounds,
                                      int n_images)
    : cfg_(cfg), bounds_(bounds), n_images_(n_images) {
  if (cfg.depth < 2 || cfg.width < 1 || cfg.color_width < 1 || cfg.l_pos < 1 || cfg.l_dir < 1 ||
      cfg.l_dir > cfg.l_pos || cfg.d_app < 1 || cfg.grid_x < 1 || cfg.grid_y < 1) {
    throw DomainError("invalid field configuration");
  }
  if (n_images < 1) throw DomainError("field needs at least one appearance slot");

  for (int gy = 0; gy < cfg.grid_y; ++gy) {
    for (int gx = 0; gx < cfg.grid_x; ++gx) {
      const double fx = (gx + 0.5) / cfg.grid_x * 2.0 - 1.0;
      const double fy = (gy + 0.5) / cfg.grid_y * 2.0 - 1.0;
      centroids_.emplace_back(bounds.center.x() + fx * bounds.half.x(),
                              bounds.center.y() + fy * bounds.half.y());
    }
  }

  std::size_t at = 0;
  for (int c = 0; c < cfg.num_cells(); ++c) {
    layouts_.push_back(detail::make_cell_layout(cfg, at));
    at += layouts_.back().param_count;
  }
  appearance_off_ = at;
  params_ = VecXT<S>::Zero(static_cast<Eigen::Index>(at + std::size_t(cfg.d_app) * n_images));
}

template <typename S>
void PartitionedField<S>::set_centroids(const std::vector<Vec2>& c) {
  if (static_cast<int>(c.size()) != cfg_.num_cells()) {
    throw DimensionError("centroid count must match the partition layout");
  }
  centroids_ = c;
}

template <typename S>
Eigen::Map<const VecXT<S>> PartitionedField<S>::embedding(int image) const {
  if (image < 0 || image >= n_images_) throw DomainError("appearance index out of range");
  return {params_.data() + appearance_off_ + std::size_t(image) * cfg_.d_app, cfg_.d_app};
}

template <typename S>
VecXT<S> PartitionedField<S>::mean_embedding() const {
  VecXT<S> m = VecXT<S>::Zero(cfg_.d_app);
  for (int i = 0; i < n_images_; ++i) m += embedding(i);
  return m / S(n_images_);
}

template <typename S>
void PartitionedField<S>::init(Rng& rng) {
  params_.setZero();
  auto he_uniform = [&](const detail::LayerSpec& l) {
    auto w = weight_view(params_, l);
    const double limit = std::sqrt(6.0 / l.cols);
    for (int r = 0; r < l.rows; ++r) {
      for (int c = 0; c < l.cols; ++c) w(r, c) = static_cast<S>(rng.uniform(-limit, limit));
    }
  };
  for (const auto& layout : layouts_) {
    for (const auto& l : layout.trunk) he_uniform(l);
    he_uniform(layout.color_hidden);
    // sigma_head and color_out stay zero: an untrained field returns
    // c = sigmoid(0) = 0.5 and sigma = softplus(0).
  }
  for (int i = 0; i < n_images_; ++i) {
    for (int k = 0; k < cfg_.d_app; ++k) {
      params_[appearance_off_ + std::size_t(i) * cfg_.d_app + k] =
          static_cast<S>(0.01 * rng.normal());
    }
  }
}

template <typename S>
int PartitionedField<S>::route(const Vec3& x) const {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int i = 0; i < static_cast<int>(centroids_.size()); ++i) {
    const double dx = x.x() - centroids_[i].x();
    const double dy = x.y() - centroids_[i].y();
    const double d = dx * dx + dy * dy;
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Batched evaluation
// ---------------------------------------------------------------------------

template <typename S>
struct PartitionedField<S>::BlockScratch {
  MatXT<S> xn;
  MatXT<S> pos_cos, pos_sin, dir_cos, dir_sin;
  MatXT<S> pos_feat, dir_feat;
  std::vector<MatXT<S>> hidden;
  VecXT<S> sigma_pre;
  MatXT<S> color_hidden;
  MatXT<S> color_pre;
  MatXT<S> emb;
  VecXT<S> omega_pos_cache, omega_dir_cache;
};

template <typename S>
void PartitionedField<S>::forward_cell_block(int cell, const MatXT<S>& x, const MatXT<S>& d,
                                             const MatXT<S>& emb, const VecXT<S>& omega_pos,
                                             const VecXT<S>& omega_dir, std::size_t col_begin,
                                             std::size_t col_end, BlockScratch& scratch,
                                             MatXT<S>& color_out, VecXT<S>& sigma_out) const {
  const Eigen::Index n = static_cast<Eigen::Index>(col_end - col_begin);
  const Eigen::Index b0 = static_cast<Eigen::Index>(col_begin);
  const auto& layout = layouts_[cell];
  const Vec3T<S> center = bounds_.center.template cast<S>();
  const Vec3T<S> inv_half = bounds_.half.cwiseInverse().template cast<S>();

  scratch.xn = x.middleCols(b0, n).colwise() - center;
  scratch.xn.array().colwise() *= inv_half.array();
  encode_block(scratch.xn, cfg_.l_pos, omega_pos, cfg_.include_raw, scratch.pos_cos,
               scratch.pos_sin, scratch.pos_feat);
  const MatXT<S> dir_block = d.middleCols(b0, n);
  encode_block(dir_block, cfg_.l_dir, omega_dir, cfg_.include_raw, scratch.dir_cos,
               scratch.dir_sin, scratch.dir_feat);
  scratch.emb = emb.middleCols(b0, n);

  scratch.hidden.assign(cfg_.depth, MatXT<S>());
  const int skip = cfg_.skip_layer();
  for (int i = 0; i < cfg_.depth; ++i) {
    const auto& l = layout.trunk[i];
    auto w = weight_view(params_, l);
    MatXT<S>& h = scratch.hidden[i];
    if (i == 0) {
      h.noalias() = w * scratch.pos_feat;
    } else if (i == skip) {
      h.noalias() = w.leftCols(cfg_.width) * scratch.hidden[i - 1];
      h.noalias() += w.rightCols(cfg_.pos_feat_dim()) * scratch.pos_feat;
    } else {
      h.noalias() = w * scratch.hidden[i - 1];
    }
    h.colwise() += bias_view(params_, l);
    relu_inplace(h);
  }

  const MatXT<S>& bottleneck = scratch.hidden[cfg_.depth - 1];
  {
    auto w = weight_view(params_, layout.sigma_head);
    scratch.sigma_pre = (w * bottleneck).row(0).transpose();
    scratch.sigma_pre.array() += bias_view(params_, layout.sigma_head)[0];
  }
  {
    const auto& l = layout.color_hidden;
    auto w = weight_view(params_, l);
    MatXT<S>& g = scratch.color_hidden;
    g.noalias() = w.leftCols(cfg_.width) * bottleneck;
    g.noalias() += w.middleCols(cfg_.width, cfg_.dir_feat_dim()) * scratch.dir_feat;
    g.noalias() += w.rightCols(cfg_.d_app) * scratch.emb;
    g.colwise() += bias_view(params_, l);
    relu_inplace(g);
  }
  {
    const auto& l = layout.color_out;
    auto w = weight_view(params_, l);
    scratch.color_pre.noalias() = w * scratch.color_hidden;
    scratch.color_pre.colwise() += bias_view(params_, l);
  }

  for (Eigen::Index j = 0; j < n; ++j) {
    sigma_out[b0 + j] = cfg_.density_activation == FieldConfig::DensityActivation::kSoftplus
                            ? softplus(scratch.sigma_pre[j])
                            : std::max(scratch.sigma_pre[j], S(0));
    for (int c = 0; c < 3; ++c) color_out(c, b0 + j) = sigmoid(scratch.color_pre(c, j));
  }
}

template <typename S>
void PartitionedField<S>::backward_cell_block(int cell, const MatXT<S>& d_color,
                                              const VecXT<S>& d_sigma, const GradRequest& req,
                                              BlockScratch& scratch, VecXT<S>* param_grads,
                                              MatXT<S>* d_pos, MatXT<S>* d_dir,
                                              MatXT<S>* d_emb) const {
  // d_color/d_sigma and the outputs are block-local (n columns); the caller
  // scatters them back to batch order.
  const Eigen::Index n = d_color.cols();
  const auto& layout = layouts_[cell];

  MatXT<S> d_color_pre(3, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (int c = 0; c < 3; ++c) {
      const S s = sigmoid(scratch.color_pre(c, j));
      d_color_pre(c, j) = d_color(c, j) * s * (S(1) - s);
    }
  }
  VecXT<S> d_sigma_pre(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const S z = scratch.sigma_pre[j];
    const S g = cfg_.density_activation == FieldConfig::DensityActivation::kSoftplus
                    ? sigmoid(z)
                    : (z > S(0) ? S(1) : S(0));
    d_sigma_pre[j] = d_sigma[j] * g;
  }

  const MatXT<S>& bottleneck = scratch.hidden[cfg_.depth - 1];

  MatXT<S> d_ch;
  {
    const auto& l = layout.color_out;
    auto w = weight_view(params_, l);
    if (param_grads) {
      weight_view(*param_grads, l).noalias() += d_color_pre * scratch.color_hidden.transpose();
      bias_view(*param_grads, l) += d_color_pre.rowwise().sum();
    }
    d_ch.noalias() = w.transpose() * d_color_pre;
  }
  d_ch.array() *= (scratch.color_hidden.array() > S(0)).template cast<S>();

  MatXT<S> d_bottleneck;
  {
    const auto& l = layout.color_hidden;
    auto w = weight_view(params_, l);
    if (param_grads) {
      auto gw = weight_view(*param_grads, l);
      gw.leftCols(cfg_.width).noalias() += d_ch * bottleneck.transpose();
      gw.middleCols(cfg_.width, cfg_.dir_feat_dim()).noalias() +=
          d_ch * scratch.dir_feat.transpose();
      gw.rightCols(cfg_.d_app).noalias() += d_ch * scratch.emb.transpose();
      bias_view(*param_grads, l) += d_ch.rowwise().sum();
    }
    d_bottleneck.noalias() = w.leftCols(cfg_.width).transpose() * d_ch;
    if (d_dir) {
      const MatXT<S> d_dir_feat = w.middleCols(cfg_.width, cfg_.dir_feat_dim()).transpose() * d_ch;
      encode_backward_block(d_dir_feat, cfg_.l_dir, scratch.omega_dir_cache, cfg_.include_raw,
                            scratch.dir_cos, scratch.dir_sin, *d_dir);
    }
    if (d_emb) d_emb->noalias() = w.rightCols(cfg_.d_app).transpose() * d_ch;
  }

  {
    const auto& l = layout.sigma_head;
    auto w = weight_view(params_, l);
    if (param_grads) {
      weight_view(*param_grads, l).noalias() += d_sigma_pre.transpose() * bottleneck.transpose();
      bias_view(*param_grads, l)[0] += d_sigma_pre.sum();
    }
    d_bottleneck.noalias() += w.transpose() * d_sigma_pre.transpose();
  }

  if (!param_grads && !d_pos) return;

  const int skip = cfg_.skip_layer();
  MatXT<S> d_pos_feat = MatXT<S>::Zero(cfg_.pos_feat_dim(), n);
  MatXT<S> d_h = std::move(d_bottleneck);
  for (int i = cfg_.depth - 1; i >= 0; --i) {
    d_h.array() *= (scratch.hidden[i].array() > S(0)).template cast<S>();
    const auto& l = layout.trunk[i];
    auto w = weight_view(params_, l);
    if (i == 0) {
      if (param_grads) {
        weight_view(*param_grads, l).noalias() += d_h * scratch.pos_feat.transpose();
        bias_view(*param_grads, l) += d_h.rowwise().sum();
      }
      if (d_pos) d_pos_feat.noalias() += w.transpose() * d_h;
    } else if (i == skip) {
      if (param_grads) {
        auto gw = weight_view(*param_grads, l);
        gw.leftCols(cfg_.width).noalias() += d_h * scratch.hidden[i - 1].transpose();
        gw.rightCols(cfg_.pos_feat_dim()).noalias() += d_h * scratch.pos_feat.transpose();
        bias_view(*param_grads, l) += d_h.rowwise().sum();
      }
      if (d_pos) d_pos_feat.noalias() += w.rightCols(cfg_.pos_feat_dim()).transpose() * d_h;
      MatXT<S> next = w.leftCols(cfg_.width).transpose() * d_h;
      d_h = std::move(next);
    } else {
      if (param_grads) {
        weight_view(*param_grads, l).noalias() += d_h * scratch.hidden[i - 1].transpose();
        bias_view(*param_grads, l) += d_h.rowwise().sum();
      }
      MatXT<S> next = w.transpose() * d_h;
      d_h = std::move(next);
    }
  }

  if (d_pos) {
    MatXT<S> d_xn;
    encode_backward_block(d_pos_feat, cfg_.l_pos, scratch.omega_pos_cache, cfg_.include_raw,
                          scratch.pos_cos, scratch.pos_sin, d_xn);
    const Vec3T<S> inv_half = bounds_.half.cwiseInverse().template cast<S>();
    d_xn.array().colwise() *= inv_half.array();
    *d_pos = std::move(d_xn);
  }
}

template <typename S>
FieldOutputs<S> PartitionedField<S>::forward(const MatXT<S>& x, const MatXT<S>& d,
                                             const MatXT<S>& emb, const VecX& omega) const {
  FieldGradients<S> unused;
  return forward_backward(x, d, emb, omega, MatXT<S>(), VecXT<S>(), GradRequest{}, unused);
}

template <typename S>
FieldOutputs<S> PartitionedField<S>::forward_backward(const MatXT<S>& x, const MatXT<S>& d,
                                                      const MatXT<S>& emb, const VecX& omega,
                                                      const MatXT<S>& d_color,
                                                      const VecXT<S>& d_sigma,
                                                      const GradRequest& req,
                                                      FieldGradients<S>& grads) const {
  const Eigen::Index batch = x.cols();
  if (x.rows() != 3 || d.rows() != 3 || d.cols() != batch) {
    throw DimensionError("field inputs must be 3xB position/direction matrices");
  }
  if (emb.rows() != cfg_.d_app || emb.cols() != batch) {
    throw DimensionError("field embedding matrix must be d_app x B");
  }
  if (omega.size() != cfg_.l_pos) throw DimensionError("omega must have l_pos entries");
  if (!x.allFinite() || !d.allFinite() || !emb.allFinite()) {
    throw NonFiniteError("field inputs must be finite");
  }
  const bool want_back = d_color.size() > 0;
  if (want_back && (d_color.rows() != 3 || d_color.cols() != batch ||
                    d_sigma.size() != batch)) {
    throw DimensionError("upstream gradients must match the batch");
  }

  const VecXT<S> omega_pos = omega.template cast<S>();
  const VecXT<S> omega_dir = omega.head(cfg_.l_dir).template cast<S>();

  FieldOutputs<S> out;
  out.color.resize(3, batch);
  out.sigma.resize(batch);
  if (batch == 0) return out;

  // Group samples by cell, keeping batch order inside each group.
  const int cells = cfg_.num_cells();
  std::vector<Eigen::Index> order(batch);
  std::vector<Eigen::Index> cell_begin(cells + 1, 0);
  const bool multi = cells > 1;
  if (multi) {
    std::vector<int> cell_of(batch);
    std::vector<Eigen::Index> counts(cells, 0);
    for (Eigen::Index i = 0; i < batch; ++i) {
      const int c = route(Vec3(x(0, i), x(1, i), x(2, i)));
      cell_of[i] = c;
      ++counts[c];
    }
    for (int c = 0; c < cells; ++c) cell_begin[c + 1] = cell_begin[c] + counts[c];
    std::vector<Eigen::Index> fill(cell_begin.begin(), cell_begin.end() - 1);
    for (Eigen::Index i = 0; i < batch; ++i) order[fill[cell_of[i]]++] = i;
  } else {
    for (Eigen::Index i = 0; i < batch; ++i) order[i] = i;
    cell_begin[1] = batch;
  }

  MatXT<S> xg(3, batch), dg(3, batch), eg(cfg_.d_app, batch);
  for (Eigen::Index i = 0; i < batch; ++i) {
    xg.col(i) = x.col(order[i]);
    dg.col(i) = d.col(order[i]);
    eg.col(i) = emb.col(order[i]);
  }
  MatXT<S> dcg;
  VecXT<S> dsg;
  if (want_back) {
    dcg.resize(3, batch);
    dsg.resize(batch);
    for (Eigen::Index i = 0; i < batch; ++i) {
      dcg.col(i) = d_color.col(order[i]);
      dsg[i] = d_sigma[order[i]];
    }
  }

  struct Task {
    int cell;
    std::size_t begin, end;
  };
  std::vector<Task> tasks;
  for (int c = 0; c < cells; ++c) {
    const std::size_t nb =
        num_blocks(static_cast<std::size_t>(cell_begin[c + 1] - cell_begin[c]), kBlock);
    for (std::size_t b = 0; b < nb; ++b) {
      const auto r = block_range(static_cast<std::size_t>(cell_begin[c + 1] - cell_begin[c]),
                                 kBlock, b);
      tasks.push_back({c, static_cast<std::size_t>(cell_begin[c]) + r.begin,
                       static_cast<std::size_t>(cell_begin[c]) + r.end});
    }
  }

  MatXT<S> cg(3, batch);
  VecXT<S> sg(batch);
  MatXT<S> dpos_g, ddir_g, demb_g;
  if (want_back && req.position) dpos_g.resize(3, batch);
  if (want_back && req.direction) ddir_g.resize(3, batch);
  if (want_back && req.embedding) demb_g.resize(cfg_.d_app, batch);

  std::vector<VecXT<S>> block_param_grads;
  if (want_back && req.params) {
    block_param_grads.assign(tasks.size(), VecXT<S>());
  }

  parallel_blocks(tasks.size(), 1, [&](std::size_t t, std::size_t, std::size_t) {
    const Task& task = tasks[t];
    BlockScratch scratch;
    scratch.omega_pos_cache = omega_pos;
    scratch.omega_dir_cache = omega_dir;
    forward_cell_block(task.cell, xg, dg, eg, omega_pos, omega_dir, task.begin, task.end, scratch,
                       cg, sg);
    if (!want_back) return;

    const Eigen::Index n = static_cast<Eigen::Index>(task.end - task.begin);
    const MatXT<S> dcb = dcg.middleCols(task.begin, n);
    const VecXT<S> dsb = dsg.segment(task.begin, n);
    VecXT<S>* pg = nullptr;
    if (req.params) {
      block_param_grads[t] = VecXT<S>::Zero(params_.size());
      pg = &block_param_grads[t];
    }
    MatXT<S> dpos_b, ddir_b, demb_b;
    backward_cell_block(task.cell, dcb, dsb, req, scratch, pg,
                        req.position ? &dpos_b : nullptr, req.direction ? &ddir_b : nullptr,
                        req.embedding ? &demb_b : nullptr);
    if (req.position) dpos_g.middleCols(task.begin, n) = dpos_b;
    if (req.direction) ddir_g.middleCols(task.begin, n) = ddir_b;
    if (req.embedding) demb_g.middleCols(task.begin, n) = demb_b;
  });

  for (Eigen::Index i = 0; i < batch; ++i) {
    out.color.col(order[i]) = cg.col(i);
    out.sigma[order[i]] = sg[i];
  }
  if (want_back) {
    if (req.params) {
      grads.params = VecXT<S>::Zero(params_.size());
      for (const auto& g : block_param_grads) grads.params += g;
    }
    if (req.position) {
      grads.d_pos.resize(3, batch);
      for (Eigen::Index i = 0; i < batch; ++i) grads.d_pos.col(order[i]) = dpos_g.col(i);
    }
    if (req.direction) {
      grads.d_dir.resize(3, batch);
      for (Eigen::Index i = 0; i < batch; ++i) grads.d_dir.col(order[i]) = ddir_g.col(i);
    }
    if (req.embedding) {
      grads.d_emb.resize(cfg_.d_app, batch);
      for (Eigen::Index i = 0; i < batch; ++i) grads.d_emb.col(order[i]) = demb_g.col(i);
    }
  }
  return out;
}

template <typename S>
void PartitionedField<S>::eval(const Vec3& x, const Vec3& d, const VecX& emb, const VecX& omega,
                               Vec3& color, double& sigma) const {
  if (!x.allFinite() || !d.allFinite() || !emb.allFinite()) {
    throw NonFiniteError("eval requires finite inputs");
  }
  if (std::abs(d.norm() - 1.0) > 1e-6) throw DomainError("eval requires a unit direction");
  if (emb.size() != cfg_.d_app) throw DimensionError("embedding size mismatch");
  MatXT<S> xm = x.template cast<S>();
  MatXT<S> dm = d.template cast<S>();
  MatXT<S> em = emb.template cast<S>();
  const FieldOutputs<S> out = forward(xm, dm, em, omega);
  color = out.color.col(0).template cast<double>();
  sigma = static_cast<double>(out.sigma[0]);
}

template <typename S>
void PartitionedField<S>::eval_with_grad(const Vec3& x, const Vec3& d, const VecX& emb,
                                         const VecX& omega, const Vec3& upstream_color,
                                         double upstream_sigma, Vec3& color, double& sigma,
                                         FieldGradients<S>& grads) const {
  if (!x.allFinite() || !d.allFinite() || !emb.allFinite()) {
    throw NonFiniteError("eval_with_grad requires finite inputs");
  }
  if (std::abs(d.norm() - 1.0) > 1e-6) throw DomainError("eval_with_grad requires a unit direction");
  if (emb.size() != cfg_.d_app) throw DimensionError("embedding size mismatch");
  MatXT<S> xm = x.template cast<S>();
  MatXT<S> dm = d.template cast<S>();
  MatXT<S> em = emb.template cast<S>();
  MatXT<S> dc = upstream_color.template cast<S>();
  VecXT<S> ds(1);
  ds[0] = static_cast<S>(upstream_sigma);
  GradRequest req;
  req.params = req.position = req.direction = req.embedding = true;
  const FieldOutputs<S> out = forward_backward(xm, dm, em, omega, dc, ds, req, grads);
  color = out.color.col(0).template cast<double>();
  sigma = static_cast<double>(out.sigma[0]);
}

// ---------------------------------------------------------------------------
// Checkpoint IO
// ---------------------------------------------------------------------------

namespace {

std::string density_name(FieldConfig::DensityActivation a) {
  return a == FieldConfig::DensityActivation::kSoftplus ? "softplus" : "relu";
}

FieldConfig::DensityActivation density_from_name(const std::string& s) {
  if (s == "softplus") return FieldConfig::DensityActivation::kSoftplus;
  if (s == "relu") return FieldConfig::DensityActivation::kRelu;
  throw ParseError("unknown density activation: " + s);
}

}  // namespace

void save_field(const std::string& path, const PartitionedField<float>& field) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  const FieldConfig& cfg = field.config();
  char buf[256];
  out << "latitude_field_v1\n";
  out << "depth " << cfg.depth << "\nwidth " << cfg.width << "\ncolor_width " << cfg.color_width
      << "\nl_pos " << cfg.l_pos << "\nl_dir " << cfg.l_dir << "\nd_app " << cfg.d_app
      << "\ninclude_raw " << (cfg.include_raw ? 1 : 0) << "\ndensity "
      << density_name(cfg.density_activation) << "\ngrid " << cfg.grid_x << ' ' << cfg.grid_y
      << "\n";
  for (std::size_t i = 0; i < field.centroids().size(); ++i) {
    std::snprintf(buf, sizeof(buf), "centroid %zu %.17g %.17g", i, field.centroids()[i].x(),
                  field.centroids()[i].y());
    out << buf << '\n';
  }
  const SceneBounds& b = field.bounds();
  std::snprintf(buf, sizeof(buf), "center %.17g %.17g %.17g", b.center.x(), b.center.y(),
                b.center.z());
  out << buf << '\n';
  std::snprintf(buf, sizeof(buf), "half %.17g %.17g %.17g", b.half.x(), b.half.y(), b.half.z());
  out << buf << '\n';
  out << "n_images " << field.n_images() << "\nparams " << field.params().size() << "\ndata\n";
  out.write(reinterpret_cast<const char*>(field.params().data()),
            static_cast<std::streamsize>(field.params().size() * sizeof(float)));
  if (!out) throw IoError("write failed: " + path);
}

PartitionedField<float> load_field(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "latitude_field_v1") {
    throw ParseError("not a field checkpoint: " + path, 1);
  }
  FieldConfig cfg;
  SceneBounds bounds;
  std::vector<Vec2> centroids;
  int n_images = -1;
  long long n_params = -1;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line == "data") break;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "depth") ss >> cfg.depth;
    else if (key == "width") ss >> cfg.width;
    else if (key == "color_width") ss >> cfg.color_width;
    else if (key == "l_pos") ss >> cfg.l_pos;
    else if (key == "l_dir") ss >> cfg.l_dir;
    else if (key == "d_app") ss >> cfg.d_app;
    else if (key == "include_raw") { int v; ss >> v; cfg.include_raw = v != 0; }
    else if (key == "density") { std::string v; ss >> v; cfg.density_activation = density_from_name(v); }
    else if (key == "grid") ss >> cfg.grid_x >> cfg.grid_y;
    else if (key == "centroid") { std::size_t i; double cx, cy; ss >> i >> cx >> cy; centroids.emplace_back(cx, cy); }
    else if (key == "center") ss >> bounds.center.x() >> bounds.center.y() >> bounds.center.z();
    else if (key == "half") ss >> bounds.half.x() >> bounds.half.y() >> bounds.half.z();
    else if (key == "n_images") ss >> n_images;
    else if (key == "params") ss >> n_params;
    else throw ParseError("unknown checkpoint key: " + key, line_no);
    if (ss.fail()) throw ParseError("malformed checkpoint line", line_no);
  }
  if (n_images < 1 || n_params < 0) throw ParseError("incomplete checkpoint manifest: " + path);

  PartitionedField<float> field(cfg, bounds, n_images);
  if (!centroids.empty()) field.set_centroids(centroids);
  if (static_cast<long long>(field.params().size()) != n_params) {
    throw ParseError("checkpoint parameter count does not match its architecture");
  }
  in.read(reinterpret_cast<char*>(field.params().data()),
          static_cast<std::streamsize>(n_params * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(n_params * sizeof(float))) {
    throw ParseError("truncated checkpoint data: " + path);
  }
  return field;
}

PartitionedField<double> to_double(const PartitionedField<float>& f) {
  PartitionedField<double> out(f.config(), f.bounds(), f.n_images());
  out.set_centroids(f.centroids());
  out.params() = f.params().cast<double>();
  return out;
}

PartitionedField<float> to_float(const PartitionedField<double>& f) {
  PartitionedField<float> out(f.config(), f.bounds(), f.n_images());
  out.set_centroids(f.centroids());
  out.params() = f.params().cast<float>();
  return out;
}

template class PartitionedField<float>;
template class PartitionedField<double>;

}  // namespace latitude
