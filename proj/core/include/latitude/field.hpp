// Radiance field: a small MLP mapping (position, view direction, appearance
// embedding) to (rgb, density), with an optional grid partition that routes
// each query to the sub-field whose horizontal centroid is nearest.
//
// The density head reads only position features; the color head reads the
// trunk bottleneck, the encoded direction, and the embedding, so density is
// independent of both view direction and appearance by construction.
//
// All parameters of all cells plus the appearance table live in one flat
// vector (layer-major, each weight matrix row-major, bias after weights,
// appearance table last, image-major). Gradients come from an analytic
// reverse pass; batched evaluation runs in fixed-size blocks whose partial
// parameter gradients are reduced in block order, so results do not depend
// on the worker thread count.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "latitude/common.hpp"
#include "latitude/encoding.hpp"
#include "latitude/rng.hpp"
#include "latitude/threading.hpp"

namespace latitude {

struct FieldConfig {
  int depth = 4;        // trunk layers
  int width = 64;       // trunk width
  int color_width = 32; // color branch hidden width
  int l_pos = 8;        // position encoding bands
  int l_dir = 4;        // direction encoding bands
  int d_app = 4;        // appearance embedding size
  bool include_raw = true;
  enum class DensityActivation { kSoftplus, kRelu };
  DensityActivation density_activation = DensityActivation::kSoftplus;
  int grid_x = 2, grid_y = 2;  // partition layout

  int pos_feat_dim() const { return 3 * (2 * l_pos + (include_raw ? 1 : 0)); }
  int dir_feat_dim() const { return 3 * (2 * l_dir + (include_raw ? 1 : 0)); }
  int skip_layer() const { return depth / 2; }
  int color_in_dim() const { return width + dir_feat_dim() + d_app; }
  int num_cells() const { return grid_x * grid_y; }
};

// Axis-aligned normalization box; encoded coordinates are (x - center)/half.
struct SceneBounds {
  Vec3 center = Vec3::Zero();
  Vec3 half = Vec3::Ones();

  static SceneBounds from_min_max(const Vec3& lo, const Vec3& hi, double margin = 1.0);
  double diameter() const { return 2.0 * half.norm(); }
};

namespace detail {

struct LayerSpec {
  int rows = 0, cols = 0;
  std::size_t w_off = 0, b_off = 0;
  std::size_t end() const { return b_off + static_cast<std::size_t>(rows); }
};

// Offsets of one cell's layers inside the flat parameter vector.
struct CellLayout {
  std::vector<LayerSpec> trunk;
  LayerSpec sigma_head;
  LayerSpec color_hidden;
  LayerSpec color_out;
  std::size_t param_count = 0;
};

CellLayout make_cell_layout(const FieldConfig& cfg, std::size_t base);

}  // namespace detail

std::size_t cell_param_count(const FieldConfig& cfg);
std::size_t total_param_count(const FieldConfig& cfg, int n_images);

template <typename S>
struct FieldOutputs {
  MatXT<S> color;    // 3 x B
  VecXT<S> sigma;    // B
};

template <typename S>
struct FieldGradients {
  VecXT<S> params;   // flat, same layout as the parameter vector (empty if unused)
  MatXT<S> d_pos;    // 3 x B, d/d world position (empty if unused)
  MatXT<S> d_dir;    // 3 x B, d/d direction (empty if unused)
  MatXT<S> d_emb;    // d_app x B (empty if unused)
};

struct GradRequest {
  bool params = false;
  bool position = false;
  bool direction = false;
  bool embedding = false;
};

template <typename S>
class PartitionedField {
 public:
  PartitionedField() = default;
  PartitionedField(const FieldConfig& cfg, const SceneBounds& bounds, int n_images);

  const FieldConfig& config() const { return cfg_; }
  const SceneBounds& bounds() const { return bounds_; }
  int n_images() const { return n_images_; }
  const std::vector<Vec2>& centroids() const { return centroids_; }

  VecXT<S>& params() { return params_; }
  const VecXT<S>& params() const { return params_; }

  // Appearance embedding of one image (d_app values) and the table mean.
  Eigen::Map<const VecXT<S>> embedding(int image) const;
  VecXT<S> mean_embedding() const;
  std::size_t appearance_offset() const { return appearance_off_; }

  // Deterministic seeded init: He-uniform hidden layers, zero output layers
  // (so an untrained field renders mid-gray), small-normal appearance rows.
  void init(Rng& rng);

  // Nearest horizontal centroid; ties go to the lowest cell index.
  int route(const Vec3& x) const;

  // Batched evaluation. x/d are world-frame 3xB, emb is d_app x B. omega has
  // l_pos entries; the direction encoding uses its first l_dir entries.
  FieldOutputs<S> forward(const MatXT<S>& x, const MatXT<S>& d, const MatXT<S>& emb,
                          const VecX& omega) const;

  // Evaluation plus reverse pass for the requested gradient blocks, given
  // upstream d(loss)/d(color) (3xB) and d(loss)/d(sigma) (B).
  FieldOutputs<S> forward_backward(const MatXT<S>& x, const MatXT<S>& d, const MatXT<S>& emb,
                                   const VecX& omega, const MatXT<S>& d_color,
                                   const VecXT<S>& d_sigma, const GradRequest& req,
                                   FieldGradients<S>& grads) const;

  // Single-query conveniences used by tests and diagnostics. Throw
  // NonFiniteError on non-finite inputs and DomainError when |d| is not
  // within 1e-6 of 1.
  void eval(const Vec3& x, const Vec3& d, const VecX& emb, const VecX& omega, Vec3& color,
            double& sigma) const;
  void eval_with_grad(const Vec3& x, const Vec3& d, const VecX& emb, const VecX& omega,
                      const Vec3& upstream_color, double upstream_sigma, Vec3& color,
                      double& sigma, FieldGradients<S>& grads) const;

 private:
  struct BlockScratch;

  void forward_cell_block(int cell, const MatXT<S>& x, const MatXT<S>& d, const MatXT<S>& emb,
                          const VecXT<S>& omega_pos, const VecXT<S>& omega_dir,
                          std::size_t col_begin, std::size_t col_end, BlockScratch& scratch,
                          MatXT<S>& color_out, VecXT<S>& sigma_out) const;
  void backward_cell_block(int cell, const MatXT<S>& d_color, const VecXT<S>& d_sigma,
                           const GradRequest& req, BlockScratch& scratch,
                           VecXT<S>* param_grads, MatXT<S>* d_pos, MatXT<S>* d_dir,
                           MatXT<S>* d_emb) const;

  FieldConfig cfg_;
  SceneBounds bounds_;
  int n_images_ = 0;
  std::vector<Vec2> centroids_;
  std::vector<detail::CellLayout> layouts_;
  std::size_t appearance_off_ = 0;
  VecXT<S> params_;

 public:
  // Internals used by checkpoint IO and the trainer.
  const std::vector<detail::CellLayout>& layouts() const { return layouts_; }
  void set_centroids(const std::vector<Vec2>& c);
};

using FieldF = PartitionedField<float>;
using FieldD = PartitionedField<double>;

// Checkpoint file: a text manifest (key value per line) terminated by a
// "data" line, followed by the flat parameter vector as little-endian
// float32 in layout order.
void save_field(const std::string& path, const PartitionedField<float>& field);
PartitionedField<float> load_field(const std::string& path);

// Exact widening/narrowing between precisions (used by gradient tests).
PartitionedField<double> to_double(const PartitionedField<float>& f);
PartitionedField<float> to_float(const PartitionedField<double>& f);

extern template class PartitionedField<float>;
extern template class PartitionedField<double>;

}  // namespace latitude
