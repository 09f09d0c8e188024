#include "latitude/renderer.hpp"

#include <cmath>

namespace latitude {

std::vector<Ray> generate_rays(const Pose& pose, const CameraIntrinsics& K, const PixelSet& pixels,
                               double near, double far) {
  const Mat3 R = pose.rotation_matrix();
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const auto& uv : pixels) {
    if (uv.x() < 0 || uv.x() >= K.width || uv.y() < 0 || uv.y() >= K.height) {
      throw DomainError("pixel (" + std::to_string(uv.x()) + ", " + std::to_string(uv.y()) +
                        ") outside image bounds");
    }
    const Vec3 cam((uv.x() + 0.5 - K.cx) / K.fx, (uv.y() + 0.5 - K.cy) / K.fy, 1.0);
    Ray ray;
    ray.origin = pose.translation();
    ray.direction = (R * cam).normalized();
    ray.near = near;
    ray.far = far;
    rays.push_back(ray);
  }
  return rays;
}

VecX stratified_depths(double near, double far, int n, Rng* rng) {
  if (n < 2) throw DomainError("stratified_depths needs at least two samples");
  if (!(near < far)) throw DomainError("stratified_depths needs near < far");
  VecX depths(n);
  const double bin = (far - near) / n;
  for (int i = 0; i < n; ++i) {
    const double t = rng ? rng->uniform() : 0.5;
    depths[i] = near + (i + t) * bin;
  }
  return depths;
}

namespace {

template <typename S>
void composite_column(const Eigen::Ref<const MatXT<S>>& colors,
                      const Eigen::Ref<const VecXT<S>>& sigmas,
                      const Eigen::Ref<const VecXT<S>>& depths, S far, const Vec3T<S>& background,
                      Vec3T<S>& out, VecXT<S>* weights) {
  const Eigen::Index n = depths.size();
  S transmittance = S(1);
  out.setZero();
  for (Eigen::Index i = 0; i < n; ++i) {
    const S delta = (i + 1 < n ? depths[i + 1] : far) - depths[i];
    const S alpha = S(1) - std::exp(-sigmas[i] * delta);
    const S w = transmittance * alpha;
    out += w * colors.col(i);
    if (weights) (*weights)[i] = w;
    transmittance *= (S(1) - alpha);
  }
  out += transmittance * background;
  if (weights) (*weights)[n] = transmittance;
}

template <typename S>
void composite_backward_column(const Eigen::Ref<const MatXT<S>>& colors,
                               const Eigen::Ref<const VecXT<S>>& sigmas,
                               const Eigen::Ref<const VecXT<S>>& depths, S far,
                               const Vec3T<S>& background, const Vec3T<S>& d_out,
                               Eigen::Ref<MatXT<S>> d_colors, Eigen::Ref<VecXT<S>> d_sigmas) {
  const Eigen::Index n = depths.size();
  VecXT<S> delta(n), alpha(n), trans(n + 1), w(n);
  trans[0] = S(1);
  for (Eigen::Index i = 0; i < n; ++i) {
    delta[i] = (i + 1 < n ? depths[i + 1] : far) - depths[i];
    alpha[i] = S(1) - std::exp(-sigmas[i] * delta[i]);
    w[i] = trans[i] * alpha[i];
    trans[i + 1] = trans[i] * (S(1) - alpha[i]);
  }
  // suffix[k] = sum_{i>k} w_i c_i + trans[n] * background, built backwards.
  Vec3T<S> suffix = trans[n] * background;
  for (Eigen::Index k = n - 1; k >= 0; --k) {
    d_colors.col(k) = w[k] * d_out;
    // d(out)/d(sigma_k) = delta_k * (T_{k+1} c_k - suffix_k)
    const Vec3T<S> dk = delta[k] * (trans[k + 1] * colors.col(k) - suffix);
    d_sigmas[k] = dk.dot(d_out);
    suffix += w[k] * colors.col(k);
  }
}

void check_depths_increasing(const VecX& depths) {
  for (Eigen::Index i = 1; i < depths.size(); ++i) {
    if (!(depths[i] > depths[i - 1])) throw DomainError("depths must be strictly increasing");
  }
}

}  // namespace

Vec3 composite(const MatX& colors, const VecX& sigmas, const VecX& depths, double far,
               const Vec3& background, VecX* weights) {
  if (colors.rows() != 3 || colors.cols() != sigmas.size() || sigmas.size() != depths.size()) {
    throw DimensionError("composite: colors/sigmas/depths sizes disagree");
  }
  check_depths_increasing(depths);
  if (weights) weights->resize(depths.size() + 1);
  Vec3 out;
  composite_column<double>(colors, sigmas, depths, far, background, out, weights);
  return out;
}

void composite_backward(const MatX& colors, const VecX& sigmas, const VecX& depths, double far,
                        const Vec3& background, const Vec3& d_out, MatX& d_colors,
                        VecX& d_sigmas) {
  if (colors.rows() != 3 || colors.cols() != sigmas.size() || sigmas.size() != depths.size()) {
    throw DimensionError("composite_backward: colors/sigmas/depths sizes disagree");
  }
  check_depths_increasing(depths);
  d_colors.resize(3, colors.cols());
  d_sigmas.resize(sigmas.size());
  composite_backward_column<double>(colors, sigmas, depths, far, background, d_out, d_colors,
                                    d_sigmas);
}

double photometric_loss(const MatX& rendered, const MatX& observed) {
  if (rendered.rows() != 3 || observed.rows() != 3 || rendered.cols() != observed.cols()) {
    throw DimensionError("photometric_loss: rendered/observed shapes disagree");
  }
  return (rendered - observed).colwise().squaredNorm().sum();
}

double photometric_loss_mean(const MatX& rendered, const MatX& observed) {
  const double total = photometric_loss(rendered, observed);
  return rendered.cols() > 0 ? total / static_cast<double>(rendered.cols()) : 0.0;
}

PixelSet deterministic_pixels(const CameraIntrinsics& K, int count) {
  PixelSet pixels;
  const long total = static_cast<long>(K.width) * K.height;
  const int n = static_cast<int>(std::min<long>(count, total));
  pixels.reserve(n);
  for (int i = 0; i < n; ++i) {
    const long idx = static_cast<long>((i + 0.5) * total / n);
    pixels.emplace_back(static_cast<int>(idx % K.width), static_cast<int>(idx / K.width));
  }
  return pixels;
}

PixelSet sample_pixels(const CameraIntrinsics& K, int count, Rng& rng) {
  PixelSet pixels;
  pixels.reserve(count);
  for (int i = 0; i < count; ++i) {
    pixels.emplace_back(static_cast<int>(rng.uniform_index(K.width)),
                        static_cast<int>(rng.uniform_index(K.height)));
  }
  return pixels;
}

MatX gather_pixels(const Image& image, const PixelSet& pixels) {
  MatX out(3, static_cast<Eigen::Index>(pixels.size()));
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const auto& uv = pixels[i];
    if (uv.x() < 0 || uv.x() >= image.width || uv.y() < 0 || uv.y() >= image.height) {
      throw DomainError("pixel outside observed image");
    }
    out.col(static_cast<Eigen::Index>(i)) = image.pixel(uv.x(), uv.y());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batched rendering
// ---------------------------------------------------------------------------

namespace {

// Sample j of ray r lands in column r*N+j.
template <typename S>
void flatten_samples(const RayBatch<S>& batch, int d_app, MatXT<S>& X, MatXT<S>& D, MatXT<S>& E) {
  const int R = batch.num_rays();
  const int N = batch.samples_per_ray();
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

}  // namespace

template <typename S>
void shade_batch(const PartitionedField<S>& field, RayBatch<S>& batch, const VecX& omega) {
  const int R = batch.num_rays();
  const int N = batch.samples_per_ray();
  MatXT<S> X, D, E;
  flatten_samples(batch, field.config().d_app, X, D, E);

  const FieldOutputs<S> out = field.forward(X, D, E, omega);
  batch.sample_color = out.color;
  batch.sample_sigma = out.sigma;

  batch.colors.resize(3, R);
  const Vec3T<S> bg = batch.background.template cast<S>();
  for (int r = 0; r < R; ++r) {
    Vec3T<S> pixel;
    composite_column<S>(batch.sample_color.middleCols(static_cast<Eigen::Index>(r) * N, N),
                        batch.sample_sigma.segment(static_cast<Eigen::Index>(r) * N, N),
                        batch.depths.col(r), static_cast<S>(batch.far), bg, pixel, nullptr);
    batch.colors.col(r) = pixel;
  }
}

template <typename S>
RayBatch<S> render_pixels(const PartitionedField<S>& field, const Pose& pose,
                          const CameraIntrinsics& K, const PixelSet& pixels,
                          const MatXT<S>& embeddings, const VecX& omega,
                          const RenderOptions& options, Rng* rng) {
  const int R = static_cast<int>(pixels.size());
  const int N = options.samples_per_ray;
  RayBatch<S> batch;
  batch.pixels = pixels;
  batch.far = options.far;
  batch.background = options.background;
  batch.origins.resize(3, R);
  batch.directions.resize(3, R);
  batch.depths.resize(N, R);

  const std::vector<Ray> rays = generate_rays(pose, K, pixels, options.near, options.far);
  for (int r = 0; r < R; ++r) {
    batch.origins.col(r) = rays[r].origin.template cast<S>();
    batch.directions.col(r) = rays[r].direction.template cast<S>();
    const VecX depths =
        stratified_depths(options.near, options.far, N, options.deterministic ? nullptr : rng);
    batch.depths.col(r) = depths.template cast<S>();
  }

  if (embeddings.cols() == 1) {
    batch.embeddings = embeddings.replicate(1, R);
  } else if (embeddings.cols() == R) {
    batch.embeddings = embeddings;
  } else {
    throw DimensionError("render_pixels: embeddings must have 1 or R columns");
  }

  shade_batch(field, batch, omega);
  return batch;
}

template <typename S>
void composite_backward_batch(const RayBatch<S>& batch, const MatXT<S>& d_colors,
                              MatXT<S>& d_sample_color, VecXT<S>& d_sample_sigma) {
  const int R = batch.num_rays();
  const int N = batch.samples_per_ray();
  if (d_colors.rows() != 3 || d_colors.cols() != R) {
    throw DimensionError("composite_backward_batch: upstream shape mismatch");
  }
  d_sample_color.resize(3, static_cast<Eigen::Index>(R) * N);
  d_sample_sigma.resize(static_cast<Eigen::Index>(R) * N);
  const Vec3T<S> bg = batch.background.template cast<S>();
  for (int r = 0; r < R; ++r) {
    const Eigen::Index base = static_cast<Eigen::Index>(r) * N;
    const Vec3T<S> up = d_colors.col(r);
    composite_backward_column<S>(batch.sample_color.middleCols(base, N),
                                 batch.sample_sigma.segment(base, N), batch.depths.col(r),
                                 static_cast<S>(batch.far), bg, up,
                                 d_sample_color.middleCols(base, N),
                                 d_sample_sigma.segment(base, N));
  }
}

template <typename S>
Vec6 twist_gradient(const PartitionedField<S>& field, const RayBatch<S>& batch,
                    const MatXT<S>& d_colors, const VecX& omega) {
  MatXT<S> d_sample_color;
  VecXT<S> d_sample_sigma;
  composite_backward_batch(batch, d_colors, d_sample_color, d_sample_sigma);

  // Rebuild the flattened sample inputs and run the field reverse pass for
  // position and direction gradients.
  MatXT<S> X, D, E;
  flatten_samples(batch, field.config().d_app, X, D, E);
  GradRequest req;
  req.position = true;
  req.direction = true;
  FieldGradients<S> grads;
  field.forward_backward(X, D, E, omega, d_sample_color, d_sample_sigma, req, grads);

  // For a world-frame increment delta about the current pose:
  //   d(sample x)/d(delta) = [I | -skew(x)],  d(direction)/d(delta) = [0 | -skew(d)]
  // so d(loss)/d(rho) sums position gradients and d(loss)/d(phi) sums
  // x cross g_x plus d cross g_d. Accumulate in double.
  Vec3 d_rho = Vec3::Zero();
  Vec3 d_phi = Vec3::Zero();
  for (Eigen::Index col = 0; col < X.cols(); ++col) {
    const Vec3 xs = X.col(col).template cast<double>();
    const Vec3 gx = grads.d_pos.col(col).template cast<double>();
    const Vec3 ds = D.col(col).template cast<double>();
    const Vec3 gd = grads.d_dir.col(col).template cast<double>();
    d_rho += gx;
    d_phi += xs.cross(gx) + ds.cross(gd);
  }
  Vec6 g;
  g << d_rho, d_phi;
  return g;
}

template <typename S>
TwistStepResult<S> loss_grad_wrt_twist(const PartitionedField<S>& field, const Image& observed,
                                       const PixelSet& pixels, const Pose& base_pose,
                                       const Twist& xi, const CameraIntrinsics& K,
                                       const MatXT<S>& embeddings, const VecX& omega,
                                       const RenderOptions& options, Rng* rng) {
  const Pose current = apply_increment(xi, base_pose);
  const RayBatch<S> batch =
      render_pixels(field, current, K, pixels, embeddings, omega, options, rng);
  const MatX observed_px = gather_pixels(observed, pixels);
  const MatX rendered = batch.colors.template cast<double>();

  TwistStepResult<S> result;
  result.loss = photometric_loss(rendered, observed_px);
  result.loss_mean = pixels.empty() ? 0.0 : result.loss / static_cast<double>(pixels.size());
  const MatXT<S> d_colors = (2.0 * (rendered - observed_px)).template cast<S>();
  result.gradient = twist_gradient(field, batch, d_colors, omega);
  return result;
}

template <typename S>
Image render_image(const PartitionedField<S>& field, const Pose& pose, const CameraIntrinsics& K,
                   const VecXT<S>& embedding, const VecX& omega, const RenderOptions& options,
                   Rng* rng) {
  Image image(K.width, K.height);
  const int rows_per_chunk = std::max(1, 65536 / std::max(1, K.width * options.samples_per_ray));
  MatXT<S> emb(embedding.size(), 1);
  emb.col(0) = embedding;
  for (int y0 = 0; y0 < K.height; y0 += rows_per_chunk) {
    const int y1 = std::min(K.height, y0 + rows_per_chunk);
    PixelSet pixels;
    pixels.reserve(static_cast<std::size_t>(K.width) * (y1 - y0));
    for (int y = y0; y < y1; ++y) {
      for (int x = 0; x < K.width; ++x) pixels.emplace_back(x, y);
    }
    const RayBatch<S> batch = render_pixels(field, pose, K, pixels, emb, omega, options, rng);
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      const Vec3 rgb = batch.colors.col(static_cast<Eigen::Index>(i)).template cast<double>();
      image.set_pixel(pixels[i].x(), pixels[i].y(), rgb);
    }
  }
  return image;
}

template struct RayBatch<float>;
template struct RayBatch<double>;
template void shade_batch<float>(const PartitionedField<float>&, RayBatch<float>&, const VecX&);
template void shade_batch<double>(const PartitionedField<double>&, RayBatch<double>&, const VecX&);
template RayBatch<float> render_pixels<float>(const PartitionedField<float>&, const Pose&,
                                              const CameraIntrinsics&, const PixelSet&,
                                              const MatXT<float>&, const VecX&,
                                              const RenderOptions&, Rng*);
template RayBatch<double> render_pixels<double>(const PartitionedField<double>&, const Pose&,
                                                const CameraIntrinsics&, const PixelSet&,
                                                const MatXT<double>&, const VecX&,
                                                const RenderOptions&, Rng*);
template void composite_backward_batch<float>(const RayBatch<float>&, const MatXT<float>&,
                                              MatXT<float>&, VecXT<float>&);
template void composite_backward_batch<double>(const RayBatch<double>&, const MatXT<double>&,
                                               MatXT<double>&, VecXT<double>&);
template Vec6 twist_gradient<float>(const PartitionedField<float>&, const RayBatch<float>&,
                                    const MatXT<float>&, const VecX&);
template Vec6 twist_gradient<double>(const PartitionedField<double>&, const RayBatch<double>&,
                                     const MatXT<double>&, const VecX&);
template TwistStepResult<float> loss_grad_wrt_twist<float>(const PartitionedField<float>&,
                                                           const Image&, const PixelSet&,
                                                           const Pose&, const Twist&,
                                                           const CameraIntrinsics&,
                                                           const MatXT<float>&, const VecX&,
                                                           const RenderOptions&, Rng*);
template TwistStepResult<double> loss_grad_wrt_twist<double>(const PartitionedField<double>&,
                                                             const Image&, const PixelSet&,
                                                             const Pose&, const Twist&,
                                                             const CameraIntrinsics&,
                                                             const MatXT<double>&, const VecX&,
                                                             const RenderOptions&, Rng*);
template Image render_image<float>(const PartitionedField<float>&, const Pose&,
                                   const CameraIntrinsics&, const VecXT<float>&, const VecX&,
                                   const RenderOptions&, Rng*);
template Image render_image<double>(const PartitionedField<double>&, const Pose&,
                                    const CameraIntrinsics&, const VecXT<double>&, const VecX&,
                                    const RenderOptions&, Rng*);

}  // namespace latitude
