#include "latitude/encoding.hpp"

#include <cmath>

namespace latitude {

VecX band_weights(double alpha, double alpha0, int num_bands, MaskMode mode) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw DomainError("alpha must lie in [0, 1]");
  if (!(alpha0 >= 0.0 && alpha0 <= num_bands)) throw DomainError("alpha0 must lie in [0, L]");
  if (num_bands < 1) throw DomainError("num_bands must be >= 1");

  const double cutoff = alpha * num_bands + alpha0;
  VecX omega(num_bands);
  for (int k = 0; k < num_bands; ++k) {
    if (mode == MaskMode::kStep) {
      omega[k] = (static_cast<double>(k) <= cutoff) ? 1.0 : 0.0;
    } else {
      omega[k] = std::clamp(cutoff - static_cast<double>(k), 0.0, 1.0);
    }
  }
  return omega;
}

double schedule_alpha(int step, int total_steps, int interval) {
  if (total_steps <= 0) throw DomainError("total_steps must be positive");
  if (interval < 1) throw DomainError("interval must be >= 1");
  if (step < 0) step = 0;
  const double quantized = static_cast<double>((step / interval) * interval);
  return std::clamp(quantized / static_cast<double>(total_steps), 0.0, 1.0);
}

VecX encode(const VecX& x, const EncodingConfig& cfg, const VecX& omega) {
  if (x.size() != cfg.input_dim) throw DimensionError("encode: input dimension mismatch");
  if (omega.size() != cfg.num_bands) throw DimensionError("encode: omega size must equal num_bands");

  VecX out(cfg.output_dim());
  int at = 0;
  if (cfg.include_raw_input) {
    out.segment(at, cfg.input_dim) = x;
    at += cfg.input_dim;
  }
  for (int k = 0; k < cfg.num_bands; ++k) {
    const double freq = std::ldexp(kPi, k);  // 2^k * pi
    for (int j = 0; j < cfg.input_dim; ++j) out[at + j] = omega[k] * std::cos(freq * x[j]);
    at += cfg.input_dim;
    for (int j = 0; j < cfg.input_dim; ++j) out[at + j] = omega[k] * std::sin(freq * x[j]);
    at += cfg.input_dim;
  }
  return out;
}

MatX encode_jacobian(const VecX& x, const EncodingConfig& cfg, const VecX& omega) {
  if (x.size() != cfg.input_dim) throw DimensionError("encode_jacobian: input dimension mismatch");
  if (omega.size() != cfg.num_bands) throw DimensionError("encode_jacobian: omega size mismatch");

  MatX jac = MatX::Zero(cfg.output_dim(), cfg.input_dim);
  int at = 0;
  if (cfg.include_raw_input) {
    jac.block(0, 0, cfg.input_dim, cfg.input_dim).setIdentity();
    at += cfg.input_dim;
  }
  for (int k = 0; k < cfg.num_bands; ++k) {
    const double freq = std::ldexp(kPi, k);
    for (int j = 0; j < cfg.input_dim; ++j) jac(at + j, j) = -omega[k] * freq * std::sin(freq * x[j]);
    at += cfg.input_dim;
    for (int j = 0; j < cfg.input_dim; ++j) jac(at + j, j) = omega[k] * freq * std::cos(freq * x[j]);
    at += cfg.input_dim;
  }
  return jac;
}

}  // namespace latitude
