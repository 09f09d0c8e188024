// Sinusoidal positional encoding with a per-band weight mask.
//
// Band k has frequency 2^k (k = 0..L-1). The mask cutoff grows linearly
// with the iteration ratio alpha but starts from a non-zero offset alpha0
// (in band units), so the first renders of an optimization already carry
// the low bands instead of starting from an all-zero encoding.

#pragma once

#include <vector>

#include "latitude/common.hpp"

namespace latitude {

struct EncodingConfig {
  int num_bands = 8;            // L
  bool include_raw_input = true;
  int input_dim = 3;

  int output_dim() const { return input_dim * (2 * num_bands + (include_raw_input ? 1 : 0)); }
};

enum class MaskMode {
  kStep,  // omega_k in {0,1}; the default
  kRamp,  // linear ramp clamp(cutoff - k, 0, 1); for visualization only
};

// Per-band weights omega[0..L-1]: omega_k = 1 if k <= alpha*L + alpha0 else 0.
// alpha is the iteration ratio in [0,1]; alpha0 is in band units in [0,L].
// Throws DomainError when alpha or alpha0 is outside its range.
VecX band_weights(double alpha, double alpha0, int num_bands, MaskMode mode = MaskMode::kStep);

struct FilterSchedule {
  double alpha0 = 0.0;       // truncation offset, band units
  double alpha = 0.0;        // iteration ratio
  int update_interval = 50;  // steps between alpha refreshes
  MaskMode mode = MaskMode::kStep;

  VecX weights(int num_bands) const { return band_weights(alpha, alpha0, num_bands, mode); }
};

// Quantized iteration ratio: alpha = (floor(step/interval)*interval)/total,
// clamped to [0,1]. Constant between schedule updates.
double schedule_alpha(int step, int total_steps, int interval);

// Feature layout: [raw input (if configured); then per band k the block
// cos(2^k pi x) followed by sin(2^k pi x), componentwise], with band k
// scaled by omega[k]. Throws DimensionError when omega.size() != L.
VecX encode(const VecX& x, const EncodingConfig& cfg, const VecX& omega);

// Jacobian d encode / d x, same layout; used as the reference for the
// batched derivative in the field module.
MatX encode_jacobian(const VecX& x, const EncodingConfig& cfg, const VecX& omega);

}  // namespace latitude
