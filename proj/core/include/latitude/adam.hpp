// Adam with bias correction over a flat parameter vector.

#pragma once

#include <cmath>

#include "latitude/common.hpp"

namespace latitude {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename S>
class Adam {
 public:
  Adam() = default;
  Adam(Eigen::Index size, const AdamConfig& cfg = {}) : cfg_(cfg) { reset(size); }

  void reset(Eigen::Index size) {
    m_ = VecXT<S>::Zero(size);
    v_ = VecXT<S>::Zero(size);
    t_ = 0;
  }

  int64_t step_count() const { return t_; }

  void step(VecXT<S>& params, const VecXT<S>& grad, double lr) {
    ++t_;
    const S b1 = static_cast<S>(cfg_.beta1);
    const S b2 = static_cast<S>(cfg_.beta2);
    m_ = b1 * m_ + (S(1) - b1) * grad;
    v_.array() = b2 * v_.array() + (S(1) - b2) * grad.array().square();
    const S c1 = static_cast<S>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
    const S c2 = static_cast<S>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
    params.array() -= static_cast<S>(lr) *
                      (m_.array() / c1) /
                      ((v_.array() / c2).sqrt() + static_cast<S>(cfg_.epsilon));
  }

 private:
  AdamConfig cfg_;
  VecXT<S> m_, v_;
  int64_t t_ = 0;
};

// lr(t) = lr_start * (lr_end / lr_start)^(t / total): exponential decay from
// lr_start at t=0 to lr_end at t=total.
inline double exp_decay_lr(double lr_start, double lr_end, int64_t t, int64_t total) {
  if (total <= 0) return lr_start;
  const double ratio = static_cast<double>(t) / static_cast<double>(total);
  return lr_start * std::pow(lr_end / lr_start, ratio);
}

}  // namespace latitude
