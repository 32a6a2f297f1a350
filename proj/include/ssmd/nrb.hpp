#pragma once

#include <random>

#include "ssmd/autodiff.hpp"
#include "ssmd/tensor.hpp"

namespace ssmd {

/// Noisy residual gate: channel-gated Gaussian noise added through a
/// residual connection. The gate is sigmoid(gamma * proj(global-avg-pool(x)))
/// per channel; the projection (a 1x1 channel mixing) is learnable and lives
/// in ModelWeights.
struct NoisyResidualGate {
  double gamma = 0.9;
  double mu = 0.0;
  double sigma = 1.0;
};

/// Applies the gate on the tape. When disabled the input variable is
/// returned unchanged (exact identity). The noise map is drawn per call and
/// enters the graph as a constant: gradients flow through the gate path and
/// the residual path only.
inline Var nrb_apply(Tape& tape, const NoisyResidualGate& gate, Var xl, Var proj_w,
                     Var proj_b, std::mt19937_64& rng, bool enabled) {
  if (!enabled) return xl;
  const Tensor& x = tape.val(xl);
  Var pooled = tape.global_avg_pool(xl);
  Var xp = tape.conv2d(pooled, proj_w, proj_b, 1, 0);  // (C,1,1)
  Var g = tape.sigmoid(tape.affine(xp, gate.gamma, 0.0));
  Tensor noise = Tensor::gaussian(x.c, x.h, x.w, gate.mu, gate.sigma, rng);
  Var xn = tape.leaf(std::move(noise), false);
  return tape.add(tape.mul_channel(xn, g), xl);
}

}  // namespace ssmd
