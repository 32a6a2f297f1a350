#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "ssmd/autodiff.hpp"
#include "ssmd/detector.hpp"
#include "ssmd/detector_output.hpp"
#include "ssmd/errors.hpp"
#include "ssmd/losses.hpp"
#include "ssmd/tensor.hpp"

namespace ssmd {

struct PerturbationConfig {
  double xi = 5e-7;          // seed-noise scale
  double eps = 2.0;          // perturbation magnitude (L2)
  double tau = 0.95;         // foreground-confidence threshold
  double grad_floor = 1e-12; // below this gradient norm the step degenerates

  void validate() const {
    if (!(xi > 0.0 && xi <= 1.0)) throw std::invalid_argument("adversarial: xi must be in (0,1]");
    if (!(eps > 0.0)) throw std::invalid_argument("adversarial: eps must be > 0");
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("adversarial: tau must be in (0,1)");
  }
};

struct AdversarialState {
  Tensor r_adv;          // image-shaped; L2 norm is eps or exactly zero
  Tensor grad;           // gradient of the masked consistency loss w.r.t. the seed
  double grad_norm = 0.0;
  double masked_loss = 0.0;
  long masked_positions = 0;
  bool degenerate = true;
};

/// I.i.d. standard-normal draw scaled to unit L2 norm.
inline Tensor seed_noise(int c, int h, int w, std::mt19937_64& rng) {
  Tensor t = Tensor::gaussian(c, h, w, 0.0, 1.0, rng);
  const double n = t.l2_norm();
  if (n > 0.0) t.data /= n;
  return t;
}

/// Per-level indicator of confident foreground in the student's grid frame:
/// 1 where the summed foreground probability (1 - p[0]) exceeds tau.
inline std::vector<Tensor> foreground_mask(const DetectorOutput& student, double tau,
                                           int span) {
  std::vector<Tensor> masks;
  for (int li = 0; li < span; ++li) {
    const LevelOutput& lvl = student.levels[static_cast<std::size_t>(li)];
    const int group = lvl.num_classes + 1;
    Tensor m(lvl.anchors, lvl.hc, lvl.wc);
    for (int a = 0; a < lvl.anchors; ++a)
      for (int y = 0; y < lvl.hc; ++y)
        for (int x = 0; x < lvl.wc; ++x)
          if (1.0 - lvl.cls.at(a * group, y, x) > tau) m.at(a, y, x) = 1.0;
    masks.push_back(std::move(m));
  }
  return masks;
}

inline long mask_cardinality(const std::vector<Tensor>& masks) {
  long n = 0;
  for (const auto& m : masks) n += static_cast<long>(m.data.sum());
  return n;
}

/// Evaluates the mask-restricted consistency loss for an arbitrary teacher
/// input (used by tests to compare the adversarial direction against random
/// ones).
inline double masked_consistency_value(const Detector& det, const ModelWeights& teacher_w,
                                       const DetectorOutput& student_out,
                                       const Tensor& teacher_input,
                                       const ConsistencyOptions& opts,
                                       const std::vector<Tensor>& masks,
                                       bool mirror_h = true, bool mirror_v = false) {
  DetectorOutput t = det.forward_value(teacher_w, teacher_input);
  DetectorOutput tm = mirror_predictions(t, teacher_input.w, mirror_h, mirror_v);
  Tape tape;
  auto s_vars = levels_to_tape(tape, student_out);
  auto t_vars = levels_to_tape(tape, tm);
  return tape.scalar(consistency_cost_var(tape, s_vars, t_vars, opts, &masks));
}

/// One synthesis pass (Adv. in the training procedure), per image:
///  1. add xi-scaled unit Gaussian seed noise to the teacher view;
///  2. forward the teacher, mirror its grids, and form the consistency loss
///     against the student's (fixed) predictions, restricted to positions
///     where the student is confidently foreground;
///  3. differentiate that loss w.r.t. the seed perturbation;
///  4. r_adv = eps * g / ||g||, or zero when the gradient degenerates.
/// Weights on both sides are read-only throughout.
inline AdversarialState synthesize(const PerturbationConfig& cfg, const Detector& det,
                                   const ModelWeights& teacher_w,
                                   const DetectorOutput& student_out,
                                   const Tensor& teacher_view,
                                   const ConsistencyOptions& opts, std::mt19937_64& rng,
                                   bool mirror_h = true, bool mirror_v = false) {
  cfg.validate();
  AdversarialState st;
  st.r_adv = Tensor(teacher_view.c, teacher_view.h, teacher_view.w);
  st.grad = Tensor(teacher_view.c, teacher_view.h, teacher_view.w);

  const int span = opts.levels < 0 ? static_cast<int>(student_out.levels.size()) : opts.levels;
  std::vector<Tensor> masks = foreground_mask(student_out, cfg.tau, span);
  st.masked_positions = mask_cardinality(masks);
  if (st.masked_positions == 0) return st;  // indicator kills the loss

  Tape tape;
  std::vector<Var> params = det.weights_to_tape(tape, teacher_w, false);
  Var seed = tape.leaf(seed_noise(teacher_view.c, teacher_view.h, teacher_view.w, rng), true);
  Var input = tape.add(tape.leaf(teacher_view, false), tape.affine(seed, cfg.xi, 0.0));
  auto t_levels = det.forward(tape, params, input, false, false, nullptr);
  auto t_mirrored = mirror_predictions_var(tape, t_levels, mirror_h, mirror_v);
  auto s_levels = levels_to_tape(tape, student_out);
  Var loss = consistency_cost_var(tape, s_levels, t_mirrored, opts, &masks);

  st.masked_loss = tape.scalar(loss);
  if (!std::isfinite(st.masked_loss))
    throw numeric_error("adversarial synthesis: non-finite masked consistency loss");
  tape.backward(loss);
  st.grad = tape.grad(seed);
  if (!st.grad.data.isFinite().all())
    throw numeric_error("adversarial synthesis: non-finite gradient");
  st.grad_norm = st.grad.l2_norm();
  if (st.grad_norm > cfg.grad_floor) {
    st.r_adv = st.grad;
    st.r_adv.data *= cfg.eps / st.grad_norm;
    st.degenerate = false;
  }
  return st;
}

}  // namespace ssmd
