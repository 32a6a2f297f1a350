#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "ssmd/autodiff.hpp"
#include "ssmd/detector.hpp"
#include "ssmd/detector_output.hpp"
#include "ssmd/geometry.hpp"

namespace ssmd {

/// Probability distribution over C+1 classes, background at index 0.
using ClassDist = std::vector<double>;

/// Dynamic instance weight: ((1-ps[0])^2 + (1-pt[0])^2) / 2. Zero for
/// confident background on both sides, one for confident foreground.
inline double adaptive_weight(const ClassDist& ps, const ClassDist& pt) {
  if (ps.empty() || pt.empty() || ps.size() != pt.size())
    throw std::invalid_argument("adaptive_weight: distributions must match and be non-empty");
  const double a = 1.0 - ps[0];
  const double b = 1.0 - pt[0];
  return 0.5 * (a * a + b * b);
}

/// KL(ps || pt) with both operands clamped to [clamp, 1] inside the logs.
inline double kl_class(const ClassDist& ps, const ClassDist& pt, double clamp = 1e-7) {
  if (ps.size() != pt.size())
    throw std::invalid_argument("kl_class: distribution size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i)
    s += ps[i] * (std::log(std::max(ps[i], clamp)) - std::log(std::max(pt[i], clamp)));
  return s;
}

/// Sum of squared differences over the four delta components.
inline double mse_loc(const BoxDelta& a, const BoxDelta& b) {
  const double dx = a.px - b.px, dy = a.py - b.py, dw = a.pw - b.pw, dh = a.ph - b.ph;
  return dx * dx + dy * dy + dw * dw + dh * dh;
}

inline double smooth_l1(double d) {
  const double a = std::abs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

// ---------------------------------------------------------------------------
// Consistency cost

struct ConsistencyOptions {
  bool adaptive = true;   // false: uniform weight (the CSD configuration)
  int levels = -1;        // span the first N (coarsest) levels; -1: all
  double prob_clamp = 1e-7;
  // The adaptive weight is a per-position coefficient. By default it enters
  // the graph as a constant: letting gradients flow through it rewards
  // predicting background everywhere (W -> 0 kills the loss) and measurably
  // collapses training. The differentiable form stays available for
  // gradient-check harnesses.
  bool weight_gradient = false;
};

namespace detail {

inline void require_matching_levels(const LevelVars& s, const LevelVars& t) {
  if (s.hc != t.hc || s.wc != t.wc || s.anchors != t.anchors ||
      s.num_classes != t.num_classes)
    throw std::invalid_argument("consistency_cost: student/teacher level shape mismatch");
}

inline int consistency_span(std::size_t available, int requested) {
  const int n = requested < 0 ? static_cast<int>(available) : requested;
  if (n < 1 || n > static_cast<int>(available))
    throw std::invalid_argument("consistency_cost: invalid level span");
  return n;
}

}  // namespace detail

/// Mean over anchor positions (across the spanned levels, all weighted
/// equally) of W(ps,pt) * (KL(ps||pt) + MSE(deltas)). Gradients flow into
/// whichever side was registered with requires_grad; the other side is a
/// constant. Optional per-level 0/1 masks zero out positions without
/// changing the normalizer.
inline Var consistency_cost_var(Tape& tape, const std::vector<LevelVars>& student,
                                const std::vector<LevelVars>& teacher,
                                const ConsistencyOptions& opts,
                                const std::vector<Tensor>* masks = nullptr) {
  if (student.size() != teacher.size())
    throw std::invalid_argument("consistency_cost: level count mismatch");
  const int span = detail::consistency_span(student.size(), opts.levels);
  if (masks && static_cast<int>(masks->size()) != span)
    throw std::invalid_argument("consistency_cost: mask count mismatch");

  long total_positions = 0;
  for (int li = 0; li < span; ++li) {
    detail::require_matching_levels(student[static_cast<std::size_t>(li)],
                                    teacher[static_cast<std::size_t>(li)]);
    const auto& lv = student[static_cast<std::size_t>(li)];
    total_positions += static_cast<long>(lv.anchors) * lv.hc * lv.wc;
  }

  Var total = tape.leaf(Tensor::scalar(0.0), false);
  for (int li = 0; li < span; ++li) {
    const auto& s = student[static_cast<std::size_t>(li)];
    const auto& t = teacher[static_cast<std::size_t>(li)];
    const int group = s.num_classes + 1;

    Var kl_term = tape.group_sum(
        tape.mul(s.cls, tape.sub(tape.log_clamped(s.cls, opts.prob_clamp),
                                 tape.log_clamped(t.cls, opts.prob_clamp))),
        group);
    Var mse_term = tape.group_sum(tape.square(tape.sub(s.delta, t.delta)), 4);
    Var cost = tape.add(kl_term, mse_term);

    if (opts.adaptive) {
      Var weight;
      if (opts.weight_gradient) {
        Var ps0 = tape.select_channels(s.cls, group, 0);
        Var pt0 = tape.select_channels(t.cls, group, 0);
        weight = tape.affine(tape.add(tape.square(tape.affine(ps0, -1.0, 1.0)),
                                      tape.square(tape.affine(pt0, -1.0, 1.0))),
                             0.5, 0.0);
      } else {
        const Tensor& psv = tape.val(s.cls);
        const Tensor& ptv = tape.val(t.cls);
        Tensor wt(s.anchors, s.hc, s.wc);
        for (int a = 0; a < s.anchors; ++a)
          for (int y = 0; y < s.hc; ++y)
            for (int x = 0; x < s.wc; ++x) {
              const double ws = 1.0 - psv.at(a * group, y, x);
              const double wt0 = 1.0 - ptv.at(a * group, y, x);
              wt.at(a, y, x) = 0.5 * (ws * ws + wt0 * wt0);
            }
        weight = tape.leaf(std::move(wt), false);
      }
      cost = tape.mul(weight, cost);
    }
    if (masks) {
      const Tensor& m = (*masks)[static_cast<std::size_t>(li)];
      if (m.c != s.anchors || m.h != s.hc || m.w != s.wc)
        throw std::invalid_argument("consistency_cost: mask shape mismatch");
      cost = tape.mul(cost, tape.leaf(m, false));
    }
    total = tape.add(total, tape.sum(cost));
  }
  return tape.affine(total, 1.0 / static_cast<double>(total_positions), 0.0);
}

inline std::vector<LevelVars> levels_to_tape(Tape& tape, const DetectorOutput& out) {
  std::vector<LevelVars> vars;
  for (const auto& lvl : out.levels) {
    LevelVars lv;
    lv.stride = lvl.stride;
    lv.hc = lvl.hc;
    lv.wc = lvl.wc;
    lv.anchors = lvl.anchors;
    lv.num_classes = lvl.num_classes;
    lv.cls = tape.leaf(lvl.cls, false);
    lv.delta = tape.leaf(lvl.delta, false);
    vars.push_back(lv);
  }
  return vars;
}

/// Value-route consistency cost (teacher already mirrored).
inline double consistency_cost(const DetectorOutput& student,
                               const DetectorOutput& teacher_mirrored,
                               const ConsistencyOptions& opts = {}) {
  Tape tape;
  auto s = levels_to_tape(tape, student);
  auto t = levels_to_tape(tape, teacher_mirrored);
  return tape.scalar(consistency_cost_var(tape, s, t, opts));
}

// ---------------------------------------------------------------------------
// Supervised loss

/// Anchors actually entering the supervised loss: all positives plus the
/// hardest negatives at neg_ratio per positive (hardness = lowest predicted
/// background probability). The selection is computed once per step from the
/// forward values and is constant w.r.t. the graph.
struct TrainingSelection {
  struct Level {
    std::vector<int> pos_flat;
    std::vector<int> pos_class;
    std::vector<BoxDelta> pos_target;
    std::vector<int> neg_flat;
  };
  std::vector<Level> levels;
  int num_pos = 0;
};

inline TrainingSelection select_training_anchors(const AnchorAssignment& assign,
                                                 const std::vector<const Tensor*>& cls_grids,
                                                 int anchors, int num_classes,
                                                 int neg_ratio) {
  if (assign.levels.size() != cls_grids.size())
    throw std::invalid_argument("select_training_anchors: level count mismatch");
  const int group = num_classes + 1;
  TrainingSelection sel;
  sel.levels.resize(assign.levels.size());
  sel.num_pos = assign.num_positive;

  struct NegRef {
    double p0;
    int level;
    int flat;
  };
  std::vector<NegRef> negs;
  for (std::size_t li = 0; li < assign.levels.size(); ++li) {
    const auto& alvl = assign.levels[li];
    const Tensor& cls = *cls_grids[li];
    const int plane = cls.h * cls.w;
    for (std::size_t fi = 0; fi < alvl.label.size(); ++fi) {
      const int label = alvl.label[fi];
      if (label >= 1) {
        sel.levels[li].pos_flat.push_back(static_cast<int>(fi));
        sel.levels[li].pos_class.push_back(label);
        sel.levels[li].pos_target.push_back(alvl.target[fi]);
      } else if (label == 0) {
        const int a = static_cast<int>(fi) / plane;
        const int rem = static_cast<int>(fi) % plane;
        const double p0 =
            cls.data[(static_cast<Eigen::Index>(a) * group + 0) * plane + rem];
        negs.push_back({p0, static_cast<int>(li), static_cast<int>(fi)});
      }
    }
  }
  std::stable_sort(negs.begin(), negs.end(), [](const NegRef& a, const NegRef& b) {
    if (a.p0 != b.p0) return a.p0 < b.p0;
    if (a.level != b.level) return a.level < b.level;
    return a.flat < b.flat;
  });
  const std::size_t want = static_cast<std::size_t>(neg_ratio) *
                           static_cast<std::size_t>(std::max(1, sel.num_pos));
  for (std::size_t i = 0; i < negs.size() && i < want; ++i)
    sel.levels[static_cast<std::size_t>(negs[i].level)].neg_flat.push_back(negs[i].flat);
  return sel;
}

namespace detail {

// Flat tensor index of channel component `comp` within the per-anchor block
// at anchor-flat position fi.
inline Eigen::Index grid_index(int fi, int plane, int comps_per_anchor, int comp) {
  const int a = fi / plane;
  const int rem = fi % plane;
  return (static_cast<Eigen::Index>(a) * comps_per_anchor + comp) * plane + rem;
}

}  // namespace detail

struct SupervisedLossOptions {
  std::string cls_loss = "ce";
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double prob_clamp = 1e-7;
};

/// Classification term over positives plus sampled negatives and SmoothL1
/// over positive-anchor deltas, each normalized by max(1, num positives).
inline Var supervised_loss_var(Tape& tape, const std::vector<LevelVars>& levels,
                               const TrainingSelection& sel,
                               const SupervisedLossOptions& opts = {}) {
  if (levels.size() != sel.levels.size())
    throw std::invalid_argument("supervised_loss: level count mismatch");
  const double norm = 1.0 / static_cast<double>(std::max(1, sel.num_pos));

  auto gather_level_indexed = [&](bool foreground) {
    // Gathers must come from the right level tensor; rebuild per level.
    std::vector<Var> parts;
    for (std::size_t li = 0; li < levels.size(); ++li) {
      const auto& lv = levels[li];
      const auto& sl = sel.levels[li];
      const int plane = lv.hc * lv.wc;
      const int group = lv.num_classes + 1;
      std::vector<Eigen::Index> idx;
      if (foreground) {
        for (std::size_t i = 0; i < sl.pos_flat.size(); ++i)
          idx.push_back(detail::grid_index(sl.pos_flat[i], plane, group, sl.pos_class[i]));
      } else {
        for (int fi : sl.neg_flat) idx.push_back(detail::grid_index(fi, plane, group, 0));
      }
      if (!idx.empty()) parts.push_back(tape.gather(lv.cls, std::move(idx)));
    }
    return parts;
  };

  Var total = tape.leaf(Tensor::scalar(0.0), false);

  auto cls_term = [&](const std::vector<Var>& gathered, double alpha) {
    Var acc = tape.leaf(Tensor::scalar(0.0), false);
    for (Var p : gathered) {
      Var neg_log = tape.affine(tape.log_clamped(p, opts.prob_clamp), -1.0, 0.0);
      if (opts.cls_loss == "focal") {
        Var mod = tape.pow_const(tape.affine(p, -1.0, 1.0), opts.focal_gamma);
        acc = tape.add(acc, tape.affine(tape.sum(tape.mul(mod, neg_log)), alpha, 0.0));
      } else {
        acc = tape.add(acc, tape.sum(neg_log));
      }
    }
    return acc;
  };
  total = tape.add(total, cls_term(gather_level_indexed(true), opts.focal_alpha));
  total = tape.add(total, cls_term(gather_level_indexed(false), 1.0 - opts.focal_alpha));

  // Regression over positives.
  for (std::size_t li = 0; li < levels.size(); ++li) {
    const auto& lv = levels[li];
    const auto& sl = sel.levels[li];
    if (sl.pos_flat.empty()) continue;
    const int plane = lv.hc * lv.wc;
    std::vector<Eigen::Index> idx;
    Tensor targets(static_cast<int>(sl.pos_flat.size()) * 4, 1, 1);
    for (std::size_t i = 0; i < sl.pos_flat.size(); ++i) {
      const BoxDelta& t = sl.pos_target[i];
      const double comps[4] = {t.px, t.py, t.pw, t.ph};
      for (int comp = 0; comp < 4; ++comp) {
        idx.push_back(detail::grid_index(sl.pos_flat[i], plane, 4, comp));
        targets.data[static_cast<Eigen::Index>(i) * 4 + comp] = comps[comp];
      }
    }
    Var pred = tape.gather(lv.delta, std::move(idx));
    Var diff = tape.sub(pred, tape.leaf(std::move(targets), false));
    total = tape.add(total, tape.sum(tape.smooth_l1(diff)));
  }

  return tape.affine(total, norm, 0.0);
}

/// Value-route supervised loss over a materialized output.
inline double supervised_loss(const DetectorOutput& out, const AnchorAssignment& assign,
                              int neg_ratio, const SupervisedLossOptions& opts = {}) {
  Tape tape;
  auto levels = levels_to_tape(tape, out);
  std::vector<const Tensor*> cls_grids;
  for (const auto& lvl : out.levels) cls_grids.push_back(&lvl.cls);
  const int A = out.levels.empty() ? 0 : out.levels.front().anchors;
  const int C = out.levels.empty() ? 0 : out.levels.front().num_classes;
  TrainingSelection sel = select_training_anchors(assign, cls_grids, A, C, neg_ratio);
  return tape.scalar(supervised_loss_var(tape, levels, sel, opts));
}

}  // namespace ssmd
