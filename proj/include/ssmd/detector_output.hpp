#pragma once

#include <stdexcept>
#include <vector>

#include "ssmd/autodiff.hpp"
#include "ssmd/geometry.hpp"
#include "ssmd/tensor.hpp"

namespace ssmd {

/// One pyramid level of predictions. `cls` holds post-softmax probabilities
/// in per-anchor blocks of C+1 channels (background first); `delta` holds
/// per-anchor blocks of four channels (px, py, pw, ph).
struct LevelOutput {
  int stride = 0;
  int hc = 0, wc = 0;
  int anchors = 0;      // A
  int num_classes = 0;  // C (foreground)
  Tensor cls;           // (A*(C+1), hc, wc)
  Tensor delta;         // (A*4, hc, wc)
};

/// Multi-scale detector predictions, levels ordered coarse-to-fine.
struct DetectorOutput {
  int image_h = 0, image_w = 0;
  std::vector<LevelOutput> levels;
};

/// Tape-side counterpart of LevelOutput used while a graph is alive.
struct LevelVars {
  int stride = 0;
  int hc = 0, wc = 0;
  int anchors = 0;
  int num_classes = 0;
  Var cls;    // probabilities
  Var delta;
};

inline int delta_comp_for_horizontal_mirror() { return 0; }  // px
inline int delta_comp_for_vertical_mirror() { return 1; }    // py

/// Maps every prediction grid to its horizontal mirror: spatial column j
/// moves to column W-1-j, px is negated, class probabilities and the other
/// delta components are carried over unchanged. The anchor-shape index map
/// is the identity because aspect ratios are invariant under a horizontal
/// flip. Involution: applying this twice restores the input bit-for-bit.
inline DetectorOutput mirror_predictions(const DetectorOutput& out, int image_width,
                                         bool horizontal = true, bool vertical = false) {
  if (out.image_w != image_width)
    throw std::invalid_argument("mirror_predictions: image width mismatch");
  DetectorOutput m = out;
  for (auto& lvl : m.levels) {
    if (lvl.wc * lvl.stride != image_width)
      throw std::invalid_argument("mirror_predictions: level width inconsistent with image");
    lvl.cls = Tape::mirror_tensor(lvl.cls, lvl.num_classes + 1, -1, -1, horizontal, vertical);
    lvl.delta = Tape::mirror_tensor(lvl.delta, 4, delta_comp_for_horizontal_mirror(),
                                    delta_comp_for_vertical_mirror(), horizontal, vertical);
  }
  return m;
}

/// Same mapping recorded on a tape (used when gradients must flow through
/// the mirrored side, e.g. during adversarial synthesis).
inline std::vector<LevelVars> mirror_predictions_var(Tape& tape,
                                                     const std::vector<LevelVars>& levels,
                                                     bool horizontal = true,
                                                     bool vertical = false) {
  std::vector<LevelVars> out = levels;
  for (auto& lvl : out) {
    lvl.cls = tape.mirror_grid(lvl.cls, lvl.num_classes + 1, -1, -1, horizontal, vertical);
    lvl.delta = tape.mirror_grid(lvl.delta, 4, delta_comp_for_horizontal_mirror(),
                                 delta_comp_for_vertical_mirror(), horizontal, vertical);
  }
  return out;
}

inline DetectorOutput materialize(const Tape& tape, int image_h, int image_w,
                                  const std::vector<LevelVars>& levels) {
  DetectorOutput out;
  out.image_h = image_h;
  out.image_w = image_w;
  for (const auto& lv : levels) {
    LevelOutput lo;
    lo.stride = lv.stride;
    lo.hc = lv.hc;
    lo.wc = lv.wc;
    lo.anchors = lv.anchors;
    lo.num_classes = lv.num_classes;
    lo.cls = tape.val(lv.cls);
    lo.delta = tape.val(lv.delta);
    out.levels.push_back(std::move(lo));
  }
  return out;
}

}  // namespace ssmd
