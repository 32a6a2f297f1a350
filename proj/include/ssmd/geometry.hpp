#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace ssmd {

/// Axis-aligned box in center-size form (pixels). Corner form is only used
/// at file boundaries.
struct Box {
  double x = 0, y = 0, w = 0, h = 0;
};

/// A pre-defined reference box at a grid position.
struct Anchor {
  double x = 0, y = 0, w = 0, h = 0;
};

/// Regression parameterization of a box relative to an anchor:
/// unitless center offsets plus log-scale size ratios.
struct BoxDelta {
  double px = 0, py = 0, pw = 0, ph = 0;
};

struct CornerBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

inline CornerBox to_corner(const Box& b) {
  return {b.x - 0.5 * b.w, b.y - 0.5 * b.h, b.x + 0.5 * b.w, b.y + 0.5 * b.h};
}

inline Box to_center(const CornerBox& c) {
  return {0.5 * (c.x1 + c.x2), 0.5 * (c.y1 + c.y2), c.x2 - c.x1, c.y2 - c.y1};
}

namespace detail {
inline void require_positive_extent(double w, double h, const char* what) {
  if (!(w > 0.0) || !(h > 0.0))
    throw std::invalid_argument(std::string(what) + ": non-positive box extent");
}
}  // namespace detail

inline BoxDelta encode_box(const Box& box, const Anchor& anchor) {
  detail::require_positive_extent(box.w, box.h, "encode_box(box)");
  detail::require_positive_extent(anchor.w, anchor.h, "encode_box(anchor)");
  return {(box.x - anchor.x) / anchor.w, (box.y - anchor.y) / anchor.h,
          std::log(box.w / anchor.w), std::log(box.h / anchor.h)};
}

/// Log-ratios are clamped before exponentiation so an untrained network
/// cannot overflow the decoded size. `clamped`, when given, reports whether
/// the clamp fired.
inline constexpr double kDecodeLogClamp = 6.907755278982137;  // log(1000)

inline Box decode_box(const BoxDelta& d, const Anchor& anchor, bool* clamped = nullptr) {
  detail::require_positive_extent(anchor.w, anchor.h, "decode_box(anchor)");
  double pw = d.pw, ph = d.ph;
  bool hit = false;
  if (pw > kDecodeLogClamp) { pw = kDecodeLogClamp; hit = true; }
  if (ph > kDecodeLogClamp) { ph = kDecodeLogClamp; hit = true; }
  if (clamped) *clamped = hit;
  return {anchor.x + d.px * anchor.w, anchor.y + d.py * anchor.h,
          anchor.w * std::exp(pw), anchor.h * std::exp(ph)};
}

inline double iou(const Box& a, const Box& b) {
  const CornerBox ca = to_corner(a);
  const CornerBox cb = to_corner(b);
  const double iw = std::min(ca.x2, cb.x2) - std::max(ca.x1, cb.x1);
  const double ih = std::min(ca.y2, cb.y2) - std::max(ca.y1, cb.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Intersection over the area of `a` (the detection). Used as an optional
/// IoBB-style overlap criterion in evaluation.
inline double iobb(const Box& a, const Box& b) {
  const CornerBox ca = to_corner(a);
  const CornerBox cb = to_corner(b);
  const double iw = std::min(ca.x2, cb.x2) - std::max(ca.x1, cb.x1);
  const double ih = std::min(ca.y2, cb.y2) - std::max(ca.y1, cb.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double area = a.w * a.h;
  return area > 0.0 ? iw * ih / area : 0.0;
}

// ---------------------------------------------------------------------------
// Anchor grid

struct AnchorShape {
  double w = 0, h = 0;
};

struct AnchorLevel {
  int stride = 0;
  int hc = 0, wc = 0;                 // grid cells (rows, cols)
  std::vector<AnchorShape> shapes;    // A shapes per cell

  int anchors_per_cell() const { return static_cast<int>(shapes.size()); }
  int anchor_count() const { return anchors_per_cell() * hc * wc; }
  int flat_index(int a, int y, int x) const { return (a * hc + y) * wc + x; }

  Anchor anchor_at(int a, int y, int x) const {
    const AnchorShape& s = shapes[static_cast<std::size_t>(a)];
    return {(x + 0.5) * stride, (y + 0.5) * stride, s.w, s.h};
  }
};

/// Anchor lattice over a pyramid, levels ordered coarse-to-fine
/// (descending stride).
struct AnchorGrid {
  std::vector<AnchorLevel> levels;

  int total_anchors() const {
    int n = 0;
    for (const auto& l : levels) n += l.anchor_count();
    return n;
  }

  /// Anchor sizes are base*stride*scale with width/height set by the aspect
  /// ratio (ratio = w/h). Ratios map to themselves under a horizontal
  /// mirror, so the shape-index correspondence between flipped grids is the
  /// identity.
  static AnchorGrid build(int image_h, int image_w, const std::vector<int>& strides,
                          const std::vector<double>& scales,
                          const std::vector<double>& ratios, double base) {
    AnchorGrid g;
    for (int s : strides) {
      if (image_h % s != 0 || image_w % s != 0)
        throw std::invalid_argument("AnchorGrid: image dims must be stride multiples");
      AnchorLevel lvl;
      lvl.stride = s;
      lvl.hc = image_h / s;
      lvl.wc = image_w / s;
      for (double sc : scales)
        for (double r : ratios) {
          const double side = base * s * sc;
          lvl.shapes.push_back({side * std::sqrt(r), side / std::sqrt(r)});
        }
      g.levels.push_back(std::move(lvl));
    }
    for (std::size_t i = 1; i < g.levels.size(); ++i)
      if (g.levels[i].stride >= g.levels[i - 1].stride)
        throw std::invalid_argument("AnchorGrid: levels must be ordered coarse-to-fine");
    return g;
  }
};

// ---------------------------------------------------------------------------
// Anchor assignment

enum class AnchorLabel : int { kIgnore = -1, kNegative = 0 };  // >0: positive class id

struct AnchorAssignment {
  struct Level {
    std::vector<int> label;      // -1 ignore, 0 negative, >=1 positive class
    std::vector<int> gt_index;   // valid where label >= 1
    std::vector<BoxDelta> target;
  };
  std::vector<Level> levels;
  int num_positive = 0;
};

/// Threshold assignment with per-GT forced matching: anchors at max-IoU >=
/// pos_iou are positive, < neg_iou negative, in between ignored; afterwards
/// every ground-truth box claims its best not-yet-forced anchor so no GT is
/// left unmatched. Ties break toward the lowest (level, flat) index.
inline AnchorAssignment assign_anchors(const std::vector<Box>& gt_boxes,
                                       const std::vector<int>& gt_classes,
                                       const AnchorGrid& grid, double pos_iou,
                                       double neg_iou) {
  if (!(pos_iou > neg_iou)) throw std::invalid_argument("assign_anchors: pos_iou must exceed neg_iou");
  if (grid.levels.empty() || grid.total_anchors() == 0)
    throw std::invalid_argument("assign_anchors: empty anchor grid");
  if (gt_boxes.size() != gt_classes.size())
    throw std::invalid_argument("assign_anchors: boxes/classes size mismatch");

  AnchorAssignment out;
  out.levels.resize(grid.levels.size());
  for (std::size_t li = 0; li < grid.levels.size(); ++li) {
    const int n = grid.levels[li].anchor_count();
    out.levels[li].label.assign(static_cast<std::size_t>(n), 0);
    out.levels[li].gt_index.assign(static_cast<std::size_t>(n), -1);
    out.levels[li].target.assign(static_cast<std::size_t>(n), BoxDelta{});
  }
  if (gt_boxes.empty()) return out;  // all negative

  // Threshold pass.
  for (std::size_t li = 0; li < grid.levels.size(); ++li) {
    const AnchorLevel& lvl = grid.levels[li];
    auto& asg = out.levels[li];
    for (int a = 0; a < lvl.anchors_per_cell(); ++a)
      for (int y = 0; y < lvl.hc; ++y)
        for (int x = 0; x < lvl.wc; ++x) {
          const int fi = lvl.flat_index(a, y, x);
          const Anchor anc = lvl.anchor_at(a, y, x);
          const Box anchor_box{anc.x, anc.y, anc.w, anc.h};
          double best = -1.0;
          int best_gt = -1;
          for (std::size_t gi = 0; gi < gt_boxes.size(); ++gi) {
            const double v = iou(anchor_box, gt_boxes[gi]);
            if (v > best) { best = v; best_gt = static_cast<int>(gi); }
          }
          if (best >= pos_iou) {
            asg.label[static_cast<std::size_t>(fi)] = gt_classes[static_cast<std::size_t>(best_gt)];
            asg.gt_index[static_cast<std::size_t>(fi)] = best_gt;
            asg.target[static_cast<std::size_t>(fi)] =
                encode_box(gt_boxes[static_cast<std::size_t>(best_gt)], anc);
          } else if (best >= neg_iou) {
            asg.label[static_cast<std::size_t>(fi)] = -1;
          }
        }
  }

  // Forced matching, in GT order.
  std::vector<std::pair<int, int>> forced;  // (level, flat)
  for (std::size_t gi = 0; gi < gt_boxes.size(); ++gi) {
    double best = -1.0;
    int best_level = -1, best_flat = -1;
    Anchor best_anchor;
    for (std::size_t li = 0; li < grid.levels.size(); ++li) {
      const AnchorLevel& lvl = grid.levels[li];
      for (int a = 0; a < lvl.anchors_per_cell(); ++a)
        for (int y = 0; y < lvl.hc; ++y)
          for (int x = 0; x < lvl.wc; ++x) {
            const int fi = lvl.flat_index(a, y, x);
            if (std::find(forced.begin(), forced.end(),
                          std::make_pair(static_cast<int>(li), fi)) != forced.end())
              continue;
            const Anchor anc = lvl.anchor_at(a, y, x);
            const double v = iou({anc.x, anc.y, anc.w, anc.h}, gt_boxes[gi]);
            if (v > best) {
              best = v;
              best_level = static_cast<int>(li);
              best_flat = fi;
              best_anchor = anc;
            }
          }
    }
    if (best_level >= 0) {
      forced.emplace_back(best_level, best_flat);
      auto& asg = out.levels[static_cast<std::size_t>(best_level)];
      asg.label[static_cast<std::size_t>(best_flat)] = gt_classes[gi];
      asg.gt_index[static_cast<std::size_t>(best_flat)] = static_cast<int>(gi);
      asg.target[static_cast<std::size_t>(best_flat)] = encode_box(gt_boxes[gi], best_anchor);
    }
  }

  for (const auto& lvl : out.levels)
    for (int l : lvl.label)
      if (l >= 1) ++out.num_positive;
  return out;
}

// ---------------------------------------------------------------------------
// Box rotation (for keeping supervised targets aligned with the rotation
// augmentation)

struct RotatedBoxes {
  std::vector<Box> boxes;
  std::vector<int> kept;     // index into the input list, parallel to boxes
  std::vector<int> dropped;  // input indices rotated fully out of the image
};

/// Rotates each box by `angle_deg` around the image center and replaces it
/// with the axis-aligned hull of its four corners, clipped to the image.
/// Boxes whose clipped extent vanishes are dropped and reported.
inline RotatedBoxes rotate_boxes(const std::vector<Box>& boxes, double angle_deg,
                                 int image_w, int image_h) {
  if (std::abs(angle_deg) > 45.0)
    throw std::invalid_argument("rotate_boxes: |angle| must be <= 45 degrees");
  const double rad = angle_deg * M_PI / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cx = 0.5 * image_w, cy = 0.5 * image_h;
  RotatedBoxes out;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const CornerBox c = to_corner(boxes[i]);
    const double xs[4] = {c.x1, c.x2, c.x2, c.x1};
    const double ys[4] = {c.y1, c.y1, c.y2, c.y2};
    double x1 = 1e300, y1 = 1e300, x2 = -1e300, y2 = -1e300;
    for (int k = 0; k < 4; ++k) {
      const double dx = xs[k] - cx, dy = ys[k] - cy;
      const double rx = cx + cs * dx - sn * dy;
      const double ry = cy + sn * dx + cs * dy;
      x1 = std::min(x1, rx);
      y1 = std::min(y1, ry);
      x2 = std::max(x2, rx);
      y2 = std::max(y2, ry);
    }
    x1 = std::max(x1, 0.0);
    y1 = std::max(y1, 0.0);
    x2 = std::min(x2, static_cast<double>(image_w));
    y2 = std::min(y2, static_cast<double>(image_h));
    if (x2 - x1 <= 0.0 || y2 - y1 <= 0.0) {
      out.dropped.push_back(static_cast<int>(i));
      continue;
    }
    out.boxes.push_back(to_center({x1, y1, x2, y2}));
    out.kept.push_back(static_cast<int>(i));
  }
  return out;
}

}  // namespace ssmd
