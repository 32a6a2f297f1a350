#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "ssmd/geometry.hpp"
#include "ssmd/tensor.hpp"

namespace ssmd {

struct AugmentConfig {
  double max_rotation = 10.0;  // degrees
  int cutout_n = 5;
  int cutout_s = 70;           // side length at the reference resolution
  int cutout_reference = 448;  // reference resolution for s
  bool cutout_enabled = true;
  bool hflip_teacher = true;   // teacher view is the horizontal mirror
  bool vflip_teacher = false;  // optional extra vertical flip, off by default
  // Base random flip shared by BOTH views (the default augmentation every
  // training mode gets); the teacher's extra flip on top of it is what
  // defines the view relation.
  bool base_random_flip = false;
  double fill = 0.0;           // dataset mean in the image's intensity space

  void validate() const {
    if (max_rotation < 0.0 || max_rotation > 45.0)
      throw std::invalid_argument("augment: max_rotation must be in [0, 45]");
    if (cutout_n < 0 || cutout_s < 0)
      throw std::invalid_argument("augment: cutout n and s must be >= 0");
  }
};

inline Tensor hflip_image(const Tensor& img) {
  Tensor out(img.c, img.h, img.w);
  for (int c = 0; c < img.c; ++c)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) out.at(c, y, x) = img.at(c, y, img.w - 1 - x);
  return out;
}

inline Tensor vflip_image(const Tensor& img) {
  Tensor out(img.c, img.h, img.w);
  for (int c = 0; c < img.c; ++c)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) out.at(c, y, x) = img.at(c, img.h - 1 - y, x);
  return out;
}

/// Rotation around the image center with bilinear sampling; samples falling
/// outside the source are filled with `fill`. The box-side counterpart is
/// rotate_boxes(), which applies the same forward map to box corners.
inline Tensor rotate_image(const Tensor& img, double angle_deg, double fill) {
  if (angle_deg == 0.0) return img;
  const double rad = angle_deg * M_PI / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cx = 0.5 * img.w, cy = 0.5 * img.h;
  Tensor out(img.c, img.h, img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      // Inverse map of the forward rotation used for boxes.
      const double px = x + 0.5 - cx, py = y + 0.5 - cy;
      const double sx = cx + cs * px + sn * py - 0.5;
      const double sy = cy - sn * px + cs * py - 0.5;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      for (int c = 0; c < img.c; ++c) {
        auto sample = [&](int yy, int xx) {
          if (yy < 0 || yy >= img.h || xx < 0 || xx >= img.w) return fill;
          return img.at(c, yy, xx);
        };
        const double v = (1 - fy) * ((1 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1)) +
                         fy * ((1 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
        out.at(c, y, x) = v;
      }
    }
  return out;
}

/// Masks out n s-by-s axis-aligned squares (clipped at the borders) with the
/// given fill value. Positions are uniform over the image.
inline Tensor cutout(const Tensor& img, int n, int s, std::mt19937_64& rng, double fill) {
  if (n < 0 || s < 0) throw std::invalid_argument("cutout: n and s must be >= 0");
  if (static_cast<long>(n) * s * s >= static_cast<long>(img.h) * img.w)
    throw std::invalid_argument("cutout: total mask area must stay below the image area");
  Tensor out = img;
  if (n == 0 || s == 0) return out;
  std::uniform_int_distribution<int> dx(0, img.w - 1), dy(0, img.h - 1);
  for (int i = 0; i < n; ++i) {
    const int cx = dx(rng), cy = dy(rng);
    const int x1 = std::max(0, cx - s / 2), x2 = std::min(img.w, cx - s / 2 + s);
    const int y1 = std::max(0, cy - s / 2), y2 = std::min(img.h, cy - s / 2 + s);
    for (int c = 0; c < img.c; ++c)
      for (int y = y1; y < y2; ++y)
        for (int x = x1; x < x2; ++x) out.at(c, y, x) = fill;
  }
  return out;
}

/// The paired views of one source image:
///   student = cutout(rotate(x))
///   teacher = cutout(flip(rotate(x)))      (adversarial noise is added later)
/// The rotation angle is shared so the inter-view geometric map is a pure
/// horizontal mirror and the grid correspondence is exact.
struct ViewPair {
  Tensor student_view;
  Tensor teacher_view;
  std::vector<Box> student_boxes;   // rotated GT, only for labeled samples
  std::vector<int> student_classes;
  std::vector<int> dropped_boxes;   // input indices lost to the rotation
  double angle_deg = 0.0;
  bool labeled = false;
  bool mirror_horizontal = true;
  bool mirror_vertical = false;
};

inline int scaled_cutout_side(const AugmentConfig& cfg, int image_w) {
  return static_cast<int>(std::lround(static_cast<double>(cfg.cutout_s) * image_w /
                                      static_cast<double>(cfg.cutout_reference)));
}

inline ViewPair build_views(const Tensor& image, const std::vector<Box>* boxes,
                            const std::vector<int>* classes, const AugmentConfig& cfg,
                            std::mt19937_64& rng) {
  cfg.validate();
  ViewPair vp;
  vp.labeled = boxes != nullptr;
  vp.mirror_horizontal = cfg.hflip_teacher;
  vp.mirror_vertical = cfg.vflip_teacher;

  const Tensor* source = &image;
  Tensor flipped_source;
  std::vector<Box> flipped_boxes;
  const std::vector<Box>* source_boxes = boxes;
  if (cfg.base_random_flip && std::uniform_int_distribution<int>(0, 1)(rng) == 1) {
    flipped_source = hflip_image(image);
    source = &flipped_source;
    if (boxes) {
      flipped_boxes = *boxes;
      for (auto& b : flipped_boxes) b.x = image.w - b.x;
      source_boxes = &flipped_boxes;
    }
  }

  double angle = 0.0;
  if (cfg.max_rotation > 0.0) {
    std::uniform_real_distribution<double> d(-cfg.max_rotation, cfg.max_rotation);
    angle = d(rng);
  }

  Tensor rotated = rotate_image(*source, angle, cfg.fill);
  if (vp.labeled) {
    RotatedBoxes rb = rotate_boxes(*source_boxes, angle, image.w, image.h);
    if (rb.boxes.empty() && !source_boxes->empty()) {
      // Every target left the frame: fall back to the unrotated sample.
      angle = 0.0;
      rotated = *source;
      rb = rotate_boxes(*source_boxes, 0.0, image.w, image.h);
    }
    vp.student_boxes = rb.boxes;
    vp.dropped_boxes = rb.dropped;
    if (classes) {
      for (int k : rb.kept) vp.student_classes.push_back((*classes)[static_cast<std::size_t>(k)]);
    }
  }
  vp.angle_deg = angle;

  Tensor teacher_pre = cfg.hflip_teacher ? hflip_image(rotated) : rotated;
  if (cfg.vflip_teacher) teacher_pre = vflip_image(teacher_pre);

  const int s = scaled_cutout_side(cfg, image.w);
  if (cfg.cutout_enabled && cfg.cutout_n > 0 && s > 0) {
    vp.student_view = cutout(rotated, cfg.cutout_n, s, rng, cfg.fill);
    vp.teacher_view = cutout(teacher_pre, cfg.cutout_n, s, rng, cfg.fill);
  } else {
    vp.student_view = rotated;
    vp.teacher_view = teacher_pre;
  }
  return vp;
}

/// Plain supervised-baseline augmentation: shared rotation plus an optional
/// random horizontal flip of image and targets.
struct AugmentedSample {
  Tensor image;
  std::vector<Box> boxes;
  std::vector<int> classes;
};

inline AugmentedSample augment_supervised(const Tensor& image, const std::vector<Box>& boxes,
                                          const std::vector<int>& classes,
                                          const AugmentConfig& cfg, bool random_flip,
                                          std::mt19937_64& rng) {
  cfg.validate();
  AugmentedSample out;
  double angle = 0.0;
  if (cfg.max_rotation > 0.0) {
    std::uniform_real_distribution<double> d(-cfg.max_rotation, cfg.max_rotation);
    angle = d(rng);
  }
  Tensor rotated = rotate_image(image, angle, cfg.fill);
  RotatedBoxes rb = rotate_boxes(boxes, angle, image.w, image.h);
  if (rb.boxes.empty() && !boxes.empty()) {
    angle = 0.0;
    rotated = image;
    rb = rotate_boxes(boxes, 0.0, image.w, image.h);
  }
  out.image = std::move(rotated);
  out.boxes = rb.boxes;
  for (int k : rb.kept) out.classes.push_back(classes[static_cast<std::size_t>(k)]);

  bool flip = false;
  if (random_flip) flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  if (flip) {
    out.image = hflip_image(out.image);
    for (auto& b : out.boxes) b.x = image.w - b.x;
  }
  const int s = scaled_cutout_side(cfg, image.w);
  if (cfg.cutout_enabled && cfg.cutout_n > 0 && s > 0)
    out.image = cutout(out.image, cfg.cutout_n, s, rng, cfg.fill);
  return out;
}

}  // namespace ssmd
