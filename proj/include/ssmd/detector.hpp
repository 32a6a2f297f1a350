#pragma once

#include <array>
#include <cstdint>
#include <iostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmd/autodiff.hpp"
#include "ssmd/detector_output.hpp"
#include "ssmd/geometry.hpp"
#include "ssmd/nrb.hpp"
#include "ssmd/rng.hpp"
#include "ssmd/tensor.hpp"

namespace ssmd {

struct DetectorConfig {
  int num_classes = 2;   // foreground classes; background is index 0
  int in_channels = 1;

  // Backbone: stem at stride 1, then four pooled stages at /2../16.
  std::vector<int> widths = {8, 12, 16, 24, 32};  // stem + stage widths
  int blocks_per_stage = 1;

  int num_levels = 3;  // emitted pyramid levels (1..5)
  int scales = 3;      // S: levels spanned by the consistency loss (1, 3 or 5)

  int fpn_width = 16;
  int head_convs = 1;
  int head_width = 16;

  std::vector<double> anchor_scales = {1.0, 1.2599210498948732, 1.5874010519681994};
  std::vector<double> anchor_ratios = {0.5, 1.0, 2.0};
  double anchor_base = 2.0;  // anchor side = base * stride * scale

  bool nrb_enabled = false;
  NoisyResidualGate nrb;

  std::string cls_loss = "ce";  // "ce" or "focal"
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;

  double pos_iou = 0.5;
  double neg_iou = 0.4;
  int neg_ratio = 3;  // hard negatives per positive

  double bg_bias_init = 2.0;

  int anchors_per_cell() const {
    return static_cast<int>(anchor_scales.size() * anchor_ratios.size());
  }

  void validate() const {
    if (num_classes < 1) throw std::invalid_argument("config: num_classes must be >= 1");
    if (widths.size() != 5) throw std::invalid_argument("config: widths needs stem + 4 stages");
    if (num_levels < 1 || num_levels > 5)
      throw std::invalid_argument("config: num_levels must be in [1,5]");
    if (scales != 1 && scales != 3 && scales != 5)
      throw std::invalid_argument("config: scales must be 1, 3 or 5");
    if (scales > num_levels)
      throw std::invalid_argument("config: scales cannot exceed num_levels");
    if (anchors_per_cell() < 1) throw std::invalid_argument("config: need at least one anchor");
    if (!(pos_iou > neg_iou)) throw std::invalid_argument("config: pos_iou must exceed neg_iou");
    if (cls_loss != "ce" && cls_loss != "focal")
      throw std::invalid_argument("config: cls_loss must be 'ce' or 'focal'");
    if (!(nrb.sigma >= 0.0)) throw std::invalid_argument("config: nrb sigma must be >= 0");
    if (!(nrb.gamma > 0.0)) throw std::invalid_argument("config: nrb gamma must be > 0");
  }
};

/// Flat, ordered collection of every learnable parameter. Student and
/// teacher share one layout.
struct ModelWeights {
  std::vector<Tensor> params;

  Eigen::Index scalar_count() const {
    Eigen::Index n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }
};

struct Detection {
  Box box;
  int cls = 0;
  double score = 0.0;
};

/// Greedy per-class NMS over score-descending candidates; a candidate is
/// suppressed when it overlaps an already-kept candidate of the same class
/// with IoU above the threshold. Returns kept indices in input order.
inline std::vector<int> nms(const std::vector<Detection>& sorted, double iou_thresh) {
  std::vector<int> kept;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    bool keep = true;
    for (int k : kept) {
      if (sorted[static_cast<std::size_t>(k)].cls != sorted[i].cls) continue;
      if (iou(sorted[static_cast<std::size_t>(k)].box, sorted[i].box) > iou_thresh) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(static_cast<int>(i));
  }
  return kept;
}

/// Anchor-based single-stage detector: pooled residual backbone, FPN neck,
/// shared classification/regression towers. All downsampling is 2x2 average
/// pooling and all convolutions are stride 1, so the network commutes with
/// horizontal mirroring whenever its kernels do.
class Detector {
 public:
  explicit Detector(DetectorConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_layout();
  }

  const DetectorConfig& config() const { return cfg_; }
  const std::vector<std::array<int, 3>>& param_shapes() const { return shapes_; }
  std::size_t param_tensor_count() const { return shapes_.size(); }

  Eigen::Index param_count() const {
    Eigen::Index n = 0;
    for (const auto& s : shapes_) n += static_cast<Eigen::Index>(s[0]) * s[1] * s[2];
    return n;
  }

  /// Strides of the emitted pyramid, coarse-to-fine.
  std::vector<int> level_strides() const {
    std::vector<int> fine_to_coarse = tap_strides();
    return {fine_to_coarse.rbegin(), fine_to_coarse.rend()};
  }

  int coarsest_stride() const { return level_strides().front(); }

  AnchorGrid anchor_grid(int image_h, int image_w) const {
    return AnchorGrid::build(image_h, image_w, level_strides(), cfg_.anchor_scales,
                             cfg_.anchor_ratios, cfg_.anchor_base);
  }

  ModelWeights init_weights(std::uint64_t seed, std::string_view stream = "init") const {
    std::mt19937_64 rng = make_rng(seed, stream);
    ModelWeights w;
    w.params.reserve(shapes_.size());
    for (std::size_t i = 0; i < shapes_.size(); ++i) {
      const auto& s = shapes_[i];
      Tensor t(s[0], s[1], s[2]);
      const Kind kind = kinds_[i];
      if (kind == Kind::kConvWeight) {
        const double stddev = std::sqrt(2.0 / static_cast<double>(s[1]));
        t = Tensor::gaussian(s[0], s[1], s[2], 0.0, stddev, rng);
      } else if (kind == Kind::kOutConvWeight) {
        // Head output layers start near zero so early predictions are driven
        // by the bias prior rather than random logits.
        t = Tensor::gaussian(s[0], s[1], s[2], 0.0, 0.01, rng);
      } else if (kind == Kind::kClsBias) {
        // Start background-heavy so early predictions are mostly background.
        const int group = cfg_.num_classes + 1;
        for (int c = 0; c < s[0]; ++c)
          if (c % group == 0) t.data[c] = cfg_.bg_bias_init;
      }
      // kBias and kNrbProj stay zero (gates open at sigmoid(0) = 0.5).
      w.params.push_back(std::move(t));
    }
    return w;
  }

  /// Registers every weight tensor on the tape. Pass requires_grad=false for
  /// a teacher: no gradient will ever reach (or be stored for) its weights.
  std::vector<Var> weights_to_tape(Tape& tape, const ModelWeights& w,
                                   bool requires_grad) const {
    if (w.params.size() != shapes_.size())
      throw std::invalid_argument("weights_to_tape: parameter layout mismatch");
    std::vector<Var> vars;
    vars.reserve(w.params.size());
    for (std::size_t i = 0; i < w.params.size(); ++i) {
      const auto& s = shapes_[i];
      if (w.params[i].c != s[0] || w.params[i].h != s[1] || w.params[i].w != s[2])
        throw std::invalid_argument("weights_to_tape: tensor shape mismatch at index " +
                                    std::to_string(i));
      vars.push_back(tape.leaf(w.params[i], requires_grad));
    }
    return vars;
  }

  /// Full differentiable forward pass. The noise gates fire only when both
  /// train_mode and noise_enabled are set (and the config enables them).
  std::vector<LevelVars> forward(Tape& tape, const std::vector<Var>& params, Var image,
                                 bool train_mode, bool noise_enabled,
                                 std::mt19937_64* noise_rng) const {
    const Tensor& img = tape.val(image);
    if (img.c != cfg_.in_channels)
      throw std::invalid_argument("forward: image channel count mismatch");
    const int coarse = coarsest_stride();
    if (img.h % coarse != 0 || img.w % coarse != 0 || img.h < coarse || img.w < coarse)
      throw std::invalid_argument("forward: image dims must be positive multiples of stride " +
                                  std::to_string(coarse));
    const bool noise = train_mode && noise_enabled && cfg_.nrb_enabled;
    if (noise && noise_rng == nullptr)
      throw std::invalid_argument("forward: noise enabled but no rng supplied");

    std::size_t pi = 0;
    auto next = [&](void) -> Var { return params[pi++]; };
    auto conv = [&](Var x, int k, int pad) {
      Var w = next();
      Var b = next();
      return tape.conv2d(x, w, b, k, pad);
    };

    // Stem + stages.
    Var x = tape.relu(conv(image, 3, 1));
    std::vector<Var> stage_out;
    for (int s = 1; s <= 4; ++s) {
      x = tape.avg_pool2(x);
      x = tape.relu(conv(x, 3, 1));
      for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
        Var y = tape.relu(conv(x, 3, 1));
        y = conv(y, 3, 1);
        x = tape.relu(tape.add(x, y));
      }
      {
        Var pw = next();
        Var pb = next();
        if (noise) x = nrb_apply(tape, cfg_.nrb, x, pw, pb, *noise_rng, true);
      }
      stage_out.push_back(x);
    }
    // Extra pooled taps below /16 when more than three levels are emitted.
    for (int e = 0; e < num_extra_levels(); ++e) {
      x = tape.avg_pool2(x);
      x = tape.relu(conv(x, 3, 1));
      stage_out.push_back(x);
    }

    // Selected taps, fine-to-coarse.
    std::vector<Var> taps;
    const int total = static_cast<int>(stage_out.size());
    for (int i = total - cfg_.num_levels; i < total; ++i)
      taps.push_back(stage_out[static_cast<std::size_t>(i)]);

    // FPN: laterals then top-down accumulation, then smoothing.
    std::vector<Var> lateral;
    for (Var t : taps) lateral.push_back(conv(t, 1, 0));
    std::vector<Var> merged(lateral.size());
    for (int i = static_cast<int>(lateral.size()) - 1; i >= 0; --i) {
      merged[static_cast<std::size_t>(i)] = lateral[static_cast<std::size_t>(i)];
      if (i + 1 < static_cast<int>(lateral.size()))
        merged[static_cast<std::size_t>(i)] =
            tape.add(merged[static_cast<std::size_t>(i)],
                     tape.upsample2(merged[static_cast<std::size_t>(i + 1)]));
    }
    std::vector<Var> pyramid;
    for (Var m : merged) pyramid.push_back(conv(m, 3, 1));

    // Shared towers: weights are read once and reused across levels.
    struct ConvP {
      Var w, b;
    };
    std::vector<ConvP> cls_tower, reg_tower;
    for (int i = 0; i < cfg_.head_convs; ++i) cls_tower.push_back({next(), next()});
    ConvP cls_out{next(), next()};
    for (int i = 0; i < cfg_.head_convs; ++i) reg_tower.push_back({next(), next()});
    ConvP reg_out{next(), next()};
    if (pi != params.size())
      throw std::invalid_argument("forward: parameter cursor mismatch");

    const int A = cfg_.anchors_per_cell();
    const std::vector<int> strides = level_strides();
    std::vector<LevelVars> out;
    // Levels are emitted coarse-to-fine (pyramid is fine-to-coarse).
    for (int li = static_cast<int>(pyramid.size()) - 1; li >= 0; --li) {
      Var p = pyramid[static_cast<std::size_t>(li)];
      Var tc = p;
      for (const auto& cp : cls_tower) tc = tape.relu(tape.conv2d(tc, cp.w, cp.b, 3, 1));
      Var logits = tape.conv2d(tc, cls_out.w, cls_out.b, 3, 1);
      Var tr = p;
      for (const auto& rp : reg_tower) tr = tape.relu(tape.conv2d(tr, rp.w, rp.b, 3, 1));
      Var delta = tape.conv2d(tr, reg_out.w, reg_out.b, 3, 1);

      LevelVars lv;
      lv.anchors = A;
      lv.num_classes = cfg_.num_classes;
      const Tensor& pv = tape.val(p);
      lv.hc = pv.h;
      lv.wc = pv.w;
      lv.stride = strides[static_cast<std::size_t>(static_cast<int>(pyramid.size()) - 1 - li)];
      lv.cls = tape.softmax_groups(logits, cfg_.num_classes + 1);
      lv.delta = delta;
      out.push_back(lv);
    }
    return out;
  }

  DetectorOutput forward_value(const ModelWeights& w, const Tensor& image,
                               bool train_mode = false, bool noise_enabled = false,
                               std::mt19937_64* noise_rng = nullptr) const {
    Tape tape;
    std::vector<Var> params = weights_to_tape(tape, w, false);
    Var img = tape.leaf(image, false);
    auto levels = forward(tape, params, img, train_mode, noise_enabled, noise_rng);
    return materialize(tape, image.h, image.w, levels);
  }

  /// Decode + threshold + per-class NMS; results sorted by descending
  /// score. Inference always runs the student-path forward with noise off.
  std::vector<Detection> detect(const ModelWeights& w, const Tensor& image,
                                double score_thresh, double nms_iou,
                                int max_detections = 100) const {
    DetectorOutput out = forward_value(w, image);
    return decode_detections(out, score_thresh, nms_iou, max_detections);
  }

  std::vector<Detection> decode_detections(const DetectorOutput& out, double score_thresh,
                                           double nms_iou, int max_detections) const {
    const int A = cfg_.anchors_per_cell();
    const int group = cfg_.num_classes + 1;
    std::vector<Detection> cand;
    int clamp_count = 0;
    const AnchorGrid grid = anchor_grid(out.image_h, out.image_w);
    for (const auto& lvl : out.levels) {
      const AnchorLevel* matched = nullptr;
      for (const auto& gl : grid.levels)
        if (gl.stride == lvl.stride && gl.hc == lvl.hc && gl.wc == lvl.wc) {
          matched = &gl;
          break;
        }
      if (!matched) throw std::invalid_argument("decode_detections: level/grid mismatch");
      const AnchorLevel& alvl = *matched;
      for (int a = 0; a < A; ++a)
        for (int y = 0; y < lvl.hc; ++y)
          for (int x = 0; x < lvl.wc; ++x) {
            BoxDelta d{lvl.delta.at(a * 4 + 0, y, x), lvl.delta.at(a * 4 + 1, y, x),
                       lvl.delta.at(a * 4 + 2, y, x), lvl.delta.at(a * 4 + 3, y, x)};
            for (int c = 1; c <= cfg_.num_classes; ++c) {
              const double score = lvl.cls.at(a * group + c, y, x);
              if (score < score_thresh) continue;
              bool clamped = false;
              Box b = decode_box(d, alvl.anchor_at(a, y, x), &clamped);
              if (clamped) ++clamp_count;
              CornerBox cb = to_corner(b);
              cb.x1 = std::max(cb.x1, 0.0);
              cb.y1 = std::max(cb.y1, 0.0);
              cb.x2 = std::min(cb.x2, static_cast<double>(out.image_w));
              cb.y2 = std::min(cb.y2, static_cast<double>(out.image_h));
              if (cb.x2 - cb.x1 <= 0.0 || cb.y2 - cb.y1 <= 0.0) continue;
              cand.push_back({to_center(cb), c, score});
            }
          }
    }
    if (clamp_count > 0)
      std::cerr << "[ssmd] decode: clamped " << clamp_count << " oversized box deltas\n";
    std::stable_sort(cand.begin(), cand.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<int> kept = nms(cand, nms_iou);
    std::vector<Detection> out_dets;
    for (int k : kept) {
      out_dets.push_back(cand[static_cast<std::size_t>(k)]);
      if (static_cast<int>(out_dets.size()) >= max_detections) break;
    }
    return out_dets;
  }

 private:
  enum class Kind { kConvWeight, kOutConvWeight, kBias, kClsBias, kNrbProj };

  int num_extra_levels() const { return std::max(0, cfg_.num_levels - 3); }

  std::vector<int> tap_strides() const {
    std::vector<int> all = {4, 8, 16};
    int s = 16;
    for (int e = 0; e < num_extra_levels(); ++e) {
      s *= 2;
      all.push_back(s);
    }
    return {all.end() - cfg_.num_levels, all.end()};
  }

  void declare(Kind kind, int c, int h, int w) {
    shapes_.push_back({c, h, w});
    kinds_.push_back(kind);
  }

  void declare_conv(int cin, int cout, int k, Kind wkind = Kind::kConvWeight,
                    Kind bkind = Kind::kBias) {
    declare(wkind, cout, cin * k * k, 1);
    declare(bkind, cout, 1, 1);
  }

  void build_layout() {
    const auto& wd = cfg_.widths;
    declare_conv(cfg_.in_channels, wd[0], 3);
    for (int s = 1; s <= 4; ++s) {
      declare_conv(wd[static_cast<std::size_t>(s - 1)], wd[static_cast<std::size_t>(s)], 3);
      for (int b = 0; b < cfg_.blocks_per_stage; ++b) {
        declare_conv(wd[static_cast<std::size_t>(s)], wd[static_cast<std::size_t>(s)], 3);
        declare_conv(wd[static_cast<std::size_t>(s)], wd[static_cast<std::size_t>(s)], 3);
      }
      // NRB projection: always part of the layout so the EMA tracker and
      // checkpoints are independent of the runtime noise flag.
      declare(Kind::kNrbProj, wd[static_cast<std::size_t>(s)], wd[static_cast<std::size_t>(s)], 1);
      declare(Kind::kNrbProj, wd[static_cast<std::size_t>(s)], 1, 1);
    }
    for (int e = 0; e < num_extra_levels(); ++e) declare_conv(wd[4], wd[4], 3);

    const std::vector<int> taps = tap_strides();
    std::vector<int> tap_widths;
    for (int t : taps) {
      if (t == 4) tap_widths.push_back(wd[2]);
      else if (t == 8) tap_widths.push_back(wd[3]);
      else tap_widths.push_back(wd[4]);
    }
    for (int w : tap_widths) declare_conv(w, cfg_.fpn_width, 1);
    for (std::size_t i = 0; i < taps.size(); ++i) declare_conv(cfg_.fpn_width, cfg_.fpn_width, 3);

    const int A = cfg_.anchors_per_cell();
    int cin = cfg_.fpn_width;
    for (int i = 0; i < cfg_.head_convs; ++i) {
      declare_conv(cin, cfg_.head_width, 3);
      cin = cfg_.head_width;
    }
    declare_conv(cin, A * (cfg_.num_classes + 1), 3, Kind::kOutConvWeight, Kind::kClsBias);
    cin = cfg_.fpn_width;
    for (int i = 0; i < cfg_.head_convs; ++i) {
      declare_conv(cin, cfg_.head_width, 3);
      cin = cfg_.head_width;
    }
    declare_conv(cin, A * 4, 3, Kind::kOutConvWeight, Kind::kBias);
  }

  DetectorConfig cfg_;
  std::vector<std::array<int, 3>> shapes_;
  std::vector<Kind> kinds_;
};

}  // namespace ssmd
