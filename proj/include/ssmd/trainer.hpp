#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ssmd/adversarial.hpp"
#include "ssmd/augment.hpp"
#include "ssmd/config.hpp"
#include "ssmd/data.hpp"
#include "ssmd/detector.hpp"
#include "ssmd/errors.hpp"
#include "ssmd/evaluation.hpp"
#include "ssmd/losses.hpp"
#include "ssmd/rng.hpp"
#include "ssmd/util.hpp"

namespace ssmd {

// ---------------------------------------------------------------------------
// EMA teacher

struct EmaTracker {
  double alpha = 0.99;
  ModelWeights teacher;
};

/// theta_t <- alpha * theta_t + (1 - alpha) * theta_s, element-wise.
inline void ema_update(EmaTracker& tracker, const ModelWeights& student) {
  if (tracker.teacher.params.size() != student.params.size())
    throw std::invalid_argument("ema_update: parameter layout mismatch");
  for (std::size_t i = 0; i < student.params.size(); ++i) {
    Tensor& t = tracker.teacher.params[i];
    const Tensor& s = student.params[i];
    if (!t.same_shape(s)) throw std::invalid_argument("ema_update: tensor shape mismatch");
    t.data = tracker.alpha * t.data + (1.0 - tracker.alpha) * s.data;
  }
}

// ---------------------------------------------------------------------------
// Consistency ramp

/// Ramp-up over the first quarter, plateau at 1, ramp-down over the last
/// quarter. The default ramp-down exp(-12.5(1-4(N-j)/N)^2) is continuous at
/// 3N/4 and reaches exp(-12.5) at j=N; the alternative branch replaces 4
/// with 7 and is kept behind a flag for comparison.
inline double lambda_at(double j, double n, bool literal_rampdown = false) {
  if (!(n > 0.0) || j < 0.0 || j > n)
    throw std::invalid_argument("lambda_at: need 0 <= j <= N, N > 0");
  if (j < n / 4.0) {
    const double u = 1.0 - 4.0 * j / n;
    return std::exp(-5.0 * u * u);
  }
  if (j < 3.0 * n / 4.0) return 1.0;
  const double k = literal_rampdown ? 7.0 : 4.0;
  const double u = 1.0 - k * (n - j) / n;
  return std::exp(-12.5 * u * u);
}

struct Schedule {
  long total_iters = 0;
  long iter = 0;
  bool literal_rampdown = false;

  double lambda() const {
    return lambda_at(static_cast<double>(iter), static_cast<double>(total_iters),
                     literal_rampdown);
  }
};

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  double lr = 1e-5;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long t = 0;
  std::vector<Tensor> m, v;

  void init_like(const ModelWeights& w) {
    m.clear();
    v.clear();
    for (const auto& p : w.params) {
      m.emplace_back(p.c, p.h, p.w);
      v.emplace_back(p.c, p.h, p.w);
    }
    t = 0;
  }

  void step(ModelWeights& w, const std::vector<Tensor>& grads, double lr_now) {
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < w.params.size(); ++i) {
      m[i].data = beta1 * m[i].data + (1.0 - beta1) * grads[i].data;
      v[i].data = beta2 * v[i].data + (1.0 - beta2) * grads[i].data.square();
      w.params[i].data -= lr_now * (m[i].data / c1) / ((v[i].data / c2).sqrt() + eps);
    }
  }
};

// ---------------------------------------------------------------------------
// Train state + step

struct TrainState {
  ModelWeights student;
  EmaTracker ema;
  AdamState opt;
  long iteration = 0;
  std::uint64_t seed = 1;
  double best_val_map = -1.0;
  long best_val_iter = -1;
};

struct StepMetrics {
  double loss_sup = 0.0;
  double loss_cont = 0.0;
  double lambda = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

namespace detail {

struct PreparedSample {
  Tensor student_view;
  Tensor teacher_input;
  std::vector<Box> boxes;
  std::vector<int> classes;
  bool labeled = false;
  bool mirror_h = true, mirror_v = false;
};

struct SampleGrads {
  std::vector<Tensor> grads;
  double sup = 0.0, cont = 0.0;
};

}  // namespace detail

inline double current_lr(const RunConfig& cfg, long iter, long total_iters) {
  const long drop_at = static_cast<long>(std::floor(cfg.lr_drop_at * total_iters));
  return (total_iters > 0 && iter >= drop_at) ? cfg.lr * cfg.lr_drop_factor : cfg.lr;
}

/// One optimization step over a labeled and an unlabeled batch:
///   1. EMA teacher update from the current student;
///   2. paired-view construction (shared rotation, teacher flip, cutout);
///   3. adversarial synthesis against the teacher inputs;
///   4. supervised + lambda-weighted consistency loss, backward, Adam on the
///      student only.
inline StepMetrics train_step(TrainState& st, const Detector& det, const RunConfig& cfg,
                              const Dataset& ds,
                              const std::vector<const DataSample*>& labeled,
                              const std::vector<const DataSample*>& unlabeled,
                              const Schedule& sched) {
  if (cfg.consistency_enabled && labeled.size() != unlabeled.size())
    throw std::invalid_argument("train_step: batches must have equal size");
  ema_update(st.ema, st.student);

  const double lambda = cfg.consistency_enabled ? sched.lambda() : 0.0;
  const long iter = st.iteration;
  const int b_l = static_cast<int>(labeled.size());
  const int b_u = cfg.consistency_enabled ? static_cast<int>(unlabeled.size()) : 0;
  const int total = b_l + b_u;

  AugmentConfig aug = cfg.augment;
  aug.fill = 0.0;  // dataset mean in standardized intensity space
  aug.base_random_flip = cfg.student_random_flip;

  ConsistencyOptions copts;
  copts.adaptive = cfg.adaptive_weight;
  copts.levels = cfg.detector.scales;
  copts.prob_clamp = cfg.prob_clamp;

  // View construction + adversarial synthesis, per slot.
  std::vector<detail::PreparedSample> prep(static_cast<std::size_t>(total));
  for (int slot = 0; slot < total; ++slot) {
    const bool is_labeled = slot < b_l;
    const DataSample& raw = is_labeled ? *labeled[static_cast<std::size_t>(slot)]
                                       : *unlabeled[static_cast<std::size_t>(slot - b_l)];
    const Tensor img = ds.preprocess(raw.image);
    auto& p = prep[static_cast<std::size_t>(slot)];
    p.labeled = is_labeled;
    std::mt19937_64 rng_aug = make_rng(st.seed, "augment", static_cast<std::uint64_t>(iter),
                                       static_cast<std::uint64_t>(slot));
    if (cfg.consistency_enabled) {
      ViewPair vp = build_views(img, is_labeled ? &raw.boxes : nullptr,
                                is_labeled ? &raw.classes : nullptr, aug, rng_aug);
      p.student_view = std::move(vp.student_view);
      p.teacher_input = std::move(vp.teacher_view);
      p.boxes = std::move(vp.student_boxes);
      p.classes = std::move(vp.student_classes);
      p.mirror_h = vp.mirror_horizontal;
      p.mirror_v = vp.mirror_vertical;
    } else {
      AugmentedSample as =
          augment_supervised(img, raw.boxes, raw.classes, aug, cfg.student_random_flip, rng_aug);
      p.student_view = std::move(as.image);
      p.boxes = std::move(as.boxes);
      p.classes = std::move(as.classes);
    }
  }

  if (cfg.consistency_enabled && cfg.adversarial_enabled) {
    parallel_for(total, [&](int slot) {
      auto& p = prep[static_cast<std::size_t>(slot)];
      // Mask and loss use the student's predictions on the clean views;
      // this extra pass runs with feature noise off.
      DetectorOutput student_out = det.forward_value(st.student, p.student_view);
      std::mt19937_64 rng_adv = make_rng(st.seed, "adversarial",
                                         static_cast<std::uint64_t>(iter),
                                         static_cast<std::uint64_t>(slot));
      AdversarialState adv =
          synthesize(cfg.perturbation, det, st.ema.teacher, student_out, p.teacher_input,
                     copts, rng_adv, p.mirror_h, p.mirror_v);
      p.teacher_input.data += adv.r_adv.data;
    });
  }

  // Per-sample forward/backward; gradients reduced in slot order.
  const AnchorGrid grid = det.anchor_grid(prep[0].student_view.h, prep[0].student_view.w);
  std::vector<detail::SampleGrads> results(static_cast<std::size_t>(total));
  parallel_for(total, [&](int slot) {
    auto& p = prep[static_cast<std::size_t>(slot)];
    auto& res = results[static_cast<std::size_t>(slot)];

    Tape tape;
    std::vector<Var> params = det.weights_to_tape(tape, st.student, true);
    Var image = tape.leaf(p.student_view, false);
    std::mt19937_64 rng_noise_s = make_rng(st.seed, "noise_student",
                                           static_cast<std::uint64_t>(iter),
                                           static_cast<std::uint64_t>(slot));
    auto s_levels = det.forward(tape, params, image, true, cfg.detector.nrb_enabled,
                                &rng_noise_s);

    Var loss = tape.leaf(Tensor::scalar(0.0), false);
    if (p.labeled) {
      AnchorAssignment assign = assign_anchors(p.boxes, p.classes, grid,
                                               cfg.detector.pos_iou, cfg.detector.neg_iou);
      std::vector<const Tensor*> cls_grids;
      for (const auto& lv : s_levels) cls_grids.push_back(&tape.val(lv.cls));
      TrainingSelection sel =
          select_training_anchors(assign, cls_grids, cfg.detector.anchors_per_cell(),
                                  cfg.detector.num_classes, cfg.detector.neg_ratio);
      SupervisedLossOptions sopts;
      sopts.cls_loss = cfg.detector.cls_loss;
      sopts.focal_gamma = cfg.detector.focal_gamma;
      sopts.focal_alpha = cfg.detector.focal_alpha;
      sopts.prob_clamp = cfg.prob_clamp;
      Var sup = supervised_loss_var(tape, s_levels, sel, sopts);
      res.sup = tape.scalar(sup);
      loss = tape.add(loss, tape.affine(sup, 1.0 / b_l, 0.0));
    }
    if (cfg.consistency_enabled) {
      std::mt19937_64 rng_noise_t = make_rng(st.seed, "noise_teacher",
                                             static_cast<std::uint64_t>(iter),
                                             static_cast<std::uint64_t>(slot));
      DetectorOutput teacher_out = det.forward_value(
          st.ema.teacher, p.teacher_input, true, cfg.detector.nrb_enabled, &rng_noise_t);
      DetectorOutput mirrored =
          mirror_predictions(teacher_out, p.teacher_input.w, p.mirror_h, p.mirror_v);
      auto t_levels = levels_to_tape(tape, mirrored);
      Var cont = consistency_cost_var(tape, s_levels, t_levels, copts);
      res.cont = tape.scalar(cont);
      loss = tape.add(loss, tape.affine(cont, lambda / total, 0.0));
    }

    tape.backward(loss);
    res.grads.reserve(params.size());
    for (Var pv : params) res.grads.push_back(tape.grad(pv));
  });

  // Deterministic reduction.
  std::vector<Tensor> grads;
  for (const auto& shape : det.param_shapes()) grads.emplace_back(shape[0], shape[1], shape[2]);
  StepMetrics met;
  for (int slot = 0; slot < total; ++slot) {
    const auto& res = results[static_cast<std::size_t>(slot)];
    met.loss_sup += res.sup / std::max(1, b_l);
    met.loss_cont += res.cont / std::max(1, total);
    for (std::size_t k = 0; k < grads.size(); ++k) grads[k].data += res.grads[k].data;
  }
  met.lambda = lambda;

  double gn2 = 0.0;
  for (const auto& g : grads) gn2 += g.data.square().sum();
  met.grad_norm = std::sqrt(gn2);
  if (!std::isfinite(met.loss_sup) || !std::isfinite(met.loss_cont) ||
      !std::isfinite(met.grad_norm))
    throw numeric_error("train_step: non-finite loss at iteration " + std::to_string(iter) +
                        " (seed " + std::to_string(st.seed) + ")");

  met.lr = current_lr(cfg, iter, sched.total_iters);
  st.opt.step(st.student, grads, met.lr);
  ++st.iteration;
  return met;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'S', 'S', 'M', 'D', 'C', 'K', 'P', 'T'};

namespace detail {

inline void write_tensors(std::ofstream& out, const std::vector<Tensor>& ts) {
  const std::uint64_t n = ts.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  for (const auto& t : ts) {
    const std::int32_t dims[3] = {t.c, t.h, t.w};
    out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(sizeof(double) * t.data.size()));
  }
}

inline std::vector<Tensor> read_tensors(std::ifstream& in) {
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  std::vector<Tensor> ts;
  for (std::uint64_t i = 0; i < n; ++i) {
    std::int32_t dims[3];
    in.read(reinterpret_cast<char*>(dims), sizeof(dims));
    Tensor t(dims[0], dims[1], dims[2]);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(sizeof(double) * t.data.size()));
    ts.push_back(std::move(t));
  }
  if (!in) throw data_error("checkpoint: truncated tensor section");
  return ts;
}

}  // namespace detail

/// Versioned container: config document, iteration counter, student and
/// teacher weights, optimizer state. Writes go to a temp file renamed into
/// place so an interrupted save cannot corrupt the previous checkpoint.
inline void save_checkpoint(const fs::path& path, const TrainState& st, const RunConfig& cfg) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw data_error("cannot write checkpoint: " + tmp.string());
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint32_t version = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));

    const std::string cfg_text = to_json(cfg).dump();
    const std::uint64_t cfg_len = cfg_text.size();
    out.write(reinterpret_cast<const char*>(&cfg_len), sizeof(cfg_len));
    out.write(cfg_text.data(), static_cast<std::streamsize>(cfg_len));

    out.write(reinterpret_cast<const char*>(&st.iteration), sizeof(st.iteration));
    out.write(reinterpret_cast<const char*>(&st.seed), sizeof(st.seed));
    out.write(reinterpret_cast<const char*>(&st.best_val_map), sizeof(st.best_val_map));
    out.write(reinterpret_cast<const char*>(&st.best_val_iter), sizeof(st.best_val_iter));
    out.write(reinterpret_cast<const char*>(&st.ema.alpha), sizeof(st.ema.alpha));
    out.write(reinterpret_cast<const char*>(&st.opt.t), sizeof(st.opt.t));

    detail::write_tensors(out, st.student.params);
    detail::write_tensors(out, st.ema.teacher.params);
    detail::write_tensors(out, st.opt.m);
    detail::write_tensors(out, st.opt.v);
    if (!out) throw data_error("checkpoint write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline TrainState load_checkpoint(const fs::path& path, RunConfig* cfg_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw data_error("not a checkpoint file: " + path.string());
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kCheckpointVersion)
    throw data_error("checkpoint version mismatch in " + path.string() + ": have " +
                     std::to_string(version) + ", expected " +
                     std::to_string(kCheckpointVersion));

  std::uint64_t cfg_len = 0;
  in.read(reinterpret_cast<char*>(&cfg_len), sizeof(cfg_len));
  std::string cfg_text(cfg_len, '\0');
  in.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len));
  if (cfg_out) *cfg_out = config_from_json(Json::parse(cfg_text));

  TrainState st;
  in.read(reinterpret_cast<char*>(&st.iteration), sizeof(st.iteration));
  in.read(reinterpret_cast<char*>(&st.seed), sizeof(st.seed));
  in.read(reinterpret_cast<char*>(&st.best_val_map), sizeof(st.best_val_map));
  in.read(reinterpret_cast<char*>(&st.best_val_iter), sizeof(st.best_val_iter));
  in.read(reinterpret_cast<char*>(&st.ema.alpha), sizeof(st.ema.alpha));
  in.read(reinterpret_cast<char*>(&st.opt.t), sizeof(st.opt.t));
  if (!in) throw data_error("checkpoint: truncated header");

  st.student.params = detail::read_tensors(in);
  st.ema.teacher.params = detail::read_tensors(in);
  st.opt.m = detail::read_tensors(in);
  st.opt.v = detail::read_tensors(in);
  return st;
}

// ---------------------------------------------------------------------------
// Validation + fit

inline double validate_map(const Detector& det, const ModelWeights& weights,
                           const Dataset& ds, const std::vector<int>& indices,
                           const RunConfig& cfg) {
  if (indices.empty()) return 0.0;
  std::vector<std::vector<Detection>> per_image(indices.size());
  parallel_for(static_cast<int>(indices.size()), [&](int i) {
    const DataSample& s = ds.samples[static_cast<std::size_t>(indices[static_cast<std::size_t>(i)])];
    per_image[static_cast<std::size_t>(i)] =
        det.detect(weights, ds.preprocess(s.image), cfg.score_thresh, cfg.nms_iou,
                   cfg.max_detections);
  });
  std::vector<DetectionRecord> dets;
  std::vector<GtRecord> gts;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const DataSample& s = ds.samples[static_cast<std::size_t>(indices[i])];
    for (const auto& d : per_image[i])
      dets.push_back({static_cast<int>(i), d.cls, d.score, d.box});
    for (std::size_t b = 0; b < s.boxes.size(); ++b)
      gts.push_back({static_cast<int>(i), s.classes[b], s.boxes[b]});
  }
  EvalOptions eopts;
  eopts.match_thresh = cfg.eval_iou;
  eopts.criterion = cfg.eval_criterion == "iobb" ? MatchCriterion::kIoBB : MatchCriterion::kIoU;
  eopts.fp_budgets = cfg.fp_budgets;
  return evaluate(dets, gts, static_cast<int>(indices.size()), eopts).map;
}

/// Deterministic shuffled cycle over an index set: position p maps into the
/// (p / n)-th permutation of the set, so resuming from any iteration
/// reproduces the original stream without stored sampler state.
class CycledSampler {
 public:
  CycledSampler(const std::vector<int>& set, std::uint64_t seed, std::string stream)
      : set_(&set), seed_(seed), stream_(std::move(stream)) {}

  int at(long pos) {
    const long n = static_cast<long>(set_->size());
    if (n == 0) throw std::invalid_argument("CycledSampler: empty index set");
    const long cycle = pos / n;
    if (cycle != cached_cycle_) {
      std::mt19937_64 rng = make_rng(seed_, stream_, static_cast<std::uint64_t>(cycle));
      perm_ = random_permutation(static_cast<int>(n), rng);
      cached_cycle_ = cycle;
    }
    return (*set_)[static_cast<std::size_t>(perm_[static_cast<std::size_t>(pos % n)])];
  }

 private:
  const std::vector<int>* set_;
  std::uint64_t seed_;
  std::string stream_;
  long cached_cycle_ = -1;
  std::vector<int> perm_;
};

struct FitResult {
  fs::path last_checkpoint;
  fs::path best_checkpoint;
  double best_val_map = 0.0;
  long iterations = 0;
};

/// Full training run into run_dir: metrics.csv (append-only), last.ckpt at
/// every checkpoint interval and at the end, best.ckpt from validation mAP
/// (student weights). Resume continues the metrics file without gaps.
inline FitResult fit(const RunConfig& cfg, const Dataset& ds, const fs::path& run_dir,
                     bool resume = false) {
  cfg.validate();
  fs::create_directories(run_dir);
  const Detector det(cfg.detector);

  if (ds.split.labeled.empty()) throw data_error("fit: no labeled training samples");
  if (cfg.consistency_enabled && ds.split.unlabeled.empty())
    throw data_error("fit: consistency training needs unlabeled samples");

  const long steps_per_epoch =
      std::max<long>(1, (static_cast<long>(ds.split.labeled.size()) + cfg.batch_size - 1) /
                            cfg.batch_size);
  const long total_iters = steps_per_epoch * cfg.epochs;

  TrainState st;
  const fs::path last_path = run_dir / "last.ckpt";
  const fs::path best_path = run_dir / "best.ckpt";
  if (resume) {
    RunConfig stored;
    st = load_checkpoint(last_path, &stored);
    if (to_json(stored).dump() != to_json(cfg).dump())
      throw usage_error("resume: config differs from the checkpointed run");
  } else {
    st.seed = cfg.seed;
    st.student = det.init_weights(cfg.seed, "init");
    st.ema.alpha = cfg.ema_alpha;
    st.ema.teacher = cfg.teacher_init == "copy" ? st.student
                                                : det.init_weights(cfg.seed, "teacher_init");
    st.opt.init_like(st.student);
    st.opt.lr = cfg.lr;
  }

  // Metrics file; on resume drop any rows past the checkpointed iteration.
  const fs::path metrics_path = run_dir / "metrics.csv";
  const char* header = "iteration,epoch,lambda,loss_sup,loss_cont,lr,grad_norm,wall_ms\n";
  if (resume && fs::exists(metrics_path)) {
    std::ifstream in(metrics_path);
    std::vector<std::string> keep;
    std::string line;
    while (std::getline(in, line)) {
      if (keep.empty()) {
        keep.push_back(line);
        continue;
      }
      const long it = std::strtol(line.c_str(), nullptr, 10);
      if (it < st.iteration) keep.push_back(line);
    }
    std::ofstream out(metrics_path, std::ios::trunc);
    for (const auto& l : keep) out << l << "\n";
  } else if (!resume || !fs::exists(metrics_path)) {
    std::ofstream out(metrics_path, std::ios::trunc);
    out << header;
  }

  CycledSampler labeled_stream(ds.split.labeled, cfg.seed, "data_labeled");
  CycledSampler unlabeled_stream(
      ds.split.unlabeled.empty() ? ds.split.labeled : ds.split.unlabeled, cfg.seed,
      "data_unlabeled");

  FitResult result;
  result.last_checkpoint = last_path;
  result.best_checkpoint = best_path;

  if (total_iters == 0) {
    save_checkpoint(last_path, st, cfg);
    if (!fs::exists(best_path)) save_checkpoint(best_path, st, cfg);
    result.best_val_map = std::max(0.0, st.best_val_map);
    return result;
  }

  std::ofstream metrics(metrics_path, std::ios::app);
  Schedule sched{total_iters, 0, cfg.paper_literal_rampdown};

  for (long n = st.iteration; n < total_iters; ++n) {
    sched.iter = n;
    std::vector<const DataSample*> lbatch, ubatch;
    for (int i = 0; i < cfg.batch_size; ++i) {
      const long pos = n * cfg.batch_size + i;
      lbatch.push_back(&ds.samples[static_cast<std::size_t>(labeled_stream.at(pos))]);
      if (cfg.consistency_enabled)
        ubatch.push_back(&ds.samples[static_cast<std::size_t>(unlabeled_stream.at(pos))]);
    }

    const auto t0 = std::chrono::steady_clock::now();
    StepMetrics met = train_step(st, det, cfg, ds, lbatch, ubatch, sched);
    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    char row[256];
    std::snprintf(row, sizeof(row), "%ld,%ld,%.10g,%.10g,%.10g,%.10g,%.10g,%.3f\n", n,
                  n / steps_per_epoch, met.lambda, met.loss_sup, met.loss_cont, met.lr,
                  met.grad_norm, wall_ms);
    metrics << row;
    metrics.flush();

    const bool epoch_end = (n + 1) % steps_per_epoch == 0;
    if (epoch_end) {
      const long epoch = (n + 1) / steps_per_epoch;
      if (!ds.split.val.empty() &&
          (epoch % cfg.val_every == 0 || epoch == cfg.epochs)) {
        const double val_map = validate_map(det, st.student, ds, ds.split.val, cfg);
        if (val_map > st.best_val_map) {
          st.best_val_map = val_map;
          st.best_val_iter = st.iteration;
          save_checkpoint(best_path, st, cfg);
        }
      }
      if (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs)
        save_checkpoint(last_path, st, cfg);
    }
  }
  save_checkpoint(last_path, st, cfg);
  if (!fs::exists(best_path)) save_checkpoint(best_path, st, cfg);
  result.best_val_map = std::max(0.0, st.best_val_map);
  result.iterations = st.iteration;
  return result;
}

}  // namespace ssmd
