#pragma once

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "ssmd/adversarial.hpp"
#include "ssmd/augment.hpp"
#include "ssmd/detector.hpp"
#include "ssmd/errors.hpp"

namespace ssmd {

using Json = nlohmann::ordered_json;

/// Every tunable across the system in one structured document. CLI flags
/// and --set overrides are applied on top; the fully-resolved config is
/// echoed into each run directory.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string mode = "ssmd";  // supervised | csd | ssmd

  std::string data_dir;
  double labeled_ratio = 0.1;

  DetectorConfig detector;
  AugmentConfig augment;
  bool student_random_flip = false;

  bool consistency_enabled = true;
  bool adaptive_weight = true;  // the adaptive consistency cost flag
  double prob_clamp = 1e-7;

  bool adversarial_enabled = true;
  PerturbationConfig perturbation;

  double ema_alpha = 0.99;
  std::string teacher_init = "copy";  // copy | independent

  bool paper_literal_rampdown = false;

  double lr = 1e-5;
  double lr_drop_factor = 0.1;
  double lr_drop_at = 0.75;  // fraction of total iterations
  int batch_size = 8;
  int epochs = 100;

  double eval_iou = 0.5;
  std::string eval_criterion = "iou";  // iou | iobb
  double score_thresh = 0.05;
  double nms_iou = 0.5;
  int max_detections = 100;
  std::vector<double> fp_budgets = {0.5, 1.0, 2.0, 4.0};

  int val_every = 5;         // epochs between validation passes
  int checkpoint_every = 10; // epochs between periodic checkpoints

  void validate() const {
    detector.validate();
    augment.validate();
    if (consistency_enabled && adversarial_enabled) perturbation.validate();
    if (mode != "supervised" && mode != "csd" && mode != "ssmd")
      throw usage_error("config: mode must be supervised, csd or ssmd");
    if (!(ema_alpha >= 0.0 && ema_alpha <= 1.0))
      throw usage_error("config: ema alpha must be in [0,1]");
    if (teacher_init != "copy" && teacher_init != "independent")
      throw usage_error("config: teacher_init must be copy or independent");
    if (!(labeled_ratio > 0.0 && labeled_ratio <= 1.0))
      throw usage_error("config: labeled_ratio must be in (0,1]");
    if (batch_size < 1) throw usage_error("config: batch_size must be >= 1");
    if (epochs < 0) throw usage_error("config: epochs must be >= 0");
    if (!(lr > 0.0)) throw usage_error("config: lr must be > 0");
    if (eval_criterion != "iou" && eval_criterion != "iobb")
      throw usage_error("config: eval criterion must be iou or iobb");
    if (val_every < 1 || checkpoint_every < 1)
      throw usage_error("config: val_every and checkpoint_every must be >= 1");
    for (double b : fp_budgets)
      if (!(b > 0.0)) throw usage_error("config: fp budgets must be positive");
  }
};

namespace detail {

/// Strict reader: every key must be consumed, unknown keys are rejected.
class JsonReader {
 public:
  JsonReader(Json j, std::string path) : j_(std::move(j)), path_(std::move(path)) {
    if (!j_.is_object()) throw usage_error("config: expected object at " + path_);
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw usage_error("config: bad value type for " + path_ + key);
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  Json child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? j_.at(key) : Json::object();
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (seen_.find(it.key()) == seen_.end())
        throw usage_error("config: unknown key " + path_ + it.key());
  }

 private:
  Json j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline Json to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["mode"] = c.mode;
  j["data"] = {{"dir", c.data_dir}, {"labeled_ratio", c.labeled_ratio}};
  j["detector"] = {{"num_classes", c.detector.num_classes},
                   {"in_channels", c.detector.in_channels},
                   {"widths", c.detector.widths},
                   {"blocks_per_stage", c.detector.blocks_per_stage},
                   {"num_levels", c.detector.num_levels},
                   {"scales", c.detector.scales},
                   {"fpn_width", c.detector.fpn_width},
                   {"head_convs", c.detector.head_convs},
                   {"head_width", c.detector.head_width},
                   {"anchor_scales", c.detector.anchor_scales},
                   {"anchor_ratios", c.detector.anchor_ratios},
                   {"anchor_base", c.detector.anchor_base},
                   {"cls_loss", c.detector.cls_loss},
                   {"focal_gamma", c.detector.focal_gamma},
                   {"focal_alpha", c.detector.focal_alpha},
                   {"pos_iou", c.detector.pos_iou},
                   {"neg_iou", c.detector.neg_iou},
                   {"neg_ratio", c.detector.neg_ratio},
                   {"bg_bias_init", c.detector.bg_bias_init}};
  j["augment"] = {{"max_rotation", c.augment.max_rotation},
                  {"cutout_n", c.augment.cutout_n},
                  {"cutout_s", c.augment.cutout_s},
                  {"cutout_reference", c.augment.cutout_reference},
                  {"cutout", c.augment.cutout_enabled},
                  {"flip", c.augment.hflip_teacher},
                  {"vflip", c.augment.vflip_teacher},
                  {"student_random_flip", c.student_random_flip}};
  j["consistency"] = {{"enabled", c.consistency_enabled},
                      {"acc", c.adaptive_weight},
                      {"prob_clamp", c.prob_clamp}};
  j["nrb"] = {{"enabled", c.detector.nrb_enabled},
              {"gamma", c.detector.nrb.gamma},
              {"mu", c.detector.nrb.mu},
              {"sigma", c.detector.nrb.sigma}};
  j["adversarial"] = {{"enabled", c.adversarial_enabled},
                      {"xi", c.perturbation.xi},
                      {"eps", c.perturbation.eps},
                      {"tau", c.perturbation.tau},
                      {"grad_floor", c.perturbation.grad_floor}};
  j["ema"] = {{"alpha", c.ema_alpha}, {"teacher_init", c.teacher_init}};
  j["schedule"] = {{"paper_literal_rampdown", c.paper_literal_rampdown}};
  j["optim"] = {{"lr", c.lr},
                {"lr_drop_factor", c.lr_drop_factor},
                {"lr_drop_at", c.lr_drop_at},
                {"batch_size", c.batch_size},
                {"epochs", c.epochs}};
  j["eval"] = {{"iou", c.eval_iou},
               {"criterion", c.eval_criterion},
               {"score_thresh", c.score_thresh},
               {"nms_iou", c.nms_iou},
               {"max_detections", c.max_detections},
               {"fp_budgets", c.fp_budgets}};
  j["train"] = {{"val_every", c.val_every}, {"checkpoint_every", c.checkpoint_every}};
  return j;
}

inline RunConfig config_from_json(const Json& j) {
  RunConfig c;
  detail::JsonReader r(j, "");
  r.get("seed", c.seed);
  r.get("mode", c.mode);
  {
    detail::JsonReader s(r.child("data"), "data.");
    s.get("dir", c.data_dir);
    s.get("labeled_ratio", c.labeled_ratio);
    s.finish();
  }
  {
    detail::JsonReader s(r.child("detector"), "detector.");
    s.get("num_classes", c.detector.num_classes);
    s.get("in_channels", c.detector.in_channels);
    s.get("widths", c.detector.widths);
    s.get("blocks_per_stage", c.detector.blocks_per_stage);
    s.get("num_levels", c.detector.num_levels);
    s.get("scales", c.detector.scales);
    s.get("fpn_width", c.detector.fpn_width);
    s.get("head_convs", c.detector.head_convs);
    s.get("head_width", c.detector.head_width);
    s.get("anchor_scales", c.detector.anchor_scales);
    s.get("anchor_ratios", c.detector.anchor_ratios);
    s.get("anchor_base", c.detector.anchor_base);
    s.get("cls_loss", c.detector.cls_loss);
    s.get("focal_gamma", c.detector.focal_gamma);
    s.get("focal_alpha", c.detector.focal_alpha);
    s.get("pos_iou", c.detector.pos_iou);
    s.get("neg_iou", c.detector.neg_iou);
    s.get("neg_ratio", c.detector.neg_ratio);
    s.get("bg_bias_init", c.detector.bg_bias_init);
    s.finish();
  }
  {
    detail::JsonReader s(r.child("augment"), "augment.");
    s.get("max_rotation", c.augment.max_rotation);
    s.get("cutout_n", c.augment.cutout_n);
    s.get("cutout_s", c.augment.cutout_s);
    s.get("cutout_reference", c.augment.cutout_reference);
    s.get("cutout", c.augment.cutout_enabled);
    s.get("flip", c.augment.hflip_teacher);
    s.get("vflip", c.augment.vflip_teacher);
    s.get("student_random_flip", c.student_random_flip);
    s.finish();
  }
  {
    detail::JsonReader s(r.child("consistency"), "consistency.");
    s.get("enabled", c.consistency_enabled);
    s.get("acc", c.adaptive_weight);
    s.get("prob_clamp", c.prob_clamp);
    s.finish();
  }
  {
    detail::JsonReader s(r.child("nrb"), "nrb.");
    s.get("enabled", c.detector.nrb_enabled);
    s.get("gamma", c.detector.nrb.gamma);
    s.get("mu", c.detector.nrb.mu);
    s.get("sigma", c.detector.nrb.sigma);
    s.finish();
  }
  {
    detail::JsonReader s(r.child("adversarial"), "adversarial.");
    s.get("enabled", c.adversarial_enabled);
    s.get("xi", c.perturbation.xi);
    s.get("eps", c.perturbation.eps);
    s.get("tau", c.perturbation.tau);
    s.get("grad_floor", c.perturbation.grad_floor);
    s.finish();
  }
  {
    detail::JsonReader s(r.child("ema"), "ema.");
    s.get("alpha", c.ema_alpha);
    s.get("teacher_init", c.teacher_init);
    s.finish();
  }
  {
    detail::JsonReader s(r.child("schedule"), "schedule.");
    s.get("paper_literal_rampdown", c.paper_literal_rampdown);
    s.finish();
  }
  {
    detail::JsonReader s(r.child("optim"), "optim.");
    s.get("lr", c.lr);
    s.get("lr_drop_factor", c.lr_drop_factor);
    s.get("lr_drop_at", c.lr_drop_at);
    s.get("batch_size", c.batch_size);
    s.get("epochs", c.epochs);
    s.finish();
  }
  {
    detail::JsonReader s(r.child("eval"), "eval.");
    s.get("iou", c.eval_iou);
    s.get("criterion", c.eval_criterion);
    s.get("score_thresh", c.score_thresh);
    s.get("nms_iou", c.nms_iou);
    s.get("max_detections", c.max_detections);
    s.get("fp_budgets", c.fp_budgets);
    s.finish();
  }
  {
    detail::JsonReader s(r.child("train"), "train.");
    s.get("val_every", c.val_every);
    s.get("checkpoint_every", c.checkpoint_every);
    s.finish();
  }
  r.finish();
  c.validate();
  return c;
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw usage_error("cannot open config file: " + path);
  Json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw usage_error("config parse error in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

inline void save_config_file(const RunConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write config file: " + path);
  out << to_json(c).dump(2) << "\n";
}

/// Mode presets own the feature flags. They are applied only when --mode is
/// given explicitly, so re-running from an echoed config reproduces the run
/// even after --set overrides.
inline void apply_mode_preset(RunConfig& c, const std::string& mode) {
  c.mode = mode;
  if (mode == "supervised") {
    c.consistency_enabled = false;
    c.adaptive_weight = false;
    c.detector.nrb_enabled = false;
    c.adversarial_enabled = false;
    c.augment.max_rotation = 10.0;
    c.augment.cutout_enabled = false;
    c.student_random_flip = true;
  } else if (mode == "csd") {
    // Flip-only view pair (the rotation is shared between the views, so the
    // inter-view map stays a pure mirror) with uniform consistency weight.
    c.consistency_enabled = true;
    c.adaptive_weight = false;
    c.detector.nrb_enabled = false;
    c.adversarial_enabled = false;
    c.augment.max_rotation = 10.0;
    c.augment.cutout_enabled = false;
    c.augment.hflip_teacher = true;
    c.student_random_flip = true;
  } else if (mode == "ssmd") {
    c.consistency_enabled = true;
    c.adaptive_weight = true;
    c.detector.nrb_enabled = true;
    c.adversarial_enabled = true;
    c.augment.max_rotation = 10.0;
    c.augment.cutout_enabled = true;
    c.augment.hflip_teacher = true;
    c.student_random_flip = true;
  } else {
    throw usage_error("unknown mode: " + mode);
  }
}

/// Applies one KEY=VALUE override (dotted path into the config document).
inline void apply_override(Json& j, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw usage_error("--set expects KEY=VALUE, got: " + spec);
  const std::string key = spec.substr(0, eq);
  const std::string value = spec.substr(eq + 1);

  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (part.empty()) throw usage_error("--set: empty path segment in " + key);
    if (dot == std::string::npos) {
      Json parsed = Json::parse(value, nullptr, false);
      (*node)[part] = parsed.is_discarded() ? Json(value) : parsed;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

}  // namespace ssmd
