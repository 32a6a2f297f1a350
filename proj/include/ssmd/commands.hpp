#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ssmd/config.hpp"
#include "ssmd/data.hpp"
#include "ssmd/errors.hpp"
#include "ssmd/evaluation.hpp"
#include "ssmd/plot.hpp"
#include "ssmd/trainer.hpp"

namespace ssmd {

namespace detail {

inline void require_writable_dir(const fs::path& dir, bool force, bool allow_existing) {
  if (fs::exists(dir) && !fs::is_directory(dir))
    throw data_error("output path exists and is not a directory: " + dir.string());
  if (fs::exists(dir) && !fs::is_empty(dir) && !force && !allow_existing)
    throw data_error("output directory is not empty (use --force): " + dir.string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
  std::string out;
  int count = 100;
  std::uint64_t seed = 1;
  double labeled_ratio = 0.1;
  SyntheticSpec spec;  // spec.seed is taken from `seed`
  bool force = false;
};

inline int run_gen_data(const GenDataArgs& args) {
  if (args.out.empty()) throw usage_error("gen-data: --out is required");
  if (args.count < 1) throw usage_error("gen-data: --count must be >= 1");
  detail::require_writable_dir(args.out, args.force, false);
  SyntheticSpec spec = args.spec;
  spec.seed = args.seed;
  SplitSpec split;
  split.labeled_ratio = args.labeled_ratio;
  split.seed = args.seed;
  const Dataset ds = write_dataset(args.out, spec, args.count, split);
  std::cout << "wrote " << args.count << " images to " << args.out << " (labeled "
            << ds.split.labeled.size() << ", unlabeled " << ds.split.unlabeled.size()
            << ", val " << ds.split.val.size() << ", test " << ds.split.test.size() << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config_path;
  std::string out;
  std::string data_dir;
  std::optional<std::string> mode;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<double> labeled_ratio;
  std::vector<std::string> overrides;  // repeated --set KEY=VALUE
  bool resume = false;
  bool force = false;
};

/// Resolution order: defaults -> config file -> mode preset (only when
/// --mode was given) -> --set overrides -> convenience flags.
inline RunConfig resolve_config(const TrainArgs& args) {
  RunConfig cfg = args.config_path.empty() ? RunConfig{} : load_config_file(args.config_path);
  if (args.mode) apply_mode_preset(cfg, *args.mode);
  if (!args.overrides.empty()) {
    Json j = to_json(cfg);
    for (const auto& s : args.overrides) apply_override(j, s);
    cfg = config_from_json(j);
  }
  if (args.seed) cfg.seed = *args.seed;
  if (args.epochs) cfg.epochs = *args.epochs;
  if (args.labeled_ratio) cfg.labeled_ratio = *args.labeled_ratio;
  if (!args.data_dir.empty()) cfg.data_dir = args.data_dir;
  cfg.validate();
  return cfg;
}

/// Re-derives the labeled/unlabeled partition of the train split when the
/// requested ratio differs from the one baked into the dataset directory.
inline void apply_labeled_ratio(Dataset& ds, double ratio, std::uint64_t seed) {
  std::vector<int> train = ds.split.train();
  std::sort(train.begin(), train.end());
  const int want = static_cast<int>(std::lround(ratio * static_cast<double>(train.size())));
  std::mt19937_64 rng = make_rng(seed, "relabel");
  const std::vector<int> perm = random_permutation(static_cast<int>(train.size()), rng);
  ds.split.labeled.clear();
  ds.split.unlabeled.clear();
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const int idx = train[static_cast<std::size_t>(perm[i])];
    if (static_cast<int>(i) < want) ds.split.labeled.push_back(idx);
    else ds.split.unlabeled.push_back(idx);
  }
}

inline FitResult run_train_impl(const RunConfig& cfg, const fs::path& out, bool resume) {
  if (cfg.data_dir.empty()) throw usage_error("train: no dataset directory configured");
  Dataset ds = load_dataset(cfg.data_dir);
  const int have_labeled = static_cast<int>(ds.split.labeled.size());
  const int want_labeled = static_cast<int>(
      std::lround(cfg.labeled_ratio * static_cast<double>(ds.split.train().size())));
  if (want_labeled != have_labeled) apply_labeled_ratio(ds, cfg.labeled_ratio, cfg.seed);
  fs::create_directories(out);
  save_config_file(cfg, (out / "config.json").string());
  return fit(cfg, ds, out, resume);
}

inline int run_train(const TrainArgs& args) {
  if (args.out.empty()) throw usage_error("train: --out is required");
  RunConfig cfg = resolve_config(args);
  detail::require_writable_dir(args.out, args.force, args.resume);
  fs::create_directories(args.out);
  const FitResult res = run_train_impl(cfg, args.out, args.resume);
  std::cout << "trained " << res.iterations << " iterations; best val mAP "
            << res.best_val_map << "; checkpoints in " << args.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint;
  std::string data_dir;        // defaults to the checkpoint's configured dataset
  std::string split = "test";  // labeled | train | val | test
  std::string dets_file;       // alternative input: pre-computed records
  std::string gts_file;
  std::string out;
  std::vector<double> fp_budgets;
  bool use_teacher = false;  // diagnostics only; inference uses the student
  std::optional<double> score_thresh;
};

inline const std::vector<int>& split_indices(const Dataset& ds, const std::string& name) {
  if (name == "labeled") return ds.split.labeled;
  if (name == "unlabeled") return ds.split.unlabeled;
  if (name == "val") return ds.split.val;
  if (name == "test") return ds.split.test;
  throw usage_error("eval: unknown split " + name);
}

inline void write_eval_report(const fs::path& dir, const EvalReport& rep) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "report.csv");
    out << "metric,class,value\n";
    out.precision(10);
    for (const auto& [cls, ap] : rep.per_class)
      out << "ap," << cls << "," << (ap.defined ? ap.ap : std::nan("")) << "\n";
    out << "map,," << rep.map << "\n";
    for (std::size_t i = 0; i < rep.fp_budgets.size(); ++i)
      out << "sensitivity@" << rep.fp_budgets[i] << ",," << rep.sensitivity[i] << "\n";
    out << "num_images,," << rep.num_images << "\n";
    out << "num_gt,," << rep.num_gt << "\n";
    out << "num_detections,," << rep.num_dets << "\n";
  }
  for (const auto& [cls, ap] : rep.per_class) {
    std::ofstream out(dir / ("pr_class_" + std::to_string(cls) + ".csv"));
    out << "score,recall,precision\n";
    out.precision(10);
    for (std::size_t i = 0; i < ap.curve.recall.size(); ++i)
      out << ap.curve.score[i] << "," << ap.curve.recall[i] << "," << ap.curve.precision[i]
          << "\n";
  }
  {
    std::ofstream out(dir / "froc.csv");
    out << "score,fppi,sensitivity\n";
    out.precision(10);
    for (std::size_t i = 0; i < rep.froc.fppi.size(); ++i)
      out << rep.froc.score[i] << "," << rep.froc.fppi[i] << "," << rep.froc.sensitivity[i]
          << "\n";
  }
}

/// Evaluates a checkpoint on a dataset split. Returns the report; also used
/// by the ablation sweep.
inline EvalReport evaluate_checkpoint(const fs::path& checkpoint, const std::string& data_dir,
                                      const std::string& split, bool use_teacher = false,
                                      std::optional<double> score_thresh = std::nullopt,
                                      std::vector<DetectionRecord>* dets_out = nullptr) {
  RunConfig cfg;
  TrainState st = load_checkpoint(checkpoint, &cfg);
  const Detector det(cfg.detector);
  const std::string dir = data_dir.empty() ? cfg.data_dir : data_dir;
  if (dir.empty()) throw usage_error("eval: no dataset directory configured");
  Dataset ds = load_dataset(dir);
  const std::vector<int>& idx = split_indices(ds, split);
  if (idx.empty()) throw data_error("eval: split '" + split + "' is empty");

  const ModelWeights& weights = use_teacher ? st.ema.teacher : st.student;
  if (use_teacher)
    std::cerr << "[ssmd] eval: using TEACHER weights (diagnostics only; inference uses the "
                 "student)\n";
  const double thr = score_thresh.value_or(cfg.score_thresh);

  std::vector<std::vector<Detection>> per_image(idx.size());
  parallel_for(static_cast<int>(idx.size()), [&](int i) {
    const DataSample& s = ds.samples[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
    per_image[static_cast<std::size_t>(i)] =
        det.detect(weights, ds.preprocess(s.image), thr, cfg.nms_iou, cfg.max_detections);
  });
  std::vector<DetectionRecord> dets;
  std::vector<GtRecord> gts;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const DataSample& s = ds.samples[static_cast<std::size_t>(idx[i])];
    for (const auto& d : per_image[i]) dets.push_back({static_cast<int>(i), d.cls, d.score, d.box});
    for (std::size_t b = 0; b < s.boxes.size(); ++b)
      gts.push_back({static_cast<int>(i), s.classes[b], s.boxes[b]});
  }
  if (dets_out) *dets_out = dets;

  EvalOptions eopts;
  eopts.match_thresh = cfg.eval_iou;
  eopts.criterion = cfg.eval_criterion == "iobb" ? MatchCriterion::kIoBB : MatchCriterion::kIoU;
  eopts.fp_budgets = cfg.fp_budgets;
  return evaluate(dets, gts, static_cast<int>(idx.size()), eopts);
}

inline int run_eval(const EvalArgs& args) {
  if (args.out.empty()) throw usage_error("eval: --out is required");
  EvalReport rep;
  if (!args.dets_file.empty() || !args.gts_file.empty()) {
    if (args.dets_file.empty() || args.gts_file.empty())
      throw usage_error("eval: --dets and --gts must be given together");
    const auto dets = read_detection_records(args.dets_file);
    const auto gts = read_gt_records(args.gts_file);
    int num_images = 0;
    for (const auto& g : gts) num_images = std::max(num_images, g.image_id + 1);
    for (const auto& d : dets) num_images = std::max(num_images, d.image_id + 1);
    EvalOptions eopts;
    if (!args.fp_budgets.empty()) eopts.fp_budgets = args.fp_budgets;
    rep = evaluate(dets, gts, std::max(1, num_images), eopts);
  } else {
    if (args.checkpoint.empty()) throw usage_error("eval: need --checkpoint or --dets/--gts");
    std::vector<DetectionRecord> dets;
    rep = evaluate_checkpoint(args.checkpoint, args.data_dir, args.split, args.use_teacher,
                              args.score_thresh, &dets);
    if (!args.fp_budgets.empty()) {
      // Recompute the sensitivity row at the requested budgets.
      rep.fp_budgets = args.fp_budgets;
      rep.sensitivity.clear();
    }
    write_detection_records((fs::path(args.out) / "detections.txt").string(), dets);
  }
  if (rep.sensitivity.empty() && !rep.fp_budgets.empty()) {
    // Budgets were overridden after the fact; derive from the stored curve.
    std::vector<double> budgets = rep.fp_budgets;
    std::sort(budgets.begin(), budgets.end());
    rep.fp_budgets = budgets;
    for (double b : budgets) {
      const auto& f = rep.froc.fppi;
      const auto& s = rep.froc.sensitivity;
      double v = 0.0;
      if (!f.empty()) {
        std::size_t k = 0;
        while (k + 1 < f.size() && f[k + 1] <= b) ++k;
        v = s[k];
        if (k + 1 < f.size() && f[k + 1] > f[k] && b > f[k])
          v = s[k] + (s[k + 1] - s[k]) * (b - f[k]) / (f[k + 1] - f[k]);
      }
      rep.sensitivity.push_back(v);
    }
  }
  write_eval_report(args.out, rep);
  std::cout << "mAP " << rep.map << " over " << rep.num_images << " images; report in "
            << args.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
  std::string out;
  std::string data_dir;
  std::string config_path;
  std::vector<std::string> overrides;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::optional<int> epochs;
  bool force = false;
};

struct AblateRow {
  std::string name;
  std::string flag_changed;
  std::vector<double> map_per_seed;
  double mean_map = 0.0;
};

/// Incremental sweep: CSD baseline, then adaptive cost, noisy residual
/// blocks and adversarial perturbation toggled on one at a time.
inline std::vector<AblateRow> run_ablate_impl(const AblateArgs& args) {
  if (args.out.empty()) throw usage_error("ablate: --out is required");
  detail::require_writable_dir(args.out, args.force, false);
  fs::create_directories(args.out);

  TrainArgs base;
  base.config_path = args.config_path;
  base.data_dir = args.data_dir;
  base.overrides = args.overrides;
  base.epochs = args.epochs;
  base.mode = "csd";
  RunConfig csd = resolve_config(base);

  struct RowSpec {
    const char* name;
    const char* flag;
  };
  const std::vector<RowSpec> rows = {{"csd", ""},
                                     {"acc", "consistency.acc"},
                                     {"nrb", "nrb.enabled"},
                                     {"iap", "adversarial.enabled"}};
  std::vector<AblateRow> results;
  RunConfig cfg = csd;
  for (const auto& row : rows) {
    if (row.flag[0] != '\0') {
      Json j = to_json(cfg);
      apply_override(j, std::string(row.flag) + "=true");
      cfg = config_from_json(j);
    }
    AblateRow res;
    res.name = row.name;
    res.flag_changed = row.flag;
    for (std::uint64_t seed : args.seeds) {
      RunConfig run_cfg = cfg;
      run_cfg.seed = seed;
      const fs::path run_dir = fs::path(args.out) / ("row_" + res.name) /
                               ("seed_" + std::to_string(seed));
      fs::create_directories(run_dir);
      const FitResult fit_res = run_train_impl(run_cfg, run_dir, false);
      const EvalReport rep =
          evaluate_checkpoint(fit_res.best_checkpoint, run_cfg.data_dir, "test");
      res.map_per_seed.push_back(rep.map);
    }
    for (double m : res.map_per_seed) res.mean_map += m;
    res.mean_map /= static_cast<double>(res.map_per_seed.size());
    results.push_back(std::move(res));
  }

  std::ofstream summary(fs::path(args.out) / "summary.csv");
  summary << "row,flag_changed,";
  for (std::size_t s = 0; s < args.seeds.size(); ++s) summary << "map_seed" << args.seeds[s] << ",";
  summary << "mean_map\n";
  summary.precision(10);
  for (const auto& r : results) {
    summary << r.name << "," << r.flag_changed << ",";
    for (double m : r.map_per_seed) summary << m << ",";
    summary << r.mean_map << "\n";
  }
  return results;
}

inline int run_ablate(const AblateArgs& args) {
  const auto rows = run_ablate_impl(args);
  for (const auto& r : rows)
    std::cout << r.name << ": mean mAP " << r.mean_map << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// plot

struct PlotArgs {
  std::string run_dir;     // emits one curve image per metric column
  std::string eval_dir;    // emits PR/FROC curve images
  std::string checkpoint;  // with data_dir/index: detection overlay
  std::string data_dir;
  int image_index = 0;
  std::string split = "test";
  std::string out;
};

inline int run_plot(const PlotArgs& args) {
  if (args.out.empty()) throw usage_error("plot: --out is required");
  fs::create_directories(args.out);
  int emitted = 0;

  if (!args.run_dir.empty()) {
    const fs::path metrics = fs::path(args.run_dir) / "metrics.csv";
    std::ifstream in(metrics);
    if (!in) throw data_error("plot: cannot open " + metrics.string());
    std::string header;
    std::getline(in, header);
    std::vector<std::vector<double>> cols(8);
    std::string line;
    while (std::getline(in, line)) {
      std::replace(line.begin(), line.end(), ',', ' ');
      std::istringstream ss(line);
      double v;
      std::size_t c = 0;
      while (ss >> v && c < cols.size()) cols[c++].push_back(v);
    }
    if (cols[0].empty()) throw data_error("plot: metrics file has no rows: " + metrics.string());
    const std::vector<std::pair<int, std::string>> series = {
        {2, "lambda"}, {3, "loss_sup"}, {4, "loss_cont"}, {6, "grad_norm"}};
    for (const auto& [col, name] : series) {
      plot_curve((fs::path(args.out) / (name + ".png")).string(), cols[0],
                 cols[static_cast<std::size_t>(col)]);
      ++emitted;
    }
  }

  if (!args.eval_dir.empty()) {
    for (const auto& entry : fs::directory_iterator(args.eval_dir)) {
      const std::string name = entry.path().filename().string();
      const bool pr = name.rfind("pr_class_", 0) == 0 && entry.path().extension() == ".csv";
      const bool froc = name == "froc.csv";
      if (!pr && !froc) continue;
      std::ifstream in(entry.path());
      std::string header;
      std::getline(in, header);
      std::vector<double> xs, ys;
      std::string line;
      while (std::getline(in, line)) {
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ss(line);
        double score, x, y;
        if (ss >> score >> x >> y) {
          xs.push_back(x);
          ys.push_back(y);
        }
      }
      if (xs.empty()) continue;
      const std::string out_name = entry.path().stem().string() + ".png";
      plot_curve((fs::path(args.out) / out_name).string(), xs, ys, {200, 60, 40});
      ++emitted;
    }
  }

  if (!args.checkpoint.empty()) {
    RunConfig cfg;
    TrainState st = load_checkpoint(args.checkpoint, &cfg);
    const Detector det(cfg.detector);
    const std::string dir = args.data_dir.empty() ? cfg.data_dir : args.data_dir;
    Dataset ds = load_dataset(dir);
    const std::vector<int>& idx = split_indices(ds, args.split);
    if (args.image_index < 0 || args.image_index >= static_cast<int>(idx.size()))
      throw usage_error("plot: --image-index out of range");
    const DataSample& s = ds.samples[static_cast<std::size_t>(
        idx[static_cast<std::size_t>(args.image_index)])];
    const auto dets = det.detect(st.student, ds.preprocess(s.image), cfg.score_thresh,
                                 cfg.nms_iou, cfg.max_detections);
    char name[64];
    std::snprintf(name, sizeof(name), "overlay_%03d.png", args.image_index);
    plot_overlay((fs::path(args.out) / name).string(), s.image, s.boxes, dets);
    ++emitted;
  }

  if (emitted == 0) throw usage_error("plot: nothing to plot (pass --run, --eval or --checkpoint)");
  std::cout << "wrote " << emitted << " plot files to " << args.out << "\n";
  return 0;
}

}  // namespace ssmd
