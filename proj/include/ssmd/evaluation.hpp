#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ssmd/errors.hpp"
#include "ssmd/geometry.hpp"

namespace ssmd {

enum class MatchCriterion { kIoU, kIoBB };

struct DetectionRecord {
  int image_id = 0;
  int cls = 0;
  double score = 0.0;
  Box box;
};

struct GtRecord {
  int image_id = 0;
  int cls = 0;
  Box box;
};

inline double overlap(const Box& det, const Box& gt, MatchCriterion crit) {
  return crit == MatchCriterion::kIoU ? iou(det, gt) : iobb(det, gt);
}

/// Greedy one-to-one matching over score-descending detections: each
/// detection claims the unmatched same-class GT (same image) with the
/// highest overlap, and is a TP when that overlap reaches the threshold.
/// Double detections of one GT are FPs.
inline std::vector<char> match_detections(const std::vector<DetectionRecord>& dets_sorted,
                                          const std::vector<GtRecord>& gts, double thresh,
                                          MatchCriterion crit = MatchCriterion::kIoU) {
  std::vector<char> tp(dets_sorted.size(), 0);
  std::vector<char> taken(gts.size(), 0);
  for (std::size_t d = 0; d < dets_sorted.size(); ++d) {
    double best = 0.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].image_id != dets_sorted[d].image_id ||
          gts[g].cls != dets_sorted[d].cls)
        continue;
      const double v = overlap(dets_sorted[d].box, gts[g].box, crit);
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0 && best >= thresh) {
      tp[d] = 1;
      taken[static_cast<std::size_t>(best_gt)] = 1;
    }
  }
  return tp;
}

// ---------------------------------------------------------------------------
// Average precision (all-points interpolation)

struct PrCurve {
  std::vector<double> score, recall, precision;
};

struct ApResult {
  double ap = 0.0;
  bool defined = true;  // false when there is nothing to measure (no GT, no dets)
  PrCurve curve;
};

/// Flags and scores must be in descending-score order. Detections with equal
/// scores enter the curve as one step (a score threshold cannot separate
/// them). AP is the area under the interpolated precision envelope.
inline ApResult average_precision(const std::vector<char>& tp_flags,
                                  const std::vector<double>& scores, int num_gt) {
  if (tp_flags.size() != scores.size())
    throw std::invalid_argument("average_precision: flags/scores size mismatch");
  ApResult res;
  if (num_gt == 0 && tp_flags.empty()) {
    res.defined = false;
    return res;
  }
  if (tp_flags.empty() || num_gt == 0) {
    res.ap = 0.0;
    return res;
  }

  long tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < tp_flags.size()) {
    std::size_t j = i;
    while (j < tp_flags.size() && scores[j] == scores[i]) {
      if (tp_flags[j]) ++tp; else ++fp;
      ++j;
    }
    res.curve.score.push_back(scores[i]);
    res.curve.recall.push_back(static_cast<double>(tp) / num_gt);
    res.curve.precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    i = j;
  }

  // Precision envelope (non-increasing after interpolation), integrated over
  // recall.
  const std::size_t n = res.curve.recall.size();
  std::vector<double> envelope(n);
  double running = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    running = std::max(running, res.curve.precision[k]);
    envelope[k] = running;
  }
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    ap += (res.curve.recall[k] - prev_recall) * envelope[k];
    prev_recall = res.curve.recall[k];
  }
  res.ap = ap;
  return res;
}

// ---------------------------------------------------------------------------
// FROC

struct FrocCurve {
  std::vector<double> score, fppi, sensitivity;
};

/// Threshold sweep over pooled detections. Curve points are the achieved
/// (FP-per-image, recall) pairs; the reported sensitivity at a budget is the
/// value at the last achieved point not exceeding it, linearly interpolated
/// toward the next point. Budgets must be ascending.
inline std::vector<double> froc_sensitivity(std::vector<DetectionRecord> dets,
                                            const std::vector<GtRecord>& gts, int num_images,
                                            const std::vector<double>& budgets,
                                            double thresh,
                                            MatchCriterion crit = MatchCriterion::kIoU,
                                            FrocCurve* curve_out = nullptr) {
  for (std::size_t b = 1; b < budgets.size(); ++b)
    if (budgets[b] < budgets[b - 1])
      throw std::invalid_argument("froc_sensitivity: budgets must be ascending");
  if (num_images < 1) throw std::invalid_argument("froc_sensitivity: need at least one image");

  std::stable_sort(dets.begin(), dets.end(), [](const DetectionRecord& a, const DetectionRecord& b) {
    return a.score > b.score;
  });
  const long total_gt = static_cast<long>(gts.size());
  std::vector<char> tp = match_detections(dets, gts, thresh, crit);

  // Achieved operating points, one per distinct score.
  std::vector<double> fppi = {0.0}, sens = {0.0}, score = {std::nan("")};
  long tp_cum = 0, fp_cum = 0;
  std::size_t i = 0;
  while (i < dets.size()) {
    std::size_t j = i;
    while (j < dets.size() && dets[j].score == dets[i].score) {
      if (tp[j]) ++tp_cum; else ++fp_cum;
      ++j;
    }
    fppi.push_back(static_cast<double>(fp_cum) / num_images);
    sens.push_back(total_gt > 0 ? static_cast<double>(tp_cum) / total_gt : 0.0);
    score.push_back(dets[i].score);
    i = j;
  }
  // Deduplicate equal FP rates, keeping the highest sensitivity (the last
  // point at that rate, since sensitivity is non-decreasing).
  std::vector<double> f2, s2, sc2;
  for (std::size_t k = 0; k < fppi.size(); ++k) {
    if (!f2.empty() && fppi[k] == f2.back()) {
      s2.back() = sens[k];
      sc2.back() = score[k];
    } else {
      f2.push_back(fppi[k]);
      s2.push_back(sens[k]);
      sc2.push_back(score[k]);
    }
  }
  if (curve_out) *curve_out = FrocCurve{sc2, f2, s2};

  std::vector<double> out;
  for (double b : budgets) {
    std::size_t k = 0;
    while (k + 1 < f2.size() && f2[k + 1] <= b) ++k;
    double v = s2[k];
    if (k + 1 < f2.size() && f2[k + 1] > f2[k] && b > f2[k])
      v = s2[k] + (s2[k + 1] - s2[k]) * (b - f2[k]) / (f2[k + 1] - f2[k]);
    out.push_back(v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregate report

struct EvalOptions {
  double match_thresh = 0.5;
  MatchCriterion criterion = MatchCriterion::kIoU;
  std::vector<double> fp_budgets = {0.5, 1.0, 2.0, 4.0};
};

struct EvalReport {
  std::map<int, ApResult> per_class;
  double map = 0.0;
  std::vector<double> fp_budgets;
  std::vector<double> sensitivity;
  FrocCurve froc;
  int num_images = 0;
  long num_gt = 0;
  long num_dets = 0;
};

inline EvalReport evaluate(const std::vector<DetectionRecord>& dets,
                           const std::vector<GtRecord>& gts, int num_images,
                           const EvalOptions& opts = {}) {
  EvalReport rep;
  rep.num_images = num_images;
  rep.num_gt = static_cast<long>(gts.size());
  rep.num_dets = static_cast<long>(dets.size());
  rep.fp_budgets = opts.fp_budgets;

  std::set<int> classes;
  for (const auto& g : gts) classes.insert(g.cls);
  for (const auto& d : dets) classes.insert(d.cls);

  double ap_sum = 0.0;
  int ap_count = 0;
  for (int cls : classes) {
    std::vector<DetectionRecord> cd;
    for (const auto& d : dets)
      if (d.cls == cls) cd.push_back(d);
    std::stable_sort(cd.begin(), cd.end(), [](const DetectionRecord& a, const DetectionRecord& b) {
      return a.score > b.score;
    });
    std::vector<GtRecord> cg;
    for (const auto& g : gts)
      if (g.cls == cls) cg.push_back(g);
    const std::vector<char> tp = match_detections(cd, cg, opts.match_thresh, opts.criterion);
    std::vector<double> scores;
    for (const auto& d : cd) scores.push_back(d.score);
    ApResult ap = average_precision(tp, scores, static_cast<int>(cg.size()));
    if (ap.defined) {
      ap_sum += ap.ap;
      ++ap_count;
    }
    rep.per_class[cls] = std::move(ap);
  }
  rep.map = ap_count > 0 ? ap_sum / ap_count : 0.0;
  rep.sensitivity = froc_sensitivity(dets, gts, num_images, opts.fp_budgets,
                                     opts.match_thresh, opts.criterion, &rep.froc);
  return rep;
}

// ---------------------------------------------------------------------------
// Line-delimited record files: image_id class score x1 y1 x2 y2
// ('#' starts a comment; GT files carry score 1)

inline void write_detection_records(const std::string& path,
                                    const std::vector<DetectionRecord>& dets) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write records file: " + path);
  out.precision(17);
  for (const auto& d : dets) {
    const CornerBox c = to_corner(d.box);
    out << d.image_id << " " << d.cls << " " << d.score << " " << c.x1 << " " << c.y1 << " "
        << c.x2 << " " << c.y2 << "\n";
  }
}

inline std::vector<DetectionRecord> read_detection_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open records file: " + path);
  std::vector<DetectionRecord> out;
  std::vector<std::string> bad;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    DetectionRecord d;
    CornerBox c;
    if (!(ss >> d.image_id >> d.cls >> d.score >> c.x1 >> c.y1 >> c.x2 >> c.y2)) {
      bad.push_back(std::to_string(line_no));
      continue;
    }
    if (!(c.x2 > c.x1 && c.y2 > c.y1)) {
      bad.push_back(std::to_string(line_no));
      continue;
    }
    d.box = to_center(c);
    out.push_back(d);
  }
  if (!bad.empty()) {
    std::string msg = "malformed record lines in " + path + ":";
    for (const auto& b : bad) msg += " " + b;
    throw data_error(msg);
  }
  return out;
}

inline std::vector<GtRecord> read_gt_records(const std::string& path) {
  std::vector<GtRecord> out;
  for (const auto& d : read_detection_records(path)) out.push_back({d.image_id, d.cls, d.box});
  return out;
}

}  // namespace ssmd
