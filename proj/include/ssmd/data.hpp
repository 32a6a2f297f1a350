#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ssmd/errors.hpp"
#include "ssmd/geometry.hpp"
#include "ssmd/png_io.hpp"
#include "ssmd/rng.hpp"
#include "ssmd/tensor.hpp"

namespace ssmd {

namespace fs = std::filesystem;

/// Seedable elliptical-blob generator standing in for a real detection
/// corpus. Two intensity classes by default so classification consistency
/// is non-trivial; single-class mode mirrors a nuclei-style task.
struct SyntheticSpec {
  int image_size = 48;
  int min_objects = 2;
  int max_objects = 6;
  double min_radius = 4.0;
  double max_radius = 7.5;
  double base_intensity = 0.10;
  double noise_sigma = 0.05;
  int num_classes = 2;
  double max_overlap_iou = 0.30;
  std::uint64_t seed = 0;

  void validate() const {
    if (image_size < 8) throw usage_error("synthetic: image_size too small");
    if (min_objects < 0 || max_objects < min_objects)
      throw usage_error("synthetic: bad object count range");
    if (!(min_radius > 0.0) || max_radius < min_radius)
      throw usage_error("synthetic: bad radius range");
    if (2.0 * max_radius >= image_size)
      throw usage_error("synthetic: max_radius too large for image size");
    if (num_classes < 1) throw usage_error("synthetic: num_classes must be >= 1");
  }
};

struct DataSample {
  Tensor image;  // raw intensities in [0,1]
  std::vector<Box> boxes;
  std::vector<int> classes;  // 1..C
  std::string path;          // relative image path when loaded from disk
};

/// Deterministic per (spec, index); every blob yields exactly one GT box
/// that tightly bounds its elliptical support.
inline DataSample generate_sample(const SyntheticSpec& spec, int index) {
  spec.validate();
  std::mt19937_64 rng = make_rng(spec.seed, "gen", static_cast<std::uint64_t>(index));
  const int n = spec.image_size;

  DataSample s;
  s.image = Tensor(1, n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double v = spec.base_intensity;
      if (spec.noise_sigma > 0.0)
        v += std::normal_distribution<double>(0.0, spec.noise_sigma)(rng);
      s.image.at(0, y, x) = v;
    }

  std::uniform_int_distribution<int> count_dist(spec.min_objects, spec.max_objects);
  const int objects = count_dist(rng);
  std::uniform_real_distribution<double> radius_dist(spec.min_radius, spec.max_radius);
  std::uniform_int_distribution<int> class_dist(1, spec.num_classes);

  for (int i = 0; i < objects; ++i) {
    double rx = 0, ry = 0, cx = 0, cy = 0;
    Box box;
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      rx = radius_dist(rng);
      ry = radius_dist(rng);
      cx = std::uniform_real_distribution<double>(rx, n - rx)(rng);
      cy = std::uniform_real_distribution<double>(ry, n - ry)(rng);
      box = {cx, cy, 2.0 * rx, 2.0 * ry};
      placed = true;
      for (const Box& other : s.boxes)
        if (iou(box, other) > spec.max_overlap_iou) {
          placed = false;
          break;
        }
    }
    // After exhausting attempts the last draw is accepted regardless of
    // overlap so the object count always matches the draw.
    const int cls = class_dist(rng);
    // Class intensity bands are well separated so the label is recoverable
    // from appearance.
    double center = 0.55;
    if (spec.num_classes > 1)
      center = 0.30 + 0.50 * (cls - 1) / static_cast<double>(spec.num_classes - 1);
    const double half_width = spec.num_classes > 1 ? 0.06 : 0.15;
    const double peak =
        std::uniform_real_distribution<double>(center - half_width, center + half_width)(rng);

    const int y0 = std::max(0, static_cast<int>(std::floor(cy - ry)));
    const int y1 = std::min(n - 1, static_cast<int>(std::ceil(cy + ry)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - rx)));
    const int x1 = std::min(n - 1, static_cast<int>(std::ceil(cx + rx)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = (x + 0.5 - cx) / rx;
        const double dy = (y + 0.5 - cy) / ry;
        const double d2 = dx * dx + dy * dy;
        if (d2 < 1.0) s.image.at(0, y, x) += peak * (1.0 - d2);
      }
    s.boxes.push_back(box);
    s.classes.push_back(cls);
  }
  s.image.data = s.image.data.max(0.0).min(1.0);
  return s;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  double labeled_ratio = 0.1;
  double train_frac = 0.8;
  double val_frac = 0.1;
  double test_frac = 0.1;
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<int> labeled, unlabeled, val, test;

  std::vector<int> train() const {
    std::vector<int> t = labeled;
    t.insert(t.end(), unlabeled.begin(), unlabeled.end());
    return t;
  }
};

/// Disjoint, exhaustive, deterministic per seed. |labeled| =
/// round(labeled_ratio * |train|); the test split absorbs rounding slack.
inline SplitIndices make_split(int count, const SplitSpec& spec) {
  if (spec.train_frac < 0 || spec.val_frac < 0 || spec.test_frac < 0 ||
      spec.train_frac + spec.val_frac + spec.test_frac > 1.0 + 1e-9)
    throw usage_error("split: fractions must be nonnegative and sum to <= 1");
  if (!(spec.labeled_ratio > 0.0 && spec.labeled_ratio <= 1.0))
    throw usage_error("split: labeled_ratio must be in (0,1]");
  const int n_train = static_cast<int>(std::lround(spec.train_frac * count));
  const int n_val = static_cast<int>(std::lround(spec.val_frac * count));
  if (n_train + n_val > count) throw usage_error("split: fractions inconsistent with count");

  std::mt19937_64 rng = make_rng(spec.seed, "split");
  std::vector<int> perm = random_permutation(count, rng);
  const int n_labeled = static_cast<int>(std::lround(spec.labeled_ratio * n_train));

  SplitIndices out;
  out.labeled.assign(perm.begin(), perm.begin() + n_labeled);
  out.unlabeled.assign(perm.begin() + n_labeled, perm.begin() + n_train);
  out.val.assign(perm.begin() + n_train, perm.begin() + n_train + n_val);
  out.test.assign(perm.begin() + n_train + n_val, perm.end());
  return out;
}

// ---------------------------------------------------------------------------
// Intensity preprocessing

/// Clamp to [lo, hi] and map affinely onto [-1, 1].
inline Tensor window_and_normalize(const Tensor& img, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("window_and_normalize: lo must be < hi");
  Tensor out = img;
  out.data = (out.data.max(lo).min(hi) - lo) * (2.0 / (hi - lo)) - 1.0;
  return out;
}

inline Tensor standardize(const Tensor& img, double mean, double stddev) {
  if (!(stddev > 0.0)) throw std::invalid_argument("standardize: stddev must be > 0");
  Tensor out = img;
  out.data = (out.data - mean) / stddev;
  return out;
}

// ---------------------------------------------------------------------------
// Dataset container + disk formats

struct Dataset {
  std::vector<DataSample> samples;  // raw intensities in [0,1]
  SplitIndices split;
  double window_lo = 0.0, window_hi = 1.0;
  double mean = 0.0;    // of windowed train images
  double stddev = 1.0;

  /// Raw -> windowed -> standardized; the pipeline every training and eval
  /// image goes through.
  Tensor preprocess(const Tensor& raw) const {
    return standardize(window_and_normalize(raw, window_lo, window_hi), mean, stddev);
  }
};

using Json = nlohmann::ordered_json;

inline Json annotation_json(const Dataset& ds, const std::vector<int>& indices,
                            bool with_boxes) {
  Json images = Json::array();
  for (int idx : indices) {
    const DataSample& s = ds.samples[static_cast<std::size_t>(idx)];
    Json rec;
    rec["image"] = s.path;
    rec["width"] = s.image.w;
    rec["height"] = s.image.h;
    Json boxes = Json::array();
    if (with_boxes)
      for (std::size_t b = 0; b < s.boxes.size(); ++b) {
        const CornerBox c = to_corner(s.boxes[b]);
        boxes.push_back({c.x1, c.y1, c.x2, c.y2, s.classes[b]});
      }
    rec["boxes"] = boxes;
    images.push_back(std::move(rec));
  }
  return Json{{"images", images}};
}

/// Generates `count` samples, splits them, computes normalization stats over
/// the train portion and persists everything (PNG images + one annotation
/// document per split + a manifest).
inline Dataset write_dataset(const fs::path& dir, const SyntheticSpec& spec, int count,
                             const SplitSpec& split_spec) {
  if (count < 1) throw usage_error("write_dataset: count must be >= 1");
  spec.validate();
  fs::create_directories(dir / "images");

  Dataset ds;
  for (int i = 0; i < count; ++i) {
    DataSample s = generate_sample(spec, i);
    char name[64];
    std::snprintf(name, sizeof(name), "images/im_%05d.png", i);
    s.path = name;
    write_png((dir / name).string(), to_image_u8(s.image));
    ds.samples.push_back(std::move(s));
  }
  ds.split = make_split(count, split_spec);

  // Normalization stats over windowed train images.
  double sum = 0.0, sum2 = 0.0;
  long npix = 0;
  for (int idx : ds.split.train()) {
    const Tensor w = window_and_normalize(ds.samples[static_cast<std::size_t>(idx)].image,
                                          ds.window_lo, ds.window_hi);
    sum += w.data.sum();
    sum2 += w.data.square().sum();
    npix += w.data.size();
  }
  ds.mean = npix > 0 ? sum / npix : 0.0;
  const double var = npix > 0 ? std::max(1e-12, sum2 / npix - ds.mean * ds.mean) : 1.0;
  ds.stddev = std::sqrt(var);

  std::ofstream(dir / "train_labeled.json")
      << annotation_json(ds, ds.split.labeled, true).dump(2) << "\n";
  std::ofstream(dir / "train_unlabeled.json")
      << annotation_json(ds, ds.split.unlabeled, false).dump(2) << "\n";
  std::ofstream(dir / "val.json") << annotation_json(ds, ds.split.val, true).dump(2) << "\n";
  std::ofstream(dir / "test.json") << annotation_json(ds, ds.split.test, true).dump(2) << "\n";

  Json manifest;
  manifest["format_version"] = 1;
  manifest["count"] = count;
  manifest["spec"] = {{"image_size", spec.image_size},
                      {"min_objects", spec.min_objects},
                      {"max_objects", spec.max_objects},
                      {"min_radius", spec.min_radius},
                      {"max_radius", spec.max_radius},
                      {"base_intensity", spec.base_intensity},
                      {"noise_sigma", spec.noise_sigma},
                      {"num_classes", spec.num_classes},
                      {"max_overlap_iou", spec.max_overlap_iou},
                      {"seed", spec.seed}};
  manifest["split_spec"] = {{"labeled_ratio", split_spec.labeled_ratio},
                            {"train_frac", split_spec.train_frac},
                            {"val_frac", split_spec.val_frac},
                            {"test_frac", split_spec.test_frac},
                            {"seed", split_spec.seed}};
  manifest["window"] = {{"lo", ds.window_lo}, {"hi", ds.window_hi}};
  manifest["normalization"] = {{"mean", ds.mean}, {"std", ds.stddev}};
  manifest["splits"] = {{"labeled", ds.split.labeled},
                        {"unlabeled", ds.split.unlabeled},
                        {"val", ds.split.val},
                        {"test", ds.split.test}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
  return ds;
}

/// Loads one annotation document (schema: images/width/height/boxes with
/// corner-form [x1,y1,x2,y2,class] rows). Classes are remapped to contiguous
/// ids starting at 1; background stays 0. Malformed records are reported by
/// index.
inline std::vector<DataSample> load_annotations(const fs::path& annotation_file,
                                                std::map<int, int>* class_map_out = nullptr) {
  std::ifstream in(annotation_file);
  if (!in) throw data_error("cannot open annotation file: " + annotation_file.string());
  Json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw data_error("annotation parse error in " + annotation_file.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("images") || !j["images"].is_array())
    throw data_error("annotation file must contain an 'images' array: " +
                     annotation_file.string());

  const fs::path base = annotation_file.parent_path();
  std::vector<DataSample> samples;
  std::vector<int> raw_classes;
  std::vector<std::string> bad;

  int rec_no = 0;
  for (const auto& rec : j["images"]) {
    ++rec_no;
    try {
      if (!rec.is_object() || !rec.contains("image") || !rec.contains("width") ||
          !rec.contains("height") || !rec.contains("boxes"))
        throw data_error("missing field");
      DataSample s;
      s.path = rec.at("image").get<std::string>();
      const int w = rec.at("width").get<int>();
      const int h = rec.at("height").get<int>();
      ImageU8 img = read_png((base / s.path).string());
      if (img.w != w || img.h != h) throw data_error("declared size differs from image");
      s.image = to_tensor(img);
      for (const auto& b : rec.at("boxes")) {
        if (!b.is_array() || b.size() != 5) throw data_error("box row must be [x1,y1,x2,y2,class]");
        const CornerBox cb{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                           b[3].get<double>()};
        if (!(cb.x2 > cb.x1 && cb.y2 > cb.y1)) throw data_error("empty box extent");
        s.boxes.push_back(to_center(cb));
        s.classes.push_back(b[4].get<int>());
        raw_classes.push_back(b[4].get<int>());
      }
      samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      bad.push_back("record " + std::to_string(rec_no) + ": " + e.what());
    }
  }
  if (!bad.empty()) {
    std::string msg = "malformed annotation records in " + annotation_file.string() + ":";
    for (const auto& b : bad) msg += "\n  " + b;
    throw data_error(msg);
  }

  // Contiguous class ids (background reserved as 0).
  std::sort(raw_classes.begin(), raw_classes.end());
  raw_classes.erase(std::unique(raw_classes.begin(), raw_classes.end()), raw_classes.end());
  std::map<int, int> remap;
  for (std::size_t i = 0; i < raw_classes.size(); ++i)
    remap[raw_classes[i]] = static_cast<int>(i) + 1;
  for (auto& s : samples)
    for (auto& c : s.classes) c = remap.at(c);
  if (class_map_out) *class_map_out = remap;
  return samples;
}

/// Loads a directory produced by write_dataset.
inline Dataset load_dataset(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw data_error("cannot open dataset manifest: " + (dir / "manifest.json").string());
  Json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw data_error("manifest parse error: " + std::string(e.what()));
  }
  if (!m.contains("format_version") || m["format_version"].get<int>() != 1)
    throw data_error("unsupported dataset format version");

  Dataset ds;
  ds.window_lo = m["window"]["lo"].get<double>();
  ds.window_hi = m["window"]["hi"].get<double>();
  ds.mean = m["normalization"]["mean"].get<double>();
  ds.stddev = m["normalization"]["std"].get<double>();
  ds.split.labeled = m["splits"]["labeled"].get<std::vector<int>>();
  ds.split.unlabeled = m["splits"]["unlabeled"].get<std::vector<int>>();
  ds.split.val = m["splits"]["val"].get<std::vector<int>>();
  ds.split.test = m["splits"]["test"].get<std::vector<int>>();

  const int count = m["count"].get<int>();
  const SyntheticSpec spec{
      m["spec"]["image_size"].get<int>(),      m["spec"]["min_objects"].get<int>(),
      m["spec"]["max_objects"].get<int>(),     m["spec"]["min_radius"].get<double>(),
      m["spec"]["max_radius"].get<double>(),   m["spec"]["base_intensity"].get<double>(),
      m["spec"]["noise_sigma"].get<double>(),  m["spec"]["num_classes"].get<int>(),
      m["spec"]["max_overlap_iou"].get<double>(),
      m["spec"]["seed"].get<std::uint64_t>()};
  for (int i = 0; i < count; ++i) {
    // Boxes are regenerated from the seed; pixel data comes from disk so the
    // directory remains the source of truth for images.
    DataSample s = generate_sample(spec, i);
    char name[64];
    std::snprintf(name, sizeof(name), "images/im_%05d.png", i);
    s.path = name;
    s.image = to_tensor(read_png((dir / name).string()));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace ssmd
