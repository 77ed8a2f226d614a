#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "json.hpp"

#include "hssda/box.hpp"
#include "hssda/learner.hpp"
#include "hssda/synth.hpp"
#include "hssda/thresholds.hpp"

namespace hssda {

struct MalformedFile : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoFailure("cannot open " + path.string() + " for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (!in.good() && !in.eof()) throw IoFailure("read error on " + path.string());
  return std::move(buf).str();
}

inline void write_file_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoFailure("cannot create directory " + path.parent_path().string());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoFailure("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out.good()) throw IoFailure("write error on " + path.string());
}

inline void put_f32le(std::string& buf, float v) {
  const auto u = std::bit_cast<std::uint32_t>(v);
  buf.push_back(static_cast<char>(u & 0xff));
  buf.push_back(static_cast<char>((u >> 8) & 0xff));
  buf.push_back(static_cast<char>((u >> 16) & 0xff));
  buf.push_back(static_cast<char>((u >> 24) & 0xff));
}

inline float get_f32le(const unsigned char* p) {
  const std::uint32_t u = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) |
                          (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(u);
}

}  // namespace detail

// Binary point record: little-endian float32 (x, y, z, intensity).
inline constexpr std::size_t kPointRecordBytes = 16;

inline void save_points(const std::filesystem::path& path, const PointCloud& pc) {
  std::string buf;
  buf.reserve(pc.size() * kPointRecordBytes);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    detail::put_f32le(buf, static_cast<float>(pc.x(i)));
    detail::put_f32le(buf, static_cast<float>(pc.y(i)));
    detail::put_f32le(buf, static_cast<float>(pc.z(i)));
    const double intensity = pc.extra_dims >= 1 ? pc.extra[pc.extra_dims * i] : 0.0;
    detail::put_f32le(buf, static_cast<float>(intensity));
  }
  detail::write_file_bytes(path, buf);
}

inline PointCloud load_points(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file_bytes(path);
  if (bytes.size() % kPointRecordBytes != 0) {
    throw MalformedFile(path.string() + ": byte length " + std::to_string(bytes.size()) +
                        " is not divisible by 16; trailing partial record at byte offset " +
                        std::to_string(bytes.size() - bytes.size() % kPointRecordBytes));
  }
  PointCloud pc;
  pc.extra_dims = 1;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t off = 0; off < bytes.size(); off += kPointRecordBytes) {
    pc.append(detail::get_f32le(p + off), detail::get_f32le(p + off + 4),
              detail::get_f32le(p + off + 8), {detail::get_f32le(p + off + 12)});
  }
  return pc;
}

// Text label record: one box per line, "class cx cy cz l w h yaw" in fixed
// six-decimal notation.
inline void save_labels(const std::filesystem::path& path, const std::vector<Box3D>& boxes) {
  std::string buf;
  char line[256];
  for (const Box3D& b : boxes) {
    std::snprintf(line, sizeof(line), "%d %.6f %.6f %.6f %.6f %.6f %.6f %.6f\n", b.class_id, b.cx,
                  b.cy, b.cz, b.length, b.width, b.height, b.yaw);
    buf += line;
  }
  detail::write_file_bytes(path, buf);
}

inline std::vector<Box3D> load_labels(const std::filesystem::path& path) {
  const std::string text = detail::read_file_bytes(path);
  std::vector<Box3D> boxes;
  std::istringstream lines(text);
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream f(line);
    Box3D b;
    if (!(f >> b.class_id >> b.cx >> b.cy >> b.cz >> b.length >> b.width >> b.height >> b.yaw)) {
      throw MalformedFile(path.string() + ": line " + std::to_string(line_no) +
                          ": expected \"class cx cy cz l w h yaw\"");
    }
    std::string trailing;
    if (f >> trailing) {
      throw MalformedFile(path.string() + ": line " + std::to_string(line_no) +
                          ": unexpected trailing field \"" + trailing + "\"");
    }
    if (b.class_id < 0) {
      throw MalformedFile(path.string() + ": line " + std::to_string(line_no) +
                          ": class id must be non-negative");
    }
    try {
      validate_box(b);
    } catch (const std::invalid_argument& e) {
      throw MalformedFile(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    }
    boxes.push_back(b);
  }
  return boxes;
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path dataset_dir;
  std::filesystem::path output_dir;
  double eval_iou = 0.5;  // flat per-class AP threshold for metrics
  int labeled_scenes = 40;
  int unlabeled_scenes = 160;
  int test_scenes = 30;
  TrainConfig train;
  DetectorConfig detector;
  SynthConfig gen;
};

namespace detail {

inline void check_keys(const nlohmann::json& obj, const std::string& ctx,
                       std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(ctx + ": expected a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        known = true;
        break;
      }
    }
    if (!known) throw ConfigError(ctx + ": unknown key \"" + it.key() + "\"");
  }
}

template <class T>
T json_as(const nlohmann::json& v, const std::string& where) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
  } else if constexpr (std::is_unsigned_v<T>) {
    if (!v.is_number_integer() ||
        (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(where + ": expected a non-negative integer");
    }
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(where + ": expected a number");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(where + ": expected a string");
  }
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + ": wrong JSON type");
  }
}

template <class T>
T get_or(const nlohmann::json& obj, const std::string& ctx, const char* key, T fallback) {
  const auto it = obj.find(key);
  if (it == obj.end()) return fallback;
  return json_as<T>(*it, ctx + "." + std::string(key));
}

template <class T>
T require(const nlohmann::json& obj, const std::string& ctx, const char* key) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw ConfigError(ctx + ": missing required key \"" + key + "\"");
  return json_as<T>(*it, ctx + "." + std::string(key));
}

inline void bound(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

inline Region parse_region(const nlohmann::json& j) {
  check_keys(j, "region", {"x1", "x2", "y1", "y2"});
  Region r;
  r.x1 = get_or(j, "region", "x1", r.x1);
  r.x2 = get_or(j, "region", "x2", r.x2);
  r.y1 = get_or(j, "region", "y1", r.y1);
  r.y2 = get_or(j, "region", "y2", r.y2);
  bound(r.x1 < r.x2 && r.y1 < r.y2, "region: x1 < x2 and y1 < y2 required");
  return r;
}

inline std::vector<ClassSpec> parse_classes(const nlohmann::json& arr, const std::string& ctx) {
  if (!arr.is_array() || arr.empty()) throw ConfigError(ctx + ": expected a non-empty array");
  std::vector<ClassSpec> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string c = ctx + "[" + std::to_string(i) + "]";
    check_keys(arr[i], c, {"name", "length", "width", "height"});
    ClassSpec spec;
    spec.name = require<std::string>(arr[i], c, "name");
    spec.length = require<double>(arr[i], c, "length");
    spec.width = require<double>(arr[i], c, "width");
    spec.height = require<double>(arr[i], c, "height");
    bound(!spec.name.empty(), c + ".name: must be non-empty");
    bound(spec.length > 0 && spec.width > 0 && spec.height > 0, c + ": sizes must be positive");
    out.push_back(std::move(spec));
  }
  return out;
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::check_keys(j, "config",
                     {"seed", "dataset_dir", "output_dir", "eval_iou", "train", "detector",
                      "region", "generator"});
  RunConfig rc;
  rc.seed = detail::get_or<std::uint64_t>(j, "config", "seed", 0);
  rc.dataset_dir = detail::require<std::string>(j, "config", "dataset_dir");
  rc.output_dir = detail::require<std::string>(j, "config", "output_dir");
  rc.eval_iou = detail::get_or(j, "config", "eval_iou", rc.eval_iou);
  detail::bound(rc.eval_iou > 0.0 && rc.eval_iou < 1.0, "eval_iou: must lie in (0,1)");
  detail::bound(!rc.dataset_dir.empty(), "dataset_dir: must be non-empty");
  detail::bound(!rc.output_dir.empty(), "output_dir: must be non-empty");

  Region region;
  if (j.contains("region")) region = detail::parse_region(j.at("region"));

  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::check_keys(t, "train",
                       {"alpha", "learning_rate", "burn_in_epochs", "mutual_epochs", "batch_size",
                        "tau_pair", "shuffle_rows", "shuffle_cols", "max_paste"});
    TrainConfig& tc = rc.train;
    tc.alpha = detail::get_or(t, "train", "alpha", tc.alpha);
    tc.learning_rate = detail::get_or(t, "train", "learning_rate", tc.learning_rate);
    tc.burn_in_epochs = detail::get_or(t, "train", "burn_in_epochs", tc.burn_in_epochs);
    tc.mutual_epochs = detail::get_or(t, "train", "mutual_epochs", tc.mutual_epochs);
    tc.batch_size = detail::get_or(t, "train", "batch_size", tc.batch_size);
    tc.tau_pair = detail::get_or(t, "train", "tau_pair", tc.tau_pair);
    tc.shuffle_rows = detail::get_or(t, "train", "shuffle_rows", tc.shuffle_rows);
    tc.shuffle_cols = detail::get_or(t, "train", "shuffle_cols", tc.shuffle_cols);
    tc.max_paste = detail::get_or<std::uint64_t>(t, "train", "max_paste", tc.max_paste);
    detail::bound(tc.alpha > 0.0 && tc.alpha < 1.0, "train.alpha: must lie in (0,1)");
    detail::bound(tc.learning_rate > 0.0, "train.learning_rate: must be positive");
    detail::bound(tc.burn_in_epochs >= 0, "train.burn_in_epochs: must be non-negative");
    detail::bound(tc.mutual_epochs >= 0, "train.mutual_epochs: must be non-negative");
    detail::bound(tc.batch_size >= 1, "train.batch_size: must be at least 1");
    detail::bound(tc.tau_pair > 0.0 && tc.tau_pair < 1.0, "train.tau_pair: must lie in (0,1)");
    detail::bound(tc.shuffle_rows >= 1 && tc.shuffle_cols >= 1,
                  "train.shuffle_rows/shuffle_cols: must be at least 1");
  }
  rc.train.seed = rc.seed;

  if (j.contains("detector")) {
    const auto& d = j.at("detector");
    detail::check_keys(d, "detector", {"cell", "min_cluster_points", "nms_iou", "size_blend"});
    DetectorConfig& dc = rc.detector;
    dc.cell = detail::get_or(d, "detector", "cell", dc.cell);
    dc.min_cluster_points = detail::get_or(d, "detector", "min_cluster_points", dc.min_cluster_points);
    dc.nms_iou = detail::get_or(d, "detector", "nms_iou", dc.nms_iou);
    dc.size_blend = detail::get_or(d, "detector", "size_blend", dc.size_blend);
    detail::bound(dc.cell > 0.0, "detector.cell: must be positive");
    detail::bound(dc.min_cluster_points >= 1, "detector.min_cluster_points: must be at least 1");
    detail::bound(dc.nms_iou >= 0.0 && dc.nms_iou <= 1.0, "detector.nms_iou: must lie in [0,1]");
    detail::bound(dc.size_blend >= 0.0 && dc.size_blend <= 1.0,
                  "detector.size_blend: must lie in [0,1]");
  }
  rc.detector.region = region;
  rc.gen.region = region;
  detail::bound(rc.detector.rows() >= 1 && rc.detector.cols() >= 1,
                "detector.cell: region must span at least one cell");

  if (j.contains("generator")) {
    const auto& g = j.at("generator");
    detail::check_keys(g, "generator",
                       {"classes", "labeled_scenes", "unlabeled_scenes", "test_scenes",
                        "min_objects", "max_objects", "min_decoys", "max_decoys", "clutter_points",
                        "noise_sigma", "near_points", "far_points", "size_jitter", "edge_margin",
                        "decoy_clearance", "min_gap"});
    if (g.contains("classes")) rc.gen.classes = detail::parse_classes(g.at("classes"), "generator.classes");
    rc.labeled_scenes = detail::get_or(g, "generator", "labeled_scenes", rc.labeled_scenes);
    rc.unlabeled_scenes = detail::get_or(g, "generator", "unlabeled_scenes", rc.unlabeled_scenes);
    rc.test_scenes = detail::get_or(g, "generator", "test_scenes", rc.test_scenes);
    SynthConfig& sc = rc.gen;
    sc.min_objects = detail::get_or(g, "generator", "min_objects", sc.min_objects);
    sc.max_objects = detail::get_or(g, "generator", "max_objects", sc.max_objects);
    sc.min_decoys = detail::get_or(g, "generator", "min_decoys", sc.min_decoys);
    sc.max_decoys = detail::get_or(g, "generator", "max_decoys", sc.max_decoys);
    sc.clutter_points = detail::get_or(g, "generator", "clutter_points", sc.clutter_points);
    sc.noise_sigma = detail::get_or(g, "generator", "noise_sigma", sc.noise_sigma);
    sc.near_points = detail::get_or(g, "generator", "near_points", sc.near_points);
    sc.far_points = detail::get_or(g, "generator", "far_points", sc.far_points);
    sc.size_jitter = detail::get_or(g, "generator", "size_jitter", sc.size_jitter);
    sc.edge_margin = detail::get_or(g, "generator", "edge_margin", sc.edge_margin);
    sc.decoy_clearance = detail::get_or(g, "generator", "decoy_clearance", sc.decoy_clearance);
    sc.min_gap = detail::get_or(g, "generator", "min_gap", sc.min_gap);
    detail::bound(rc.labeled_scenes >= 1, "generator.labeled_scenes: must be at least 1");
    detail::bound(rc.unlabeled_scenes >= 0, "generator.unlabeled_scenes: must be non-negative");
    detail::bound(rc.test_scenes >= 0, "generator.test_scenes: must be non-negative");
    detail::bound(sc.min_objects >= 0 && sc.max_objects >= sc.min_objects,
                  "generator.min_objects/max_objects: need 0 <= min <= max");
    detail::bound(sc.min_decoys >= 0 && sc.max_decoys >= sc.min_decoys,
                  "generator.min_decoys/max_decoys: need 0 <= min <= max");
    detail::bound(sc.clutter_points >= 0, "generator.clutter_points: must be non-negative");
    detail::bound(sc.noise_sigma >= 0.0, "generator.noise_sigma: must be non-negative");
    detail::bound(sc.near_points >= 1 && sc.far_points >= 1,
                  "generator.near_points/far_points: must be at least 1");
    detail::bound(sc.size_jitter >= 0.0 && sc.size_jitter < 1.0,
                  "generator.size_jitter: must lie in [0,1)");
    detail::bound(sc.edge_margin >= 0.0, "generator.edge_margin: must be non-negative");
    detail::bound(sc.decoy_clearance >= 0.0, "generator.decoy_clearance: must be non-negative");
    detail::bound(sc.min_gap >= 0.0, "generator.min_gap: must be non-negative");
    detail::bound(2.0 * sc.edge_margin < region.x2 - region.x1 &&
                      2.0 * sc.edge_margin < region.y2 - region.y1,
                  "generator.edge_margin: leaves no interior in the region");
  }
  if (rc.gen.classes.empty()) rc.gen.classes = reference_synth_config().classes;
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  const std::string text = detail::read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

// ---------------------------------------------------------------------------
// Dataset on disk
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<ClassSpec> classes;
  std::vector<Scene> labeled;
  std::vector<Scene> unlabeled;  // labels stripped; ground truth only in `sealed`
  std::vector<Scene> test;
  std::map<int, std::vector<Box3D>> sealed;  // eval-only ground truth (unlabeled + test)

  std::vector<int> class_ids() const {
    std::vector<int> ids(classes.size());
    std::iota(ids.begin(), ids.end(), 0);
    return ids;
  }
};

namespace detail {

inline std::string scene_stem(int id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", id);
  return buf;
}

}  // namespace detail

struct GenSummary {
  int labeled = 0;
  int unlabeled = 0;
  int test = 0;
  std::size_t total_points = 0;
};

// Write a synthetic dataset under rc.dataset_dir: manifest.json, one point
// file per scene, label files for the labeled split, and ground truth for
// every other scene in a separate sealed manifest the training path never
// opens.
inline GenSummary synth_generate(const RunConfig& rc) {
  const SynthDataset ds =
      synth_dataset(rc.gen, rc.labeled_scenes, rc.unlabeled_scenes, rc.test_scenes, rc.seed);
  const std::filesystem::path dir = rc.dataset_dir;

  nlohmann::json manifest;
  manifest["classes"] = nlohmann::json::array();
  for (const ClassSpec& c : rc.gen.classes) {
    manifest["classes"].push_back(
        {{"name", c.name}, {"length", c.length}, {"width", c.width}, {"height", c.height}});
  }
  manifest["scenes"] = nlohmann::json::array();
  nlohmann::json sealed;
  sealed["scenes"] = nlohmann::json::array();

  GenSummary summary;
  const auto emit = [&](const Scene& sc, const char* split, bool public_labels) {
    const std::string stem = detail::scene_stem(sc.id);
    const std::string points_rel = "points/" + stem + ".bin";
    save_points(dir / points_rel, sc.cloud);
    summary.total_points += sc.cloud.size();
    nlohmann::json entry = {{"id", sc.id}, {"points", points_rel}, {"split", split}};
    if (public_labels) {
      const std::string labels_rel = "labels/" + stem + ".txt";
      save_labels(dir / labels_rel, sc.labels);
      entry["labels"] = labels_rel;
    } else {
      const std::string sealed_rel = "sealed/" + stem + ".txt";
      save_labels(dir / sealed_rel, sc.labels);
      sealed["scenes"].push_back({{"id", sc.id}, {"labels", sealed_rel}});
    }
    manifest["scenes"].push_back(std::move(entry));
  };

  for (const Scene& sc : ds.labeled) {
    emit(sc, "labeled", true);
    ++summary.labeled;
  }
  for (const Scene& sc : ds.unlabeled) {
    emit(sc, "unlabeled", false);
    ++summary.unlabeled;
  }
  for (const Scene& sc : ds.test) {
    emit(sc, "test", false);
    ++summary.test;
  }

  detail::write_file_bytes(dir / "manifest.json", manifest.dump(2) + "\n");
  detail::write_file_bytes(dir / "sealed_manifest.json", sealed.dump(2) + "\n");
  return summary;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const std::filesystem::path manifest_path = dir / "manifest.json";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_file_bytes(manifest_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw MalformedFile(manifest_path.string() + ": " + e.what());
  }

  Dataset ds;
  try {
    detail::check_keys(manifest, "manifest", {"classes", "scenes"});
    ds.classes = detail::parse_classes(manifest.at("classes"), "manifest.classes");
    if (!manifest.contains("scenes") || !manifest.at("scenes").is_array()) {
      throw ConfigError("manifest: missing scenes array");
    }
    for (const auto& entry : manifest.at("scenes")) {
      detail::check_keys(entry, "manifest.scenes[]", {"id", "points", "split", "labels"});
      Scene sc;
      sc.id = detail::require<int>(entry, "manifest.scenes[]", "id");
      const auto split = detail::require<std::string>(entry, "manifest.scenes[]", "split");
      sc.cloud = load_points(dir / detail::require<std::string>(entry, "manifest.scenes[]", "points"));
      if (split == "labeled") {
        sc.labels = load_labels(dir / detail::require<std::string>(entry, "manifest.scenes[]", "labels"));
        sc.labeled = true;
        ds.labeled.push_back(std::move(sc));
      } else if (split == "unlabeled" || split == "test") {
        if (entry.contains("labels")) {
          throw ConfigError("manifest scene " + std::to_string(sc.id) +
                            ": non-labeled scenes must not reference a label file");
        }
        (split == "unlabeled" ? ds.unlabeled : ds.test).push_back(std::move(sc));
      } else {
        throw ConfigError("manifest scene " + std::to_string(sc.id) + ": unknown split \"" + split +
                          "\"");
      }
    }
  } catch (const ConfigError& e) {
    throw MalformedFile(manifest_path.string() + ": " + e.what());
  }

  const std::filesystem::path sealed_path = dir / "sealed_manifest.json";
  if (std::filesystem::exists(sealed_path)) {
    nlohmann::json sealed;
    try {
      sealed = nlohmann::json::parse(detail::read_file_bytes(sealed_path));
    } catch (const nlohmann::json::parse_error& e) {
      throw MalformedFile(sealed_path.string() + ": " + e.what());
    }
    try {
      detail::check_keys(sealed, "sealed manifest", {"scenes"});
      for (const auto& entry : sealed.at("scenes")) {
        detail::check_keys(entry, "sealed.scenes[]", {"id", "labels"});
        const int id = detail::require<int>(entry, "sealed.scenes[]", "id");
        ds.sealed[id] = load_labels(dir / detail::require<std::string>(entry, "sealed.scenes[]", "labels"));
      }
    } catch (const ConfigError& e) {
      throw MalformedFile(sealed_path.string() + ": " + e.what());
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Threshold log (JSON lines) and metric CSV
// ---------------------------------------------------------------------------

struct ThresholdRecord {
  int epoch = 0;
  int class_id = 0;
  ClassThresholds thresholds;
};

inline nlohmann::json threshold_record_to_json(const ThresholdRecord& r) {
  return {{"epoch", r.epoch},          {"class", r.class_id},
          {"cls_low", r.thresholds.cls.low},   {"cls_high", r.thresholds.cls.high},
          {"obj_low", r.thresholds.obj.low},   {"obj_high", r.thresholds.obj.high},
          {"iou_low", r.thresholds.iou.low},   {"iou_high", r.thresholds.iou.high}};
}

inline void threshold_log_append(const std::filesystem::path& path, const ThresholdRecord& r) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoFailure("cannot open " + path.string() + " for appending");
  out << threshold_record_to_json(r).dump() << '\n';
  if (!out.good()) throw IoFailure("write error on " + path.string());
}

// One line per class, ascending class id.
inline void append_threshold_records(const std::filesystem::path& path, const DualThresholds& dt,
                                     int epoch) {
  for (const auto& [cls, th] : dt.per_class) {
    threshold_log_append(path, ThresholdRecord{epoch, cls, th});
  }
}

inline std::vector<ThresholdRecord> read_threshold_log(const std::filesystem::path& path) {
  const std::string text = detail::read_file_bytes(path);
  std::vector<ThresholdRecord> out;
  std::istringstream lines(text);
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      detail::check_keys(j, "threshold record",
                         {"epoch", "class", "cls_low", "cls_high", "obj_low", "obj_high", "iou_low",
                          "iou_high"});
      ThresholdRecord r;
      r.epoch = detail::require<int>(j, "threshold record", "epoch");
      r.class_id = detail::require<int>(j, "threshold record", "class");
      r.thresholds.cls = {detail::require<double>(j, "threshold record", "cls_low"),
                          detail::require<double>(j, "threshold record", "cls_high")};
      r.thresholds.obj = {detail::require<double>(j, "threshold record", "obj_low"),
                          detail::require<double>(j, "threshold record", "obj_high")};
      r.thresholds.iou = {detail::require<double>(j, "threshold record", "iou_low"),
                          detail::require<double>(j, "threshold record", "iou_high")};
      out.push_back(r);
    } catch (const nlohmann::json::parse_error& e) {
      throw MalformedFile(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw MalformedFile(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

struct EpochMetrics {
  int epoch = 0;  // 0 is the burn-in baseline row
  std::vector<double> ap;
  PrecisionResult pseudo_precision;
  PrecisionResult pseudo_recall;
  std::size_t n_high = 0;
  std::size_t n_ambiguous = 0;
  std::size_t n_low = 0;
};

inline std::string metrics_to_csv(const std::vector<std::string>& class_names,
                                  const std::vector<EpochMetrics>& rows) {
  std::string out = "epoch";
  for (const std::string& name : class_names) out += ",ap_" + name;
  out += ",pseudo_precision,pseudo_recall,n_high,n_ambiguous,n_low\n";
  char buf[64];
  for (const EpochMetrics& m : rows) {
    out += std::to_string(m.epoch);
    for (std::size_t k = 0; k < class_names.size(); ++k) {
      const double v = k < m.ap.size() ? m.ap[k] : 0.0;
      std::snprintf(buf, sizeof(buf), ",%.6f", v);
      out += buf;
    }
    out += ',';
    if (m.pseudo_precision.percent) out += *m.pseudo_precision.percent;
    out += ',';
    if (m.pseudo_recall.percent) out += *m.pseudo_recall.percent;
    out += ',' + std::to_string(m.n_high);
    out += ',' + std::to_string(m.n_ambiguous);
    out += ',' + std::to_string(m.n_low);
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detector parameter files
// ---------------------------------------------------------------------------

inline void save_params(const std::filesystem::path& path, const DetectorParams& p) {
  const nlohmann::json j = {{"classes", p.classes}, {"theta", p.theta}};
  detail::write_file_bytes(path, j.dump(2) + "\n");
}

inline DetectorParams load_params(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file_bytes(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw MalformedFile(path.string() + ": " + e.what());
  }
  try {
    detail::check_keys(j, "params", {"classes", "theta"});
    DetectorParams p;
    p.classes = detail::require<int>(j, "params", "classes");
    p.theta = detail::require<std::vector<double>>(j, "params", "theta");
    if (p.classes < 1 || p.theta.size() != static_cast<std::size_t>(p.dim())) {
      throw ConfigError("params: theta length does not match the class count");
    }
    return p;
  } catch (const ConfigError& e) {
    throw MalformedFile(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Run orchestration
// ---------------------------------------------------------------------------

inline std::map<int, double> flat_iou_thresholds(std::size_t n_classes, double t) {
  std::map<int, double> out;
  for (std::size_t k = 0; k < n_classes; ++k) out[static_cast<int>(k)] = t;
  return out;
}

inline std::map<int, double> evaluate_on_split(const DetectorParams& params,
                                               const DetectorConfig& cfg,
                                               const std::vector<Scene>& scenes,
                                               const std::map<int, std::vector<Box3D>>& sealed,
                                               std::size_t n_classes, double iou) {
  std::vector<std::vector<Detection>> preds;
  std::vector<std::vector<Box3D>> gts;
  for (const Scene& sc : scenes) {
    preds.push_back(toy_detect(sc, params, cfg));
    const auto it = sealed.find(sc.id);
    gts.push_back(it == sealed.end() ? sc.labels : it->second);
  }
  return evaluate_ap(preds, gts, flat_iou_thresholds(n_classes, iou));
}

inline std::pair<PrecisionResult, PrecisionResult> pseudo_metrics_vs_sealed(
    const MinedLabels& mined, const std::vector<Scene>& unlabeled,
    const std::map<int, std::vector<Box3D>>& sealed) {
  std::size_t p_correct = 0, p_total = 0, r_hit = 0, r_total = 0;
  for (const Scene& sc : unlabeled) {
    const auto gt_it = sealed.find(sc.id);
    const std::vector<Box3D> empty;
    const std::vector<Box3D>& gts = gt_it == sealed.end() ? empty : gt_it->second;
    const auto mined_it = mined.find(sc.id);
    const std::vector<Box3D>& pseudo = mined_it == mined.end() ? empty : mined_it->second;
    const PrecisionResult p = pseudo_label_precision(pseudo, gts);
    const PrecisionResult r = pseudo_label_recall(pseudo, gts);
    p_correct += p.correct;
    p_total += p.total;
    r_hit += r.correct;
    r_total += r.total;
  }
  return {make_precision_result(p_correct, p_total), make_precision_result(r_hit, r_total)};
}

struct TrainOutcome {
  DetectorParams burn_in_params;
  MutualState state;
  std::vector<EpochMetrics> metrics;  // row 0 is the burn-in baseline
};

// Burn-in followed by the mutual-learning epochs, with per-epoch metrics
// evaluated on the held-out split using the EMA teacher. When `log_dir` is
// set, the threshold log and metric CSV land there.
inline TrainOutcome run_training(const RunConfig& rc, const Dataset& ds,
                                 const std::optional<std::filesystem::path>& log_dir) {
  const std::size_t n_classes = ds.classes.size();
  TrainConfig tc = rc.train;
  tc.seed = rc.seed;

  std::optional<std::filesystem::path> threshold_log;
  if (log_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*log_dir, ec);
    if (ec) throw IoFailure("cannot create directory " + log_dir->string());
    threshold_log = *log_dir / "thresholds.jsonl";
    std::filesystem::remove(*threshold_log);
  }

  TrainOutcome out;
  out.burn_in_params = burn_in(ds.labeled, static_cast<int>(n_classes), tc, rc.detector);

  const auto baseline_ap = evaluate_on_split(out.burn_in_params, rc.detector, ds.test, ds.sealed,
                                             n_classes, rc.eval_iou);
  EpochMetrics base;
  base.epoch = 0;
  for (std::size_t k = 0; k < n_classes; ++k) base.ap.push_back(baseline_ap.at(static_cast<int>(k)));
  base.pseudo_precision = make_precision_result(0, 0);
  base.pseudo_recall = make_precision_result(0, 0);
  out.metrics.push_back(std::move(base));

  out.state = MutualState{out.burn_in_params, out.burn_in_params, {}, 0};
  for (int epoch = 1; epoch <= tc.mutual_epochs; ++epoch) {
    const EpochRecord rec =
        mutual_learning_epoch(out.state, ds.labeled, ds.unlabeled, ds.class_ids(), tc, rc.detector);
    if (threshold_log) append_threshold_records(*threshold_log, rec.thresholds, epoch);

    EpochMetrics m;
    m.epoch = epoch;
    const auto ap =
        evaluate_on_split(out.state.teacher, rc.detector, ds.test, ds.sealed, n_classes, rc.eval_iou);
    for (std::size_t k = 0; k < n_classes; ++k) m.ap.push_back(ap.at(static_cast<int>(k)));
    const auto [prec, rec_] = pseudo_metrics_vs_sealed(out.state.mined, ds.unlabeled, ds.sealed);
    m.pseudo_precision = prec;
    m.pseudo_recall = rec_;
    m.n_high = rec.n_high;
    m.n_ambiguous = rec.n_ambiguous;
    m.n_low = rec.n_low;
    out.metrics.push_back(std::move(m));
  }

  if (log_dir) {
    std::vector<std::string> names;
    for (const ClassSpec& c : ds.classes) names.push_back(c.name);
    detail::write_file_bytes(*log_dir / "metrics.csv", metrics_to_csv(names, out.metrics));
    save_params(*log_dir / "burnin_params.json", out.burn_in_params);
    save_params(*log_dir / "teacher_params.json", out.state.teacher);
    save_params(*log_dir / "student_params.json", out.state.student);
  }
  return out;
}

}  // namespace hssda
