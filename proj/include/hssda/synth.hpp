#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hssda/augment.hpp"
#include "hssda/box.hpp"
#include "hssda/geometry.hpp"
#include "hssda/rng.hpp"

namespace hssda {

struct ClassSpec {
  std::string name;
  double length = 1.0;
  double width = 1.0;
  double height = 1.0;
};

struct SynthConfig {
  Region region;
  std::vector<ClassSpec> classes;
  int min_objects = 2;
  int max_objects = 5;
  int min_decoys = 1;
  int max_decoys = 3;
  int clutter_points = 120;
  double noise_sigma = 0.03;
  // Surface point budget falls off linearly with range.
  int near_points = 170;
  int far_points = 45;
  double size_jitter = 0.10;
  double edge_margin = 4.0;
  double decoy_clearance = 4.0;
  double min_gap = 1.6;  // clear space between placed objects, in meters
};

namespace detail {

// Uniform point on one of the four side faces or the top face, chosen
// proportionally to area, in the box's local frame.
inline std::array<double, 3> sample_box_surface(const Box3D& b, Rng& rng) {
  const double hl = 0.5 * b.length, hw = 0.5 * b.width, hh = 0.5 * b.height;
  const double a_front = b.width * b.height;   // x = +/-hl
  const double a_side = b.length * b.height;   // y = +/-hw
  const double a_top = b.length * b.width;     // z = +hh
  const double total = 2.0 * a_front + 2.0 * a_side + a_top;
  double pick = rng.uniform(0.0, total);
  const double u = rng.uniform(), v = rng.uniform();
  if (pick < a_front) return {hl, hw * (2.0 * u - 1.0), hh * (2.0 * v - 1.0)};
  pick -= a_front;
  if (pick < a_front) return {-hl, hw * (2.0 * u - 1.0), hh * (2.0 * v - 1.0)};
  pick -= a_front;
  if (pick < a_side) return {hl * (2.0 * u - 1.0), hw, hh * (2.0 * v - 1.0)};
  pick -= a_side;
  if (pick < a_side) return {hl * (2.0 * u - 1.0), -hw, hh * (2.0 * v - 1.0)};
  return {hl * (2.0 * u - 1.0), hw * (2.0 * v - 1.0), hh};
}

inline void append_box_points(PointCloud& cloud, const Box3D& b, int n, double noise_sigma,
                              Rng& rng) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  for (int i = 0; i < n; ++i) {
    const auto local = sample_box_surface(b, rng);
    const double px = b.cx + c * local[0] - s * local[1] + rng.normal(0.0, noise_sigma);
    const double py = b.cy + s * local[0] + c * local[1] + rng.normal(0.0, noise_sigma);
    const double pz = b.cz + local[2] + rng.normal(0.0, noise_sigma);
    cloud.append(px, py, pz, {1.0});
  }
}

}  // namespace detail

// One synthetic scene: ground-truth boxes with range-attenuated surface
// points, plus decoy point blobs (no label) and sparse clutter. The scene
// id alone determines the content for a fixed config and seed.
inline Scene synth_scene(int id, const SynthConfig& cfg, const Rng& root) {
  validate_region(cfg.region);
  Rng rng = root.fork(static_cast<std::uint64_t>(id));
  Scene sc;
  sc.id = id;
  sc.cloud.extra_dims = 1;

  const double x1 = cfg.region.x1 + cfg.edge_margin, x2 = cfg.region.x2 - cfg.edge_margin;
  const double y1 = cfg.region.y1 + cfg.edge_margin, y2 = cfg.region.y2 - cfg.edge_margin;

  const int n_objects =
      cfg.min_objects + static_cast<int>(rng.uniform_int(
                            static_cast<std::uint64_t>(cfg.max_objects - cfg.min_objects + 1)));
  for (int i = 0; i < n_objects; ++i) {
    const auto cls = rng.uniform_int(cfg.classes.size());
    const ClassSpec& spec = cfg.classes[cls];
    Box3D b;
    b.class_id = static_cast<int>(cls);
    b.length = spec.length * rng.uniform(1.0 - cfg.size_jitter, 1.0 + cfg.size_jitter);
    b.width = spec.width * rng.uniform(1.0 - cfg.size_jitter, 1.0 + cfg.size_jitter);
    b.height = spec.height * rng.uniform(1.0 - cfg.size_jitter, 1.0 + cfg.size_jitter);
    b.yaw = rng.uniform(-kPi, kPi);
    bool placed = false;
    for (int attempt = 0; attempt < 25 && !placed; ++attempt) {
      b.cx = rng.uniform(x1, x2);
      b.cy = rng.uniform(y1, y2);
      b.cz = 0.5 * b.height;
      placed = true;
      Box3D padded = b;  // enforces min_gap of clear space around the box
      padded.length += 2.0 * cfg.min_gap;
      padded.width += 2.0 * cfg.min_gap;
      for (const Box3D& other : sc.labels) {
        if (bev_iou(padded, other) > 0.0) {
          placed = false;
          break;
        }
      }
    }
    if (!placed) continue;

    const double t = (b.cx - cfg.region.x1) / (cfg.region.x2 - cfg.region.x1);
    const double base = cfg.near_points + t * (cfg.far_points - cfg.near_points);
    const int n_pts = std::max(10, static_cast<int>(base * rng.uniform(0.85, 1.15)));
    detail::append_box_points(sc.cloud, b, n_pts, cfg.noise_sigma, rng);
    sc.labels.push_back(b);
  }

  const int n_decoys =
      cfg.min_decoys + static_cast<int>(rng.uniform_int(
                           static_cast<std::uint64_t>(cfg.max_decoys - cfg.min_decoys + 1)));
  for (int i = 0; i < n_decoys; ++i) {
    double dx = 0.0, dy = 0.0;
    bool clear = false;
    for (int attempt = 0; attempt < 25 && !clear; ++attempt) {
      dx = rng.uniform(x1, x2);
      dy = rng.uniform(y1, y2);
      clear = true;
      for (const Box3D& other : sc.labels) {
        if (std::hypot(dx - other.cx, dy - other.cy) < cfg.decoy_clearance) {
          clear = false;
          break;
        }
      }
    }
    if (!clear) continue;
    const int n_pts = 12 + static_cast<int>(rng.uniform_int(19));
    for (int p = 0; p < n_pts; ++p) {
      sc.cloud.append(dx + rng.normal(0.0, 0.9), dy + rng.normal(0.0, 0.9),
                      rng.uniform(0.1, 1.3), {1.0});
    }
  }

  for (int p = 0; p < cfg.clutter_points; ++p) {
    sc.cloud.append(rng.uniform(cfg.region.x1, cfg.region.x2),
                    rng.uniform(cfg.region.y1, cfg.region.y2), rng.uniform(-0.2, 0.4), {1.0});
  }
  return sc;
}

struct SynthDataset {
  std::vector<Scene> labeled;    // labels visible to training
  std::vector<Scene> unlabeled;  // labels present but sealed (evaluation only)
  std::vector<Scene> test;       // held-out evaluation split
};

inline SynthDataset synth_dataset(const SynthConfig& cfg, int n_labeled, int n_unlabeled,
                                  int n_test, std::uint64_t seed) {
  const Rng root(seed);
  SynthDataset ds;
  int id = 0;
  for (int i = 0; i < n_labeled; ++i, ++id) {
    ds.labeled.push_back(synth_scene(id, cfg, root));
    ds.labeled.back().labeled = true;
  }
  for (int i = 0; i < n_unlabeled; ++i, ++id) ds.unlabeled.push_back(synth_scene(id, cfg, root));
  for (int i = 0; i < n_test; ++i, ++id) ds.test.push_back(synth_scene(id, cfg, root));
  return ds;
}

inline SynthConfig reference_synth_config() {
  SynthConfig cfg;
  cfg.classes = {{"car", 4.2, 1.8, 1.6}, {"pedestrian", 0.8, 0.8, 1.75}, {"cyclist", 1.8, 0.6, 1.7}};
  return cfg;
}

}  // namespace hssda
