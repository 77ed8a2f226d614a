#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

#include "hssda/box.hpp"
#include "hssda/geometry.hpp"
#include "hssda/rng.hpp"

namespace hssda {

struct DegenerateRegion : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ShapeMismatch : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Global rigid augmentation, applied in fixed order: flip across the y axis
// (negate x), flip across the x axis (negate y), uniform scale about the
// origin, then rotation about the vertical axis.
struct RigidTransform {
  bool flip_x = false;  // negate x coordinate
  bool flip_y = false;  // negate y coordinate
  double scale = 1.0;
  double yaw_rot = 0.0;

  bool identity() const { return !flip_x && !flip_y && scale == 1.0 && yaw_rot == 0.0; }
};

inline void apply_transform_point(const RigidTransform& t, double& x, double& y, double& z) {
  if (t.flip_x) x = -x;
  if (t.flip_y) y = -y;
  x *= t.scale;
  y *= t.scale;
  z *= t.scale;
  const double c = std::cos(t.yaw_rot), s = std::sin(t.yaw_rot);
  const double nx = c * x - s * y;
  const double ny = s * x + c * y;
  x = nx;
  y = ny;
}

inline void invert_transform_point(const RigidTransform& t, double& x, double& y, double& z) {
  const double c = std::cos(t.yaw_rot), s = std::sin(t.yaw_rot);
  const double nx = c * x + s * y;
  const double ny = -s * x + c * y;
  x = nx / t.scale;
  y = ny / t.scale;
  z /= t.scale;
  if (t.flip_y) y = -y;
  if (t.flip_x) x = -x;
}

inline Box3D apply_transform_box(Box3D b, const RigidTransform& t) {
  apply_transform_point(t, b.cx, b.cy, b.cz);
  double yaw = b.yaw;
  if (t.flip_x) yaw = kPi - yaw;  // heading (cos,sin) -> (-cos,sin)
  if (t.flip_y) yaw = -yaw;
  b.yaw = normalize_yaw(yaw + t.yaw_rot);
  b.length *= t.scale;
  b.width *= t.scale;
  b.height *= t.scale;
  return b;
}

inline Box3D invert_transform_box(Box3D b, const RigidTransform& t) {
  invert_transform_point(t, b.cx, b.cy, b.cz);
  double yaw = b.yaw - t.yaw_rot;
  if (t.flip_y) yaw = -yaw;
  if (t.flip_x) yaw = kPi - yaw;
  b.yaw = normalize_yaw(yaw);
  b.length /= t.scale;
  b.width /= t.scale;
  b.height /= t.scale;
  return b;
}

inline std::vector<Box3D> apply_transform_boxes(std::vector<Box3D> boxes, const RigidTransform& t) {
  for (auto& b : boxes) b = apply_transform_box(b, t);
  return boxes;
}

inline std::vector<Box3D> invert_transform_boxes(std::vector<Box3D> boxes, const RigidTransform& t) {
  for (auto& b : boxes) b = invert_transform_box(b, t);
  return boxes;
}

inline PointCloud apply_transform_cloud(PointCloud pc, const RigidTransform& t) {
  for (std::size_t i = 0; i < pc.size(); ++i) {
    apply_transform_point(t, pc.xyz[3 * i], pc.xyz[3 * i + 1], pc.xyz[3 * i + 2]);
  }
  return pc;
}

inline Scene apply_transform_scene(Scene sc, const RigidTransform& t) {
  sc.cloud = apply_transform_cloud(std::move(sc.cloud), t);
  sc.labels = apply_transform_boxes(std::move(sc.labels), t);
  return sc;
}

// Teacher-side weak augmentation. Draw order is pinned (flip_x, flip_y,
// scale, rotation) so a seed fully determines the transform.
inline std::pair<Scene, RigidTransform> weak_augment(const Scene& scene, Rng& rng) {
  RigidTransform t;
  t.flip_x = rng.bernoulli(0.5);
  t.flip_y = rng.bernoulli(0.5);
  t.scale = rng.uniform(0.91, 1.12);
  t.yaw_rot = rng.uniform(-kPi / 4.0, kPi / 4.0);
  return {apply_transform_scene(scene, t), t};
}

// Axis-aligned BEV window the detector (and the patch shuffle) operates on.
struct Region {
  double x1 = 0.0;
  double x2 = 70.4;
  double y1 = -40.0;
  double y2 = 40.0;

  bool contains(double x, double y) const { return x >= x1 && x <= x2 && y >= y1 && y <= y2; }
};

inline void validate_region(const Region& r) {
  if (!(r.x1 < r.x2) || !(r.y1 < r.y2)) {
    throw DegenerateRegion("region must satisfy x1 < x2 and y1 < y2");
  }
}

// R x C patch grid over a region plus a bijection on patch indices.
// perm[i] is the destination patch of source patch i. Patch index = row * C
// + col, rows along x, cols along y.
struct PatchPermutation {
  int rows = 1;
  int cols = 1;
  std::vector<int> perm;
  Region region;

  int patches() const { return rows * cols; }
  double dx() const { return (region.x2 - region.x1) / rows; }
  double dy() const { return (region.y2 - region.y1) / cols; }

  // Cell index along one axis; the last cell is closed so the region's far
  // boundary belongs to it.
  static int cell(double v, double lo, double step, int n) {
    int i = static_cast<int>((v - lo) / step);
    return std::clamp(i, 0, n - 1);
  }

  int patch_of(double x, double y) const {
    return cell(x, region.x1, dx(), rows) * cols + cell(y, region.y1, dy(), cols);
  }

  std::vector<int> inverse() const {
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int>(i);
    return inv;
  }

  bool valid() const {
    if (rows < 1 || cols < 1 || static_cast<int>(perm.size()) != patches()) return false;
    std::vector<char> seen(perm.size(), 0);
    for (int p : perm) {
      if (p < 0 || p >= patches() || seen[p]) return false;
      seen[p] = 1;
    }
    return true;
  }
};

inline PatchPermutation random_patch_permutation(int rows, int cols, const Region& region, Rng& rng) {
  validate_region(region);
  if (rows < 1 || cols < 1) throw std::invalid_argument("patch grid needs rows >= 1 and cols >= 1");
  PatchPermutation p;
  p.rows = rows;
  p.cols = cols;
  p.region = region;
  p.perm.resize(static_cast<std::size_t>(rows) * cols);
  std::iota(p.perm.begin(), p.perm.end(), 0);
  rng.shuffle(p.perm);
  return p;
}

namespace detail {

// Translation that moves source patch `src` onto destination patch `dst`.
inline Vec2 patch_shift(const PatchPermutation& p, int src, int dst) {
  const int sr = src / p.cols, sc = src % p.cols;
  const int dr = dst / p.cols, dc = dst % p.cols;
  return {(dr - sr) * p.dx(), (dc - sc) * p.dy()};
}

// Patch translations are exact multiples of the cell size only in real
// arithmetic; this slack keeps a point that rounding pushed an ulp past the
// region edge from being dropped on a later unshuffle.
inline constexpr double kRegionSlack = 1e-9;

inline bool in_region_with_slack(const Region& r, double x, double y) {
  return x >= r.x1 - kRegionSlack && x <= r.x2 + kRegionSlack && y >= r.y1 - kRegionSlack &&
         y <= r.y2 + kRegionSlack;
}

}  // namespace detail

// Apply an existing patch permutation: drop out-of-region points, translate
// each point to its patch's destination cell, move boxes with the patch
// holding their center. Boxes centered outside the region are dropped.
inline Scene shuffle_points_with(const Scene& scene, const PatchPermutation& p) {
  if (!p.valid()) throw ShapeMismatch("patch permutation is not a bijection on the grid");
  Scene out;
  out.id = scene.id;
  out.labeled = scene.labeled;
  out.cloud.extra_dims = scene.cloud.extra_dims;
  for (std::size_t i = 0; i < scene.cloud.size(); ++i) {
    const double x = scene.cloud.x(i), y = scene.cloud.y(i);
    if (!detail::in_region_with_slack(p.region, x, y)) continue;
    const int src = p.patch_of(x, y);
    const Vec2 shift = detail::patch_shift(p, src, p.perm[src]);
    out.cloud.append_from(scene.cloud, i);
    out.cloud.xyz[out.cloud.xyz.size() - 3] += shift.x;
    out.cloud.xyz[out.cloud.xyz.size() - 2] += shift.y;
  }
  for (const Box3D& b : scene.labels) {
    if (!detail::in_region_with_slack(p.region, b.cx, b.cy)) continue;
    const int src = p.patch_of(b.cx, b.cy);
    const Vec2 shift = detail::patch_shift(p, src, p.perm[src]);
    Box3D moved = b;
    moved.cx += shift.x;
    moved.cy += shift.y;
    out.labels.push_back(moved);
  }
  return out;
}

inline std::pair<Scene, PatchPermutation> shuffle_points(const Scene& scene, int rows, int cols,
                                                         const Region& region, Rng& rng) {
  const PatchPermutation p = random_patch_permutation(rows, cols, region, rng);
  return {shuffle_points_with(scene, p), p};
}

// Undo a point-level shuffle by translating every patch back to its source
// cell. Exact for counts; coordinates round-trip within FP addition error.
inline Scene unshuffle_points(const Scene& scene, const PatchPermutation& p) {
  PatchPermutation inv = p;
  inv.perm = p.inverse();
  return shuffle_points_with(scene, inv);
}

// Dense H x W x F feature grid over the BEV region; rows follow x, cols
// follow y, matching the patch indexing.
struct GridFeatureMap {
  int height = 0;
  int width = 0;
  int features = 0;
  std::vector<double> data;  // (h * width + w) * features + f

  GridFeatureMap() = default;
  GridFeatureMap(int h, int w, int f)
      : height(h), width(w), features(f), data(static_cast<std::size_t>(h) * w * f, 0.0) {
    if (h < 1 || w < 1 || f < 1) throw ShapeMismatch("grid dimensions must be positive");
  }

  double& at(int h, int w, int f) { return data[(static_cast<std::size_t>(h) * width + w) * features + f]; }
  double at(int h, int w, int f) const {
    return data[(static_cast<std::size_t>(h) * width + w) * features + f];
  }
};

namespace detail {

inline void check_grid_shape(const GridFeatureMap& g, const PatchPermutation& p) {
  if (!p.valid()) throw ShapeMismatch("patch permutation is not a bijection on the grid");
  if (g.height % p.rows != 0 || g.width % p.cols != 0) {
    throw ShapeMismatch("grid dimensions must divide evenly into the patch grid");
  }
}

// Move block `src` of the block-partitioned grid to block `dst`.
inline void move_block(const GridFeatureMap& in, GridFeatureMap& out, const PatchPermutation& p,
                       int src, int dst) {
  const int bh = in.height / p.rows, bw = in.width / p.cols;
  const int sr = (src / p.cols) * bh, sc = (src % p.cols) * bw;
  const int dr = (dst / p.cols) * bh, dc = (dst % p.cols) * bw;
  for (int r = 0; r < bh; ++r) {
    for (int c = 0; c < bw; ++c) {
      for (int f = 0; f < in.features; ++f) {
        out.at(dr + r, dc + c, f) = in.at(sr + r, sc + c, f);
      }
    }
  }
}

}  // namespace detail

inline GridFeatureMap shuffle_grid(const GridFeatureMap& g, const PatchPermutation& p) {
  detail::check_grid_shape(g, p);
  GridFeatureMap out(g.height, g.width, g.features);
  for (int b = 0; b < p.patches(); ++b) detail::move_block(g, out, p, b, p.perm[b]);
  return out;
}

inline GridFeatureMap unshuffle_grid(const GridFeatureMap& g, const PatchPermutation& p) {
  detail::check_grid_shape(g, p);
  GridFeatureMap out(g.height, g.width, g.features);
  for (int b = 0; b < p.patches(); ++b) detail::move_block(g, out, p, p.perm[b], b);
  return out;
}

// Stored object for GT-sampling paste: a box and the points it owns, both
// in the pose they were captured at.
struct GtSample {
  Box3D box;
  PointCloud points;
};

// Paste up to `max_paste` database objects into the scene at their stored
// poses. A candidate touching any existing or already-pasted box in BEV is
// skipped. Selection order is a seeded shuffle of the database.
inline Scene gt_sample_paste(Scene scene, const std::vector<GtSample>& db, Rng& rng,
                             std::size_t max_paste) {
  if (db.empty() || max_paste == 0) return scene;
  std::vector<std::size_t> order(db.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  std::size_t pasted = 0;
  for (std::size_t idx : order) {
    if (pasted == max_paste) break;
    const GtSample& cand = db[idx];
    bool overlaps = false;
    for (const Box3D& b : scene.labels) {
      if (bev_iou(cand.box, b) > 0.0) {
        overlaps = true;
        break;
      }
    }
    if (overlaps) continue;
    for (std::size_t i = 0; i < cand.points.size(); ++i) scene.cloud.append_from(cand.points, i);
    scene.labels.push_back(cand.box);
    ++pasted;
  }
  return scene;
}

}  // namespace hssda
