#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "hssda/augment.hpp"
#include "hssda/box.hpp"
#include "hssda/geometry.hpp"

namespace hssda {

// Fixed (non-learned) structure of the toy detector.
struct DetectorConfig {
  Region region;
  double cell = 0.8;             // BEV grid resolution, meters
  int min_cluster_points = 5;    // clusters below this are discarded
  double nms_iou = 0.3;          // final duplicate suppression
  double size_blend = 0.5;       // prior weight when blending box sizes

  int rows() const { return static_cast<int>(std::lround((region.x2 - region.x1) / cell)); }
  int cols() const { return static_cast<int>(std::lround((region.y2 - region.y1) / cell)); }
};

// Learned parameters as one flat vector: a density threshold logit, five
// values per class (score slope/bias and l/w/h size priors), then the
// objectness slope/bias.
struct DetectorParams {
  static constexpr int kPerClass = 5;

  std::vector<double> theta;
  int classes = 0;

  int dim() const { return 3 + kPerClass * classes; }

  double density_logit() const { return theta[0]; }
  double cls_slope(int k) const { return theta[1 + kPerClass * k]; }
  double cls_bias(int k) const { return theta[2 + kPerClass * k]; }
  double prior_l(int k) const { return theta[3 + kPerClass * k]; }
  double prior_w(int k) const { return theta[4 + kPerClass * k]; }
  double prior_h(int k) const { return theta[5 + kPerClass * k]; }
  double obj_slope() const { return theta[1 + kPerClass * classes]; }
  double obj_bias() const { return theta[2 + kPerClass * classes]; }

  double& density_logit() { return theta[0]; }
  double& cls_slope(int k) { return theta[1 + kPerClass * k]; }
  double& cls_bias(int k) { return theta[2 + kPerClass * k]; }
  double& prior_l(int k) { return theta[3 + kPerClass * k]; }
  double& prior_w(int k) { return theta[4 + kPerClass * k]; }
  double& prior_h(int k) { return theta[5 + kPerClass * k]; }
  double& obj_slope() { return theta[1 + kPerClass * classes]; }
  double& obj_bias() { return theta[2 + kPerClass * classes]; }
};

namespace detail {

inline double logistic(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

inline double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

}  // namespace detail

// Size priors seed the per-class parameters; slopes start at 1, biases at
// 0, and the initial density threshold is `density`.
inline DetectorParams init_detector_params(const std::vector<std::array<double, 3>>& class_sizes,
                                           double density = 1.5) {
  DetectorParams p;
  p.classes = static_cast<int>(class_sizes.size());
  p.theta.assign(p.dim(), 0.0);
  p.density_logit() = detail::inverse_softplus(density);
  for (int k = 0; k < p.classes; ++k) {
    p.cls_slope(k) = 1.0;
    p.cls_bias(k) = 0.0;
    p.prior_l(k) = class_sizes[k][0];
    p.prior_w(k) = class_sizes[k][1];
    p.prior_h(k) = class_sizes[k][2];
  }
  p.obj_slope() = 1.0;
  p.obj_bias() = 0.0;
  return p;
}

// BEV occupancy grid carrying, per cell, the point count, the member point
// indices, and a coordinate shift restoring each member to the frame the
// detection head reasons in. The shift is zero for a grid built in place
// and becomes the inverse patch translation after an unshuffle.
struct CellGrid {
  int rows = 0;
  int cols = 0;
  std::vector<double> count;
  std::vector<std::vector<std::uint32_t>> members;
  std::vector<Vec2> shift;

  std::size_t cells() const { return count.size(); }
};

inline CellGrid build_cell_grid(const PointCloud& cloud, const DetectorConfig& cfg) {
  CellGrid g;
  g.rows = cfg.rows();
  g.cols = cfg.cols();
  if (g.rows < 1 || g.cols < 1) throw std::invalid_argument("detector grid has no cells");
  const std::size_t n = static_cast<std::size_t>(g.rows) * g.cols;
  g.count.assign(n, 0.0);
  g.members.assign(n, {});
  g.shift.assign(n, Vec2{});
  const double wx = (cfg.region.x2 - cfg.region.x1) / g.rows;
  const double wy = (cfg.region.y2 - cfg.region.y1) / g.cols;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const double x = cloud.x(i), y = cloud.y(i);
    if (!detail::in_region_with_slack(cfg.region, x, y)) continue;
    const int r = std::clamp(static_cast<int>((x - cfg.region.x1) / wx), 0, g.rows - 1);
    const int c = std::clamp(static_cast<int>((y - cfg.region.y1) / wy), 0, g.cols - 1);
    const std::size_t cell = static_cast<std::size_t>(r) * g.cols + c;
    g.count[cell] += 1.0;
    g.members[cell].push_back(static_cast<std::uint32_t>(i));
  }
  return g;
}

// Invert a point-level patch shuffle on the feature grid: blocks move back
// to their source patch and every moved cell records the translation that
// maps its member points back to head-frame coordinates.
inline CellGrid unshuffle_cell_grid(const CellGrid& g, const PatchPermutation& p) {
  if (!p.valid()) throw ShapeMismatch("patch permutation is not a bijection on the grid");
  if (g.rows % p.rows != 0 || g.cols % p.cols != 0) {
    throw ShapeMismatch("grid dimensions must divide evenly into the patch grid");
  }
  CellGrid out;
  out.rows = g.rows;
  out.cols = g.cols;
  out.count.assign(g.cells(), 0.0);
  out.members.assign(g.cells(), {});
  out.shift.assign(g.cells(), Vec2{});
  const int bh = g.rows / p.rows, bw = g.cols / p.cols;
  for (int b = 0; b < p.patches(); ++b) {
    const int src = p.perm[b];  // shuffled position of patch b
    const Vec2 shift = detail::patch_shift(p, src, b);
    const int sr = (src / p.cols) * bh, sc = (src % p.cols) * bw;
    const int dr = (b / p.cols) * bh, dc = (b % p.cols) * bw;
    for (int r = 0; r < bh; ++r) {
      for (int c = 0; c < bw; ++c) {
        const std::size_t from = static_cast<std::size_t>(sr + r) * g.cols + (sc + c);
        const std::size_t to = static_cast<std::size_t>(dr + r) * g.cols + (dc + c);
        out.count[to] = g.count[from];
        out.members[to] = g.members[from];
        out.shift[to] = {g.shift[from].x + shift.x, g.shift[from].y + shift.y};
      }
    }
  }
  return out;
}

namespace detail {

// Detection head: threshold the density grid, group occupied cells into
// 8-connected components, fit an oriented box per cluster, and calibrate
// scores. Deterministic: components are seeded in row-major order and
// points visited in index order.
inline std::vector<Detection> detect_on_grid(const PointCloud& cloud, const CellGrid& g,
                                             const DetectorParams& params,
                                             const DetectorConfig& cfg) {
  const double tau_d = softplus(params.density_logit());
  const std::size_t n_cells = g.cells();
  std::vector<char> occupied(n_cells, 0);
  for (std::size_t i = 0; i < n_cells; ++i) occupied[i] = g.count[i] >= tau_d;

  std::vector<int> component(n_cells, -1);
  std::vector<std::vector<std::size_t>> comps;
  std::vector<std::size_t> stack;
  for (std::size_t seed = 0; seed < n_cells; ++seed) {
    if (!occupied[seed] || component[seed] >= 0) continue;
    const int id = static_cast<int>(comps.size());
    comps.emplace_back();
    component[seed] = id;
    stack.assign(1, seed);
    while (!stack.empty()) {
      const std::size_t cell = stack.back();
      stack.pop_back();
      comps[id].push_back(cell);
      const int r = static_cast<int>(cell) / g.cols;
      const int c = static_cast<int>(cell) % g.cols;
      for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          if (dr == 0 && dc == 0) continue;
          const int nr = r + dr, nc = c + dc;
          if (nr < 0 || nr >= g.rows || nc < 0 || nc >= g.cols) continue;
          const std::size_t next = static_cast<std::size_t>(nr) * g.cols + nc;
          if (!occupied[next] || component[next] >= 0) continue;
          component[next] = id;
          stack.push_back(next);
        }
      }
    }
    std::sort(comps[id].begin(), comps[id].end());
  }

  std::vector<Detection> dets;
  for (const auto& cells : comps) {
    std::size_t n_points = 0;
    for (std::size_t cell : cells) n_points += g.members[cell].size();
    if (n_points < static_cast<std::size_t>(cfg.min_cluster_points)) continue;

    // Head-frame coordinates of the cluster's points.
    std::vector<double> xs, ys, zs;
    xs.reserve(n_points);
    ys.reserve(n_points);
    zs.reserve(n_points);
    for (std::size_t cell : cells) {
      for (std::uint32_t idx : g.members[cell]) {
        xs.push_back(cloud.x(idx) + g.shift[cell].x);
        ys.push_back(cloud.y(idx) + g.shift[cell].y);
        zs.push_back(cloud.z(idx));
      }
    }

    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n_points; ++i) {
      mx += xs[i];
      my += ys[i];
    }
    mx /= n_points;
    my /= n_points;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n_points; ++i) {
      const double dx = xs[i] - mx, dy = ys[i] - my;
      sxx += dx * dx;
      sxy += dx * dy;
      syy += dy * dy;
    }
    // Principal axis of the BEV scatter; (-pi/2, pi/2] by construction.
    const double yaw = 0.5 * std::atan2(2.0 * sxy, sxx - syy);

    const double cy = std::cos(yaw), sy = std::sin(yaw);
    double umin = 1e300, umax = -1e300, wmin = 1e300, wmax = -1e300;
    double zmin = 1e300, zmax = -1e300;
    for (std::size_t i = 0; i < n_points; ++i) {
      const double dx = xs[i] - mx, dy = ys[i] - my;
      const double u = cy * dx + sy * dy;
      const double w = -sy * dx + cy * dy;
      umin = std::min(umin, u);
      umax = std::max(umax, u);
      wmin = std::min(wmin, w);
      wmax = std::max(wmax, w);
      zmin = std::min(zmin, zs[i]);
      zmax = std::max(zmax, zs[i]);
    }
    const double meas_l = std::max(umax - umin, 0.15);
    const double meas_w = std::max(wmax - wmin, 0.15);
    const double meas_h = std::max(zmax - zmin, 0.15);
    const double mid_u = 0.5 * (umax + umin), mid_w = 0.5 * (wmax + wmin);

    // Nearest size prior in log space picks the class.
    int best_k = 0;
    double best_d = 1e300;
    for (int k = 0; k < params.classes; ++k) {
      const double pl = std::max(params.prior_l(k), 0.05);
      const double pw = std::max(params.prior_w(k), 0.05);
      const double ph = std::max(params.prior_h(k), 0.05);
      const double dl = std::log(meas_l) - std::log(pl);
      const double dw = std::log(meas_w) - std::log(pw);
      const double dh = std::log(meas_h) - std::log(ph);
      const double d = dl * dl + dw * dw + dh * dh;
      if (d < best_d) {
        best_d = d;
        best_k = k;
      }
    }

    Detection det;
    det.box.cx = mx + cy * mid_u - sy * mid_w;
    det.box.cy = my + sy * mid_u + cy * mid_w;
    det.box.cz = 0.5 * (zmin + zmax);
    const double blend = cfg.size_blend;
    det.box.length = blend * std::max(params.prior_l(best_k), 0.05) + (1.0 - blend) * meas_l;
    det.box.width = blend * std::max(params.prior_w(best_k), 0.05) + (1.0 - blend) * meas_w;
    det.box.height = blend * std::max(params.prior_h(best_k), 0.05) + (1.0 - blend) * meas_h;
    det.box.yaw = yaw;
    det.box.class_id = best_k;
    const double f_cls = std::log1p(static_cast<double>(n_points) / cells.size());
    const double f_obj = std::log1p(static_cast<double>(n_points));
    det.s_cls = logistic(params.cls_slope(best_k) * f_cls + params.cls_bias(best_k));
    det.s_obj = logistic(params.obj_slope() * f_obj + params.obj_bias());
    dets.push_back(det);
  }
  return nms(dets, cfg.nms_iou);
}

}  // namespace detail

// Plain inference: featurize in place, no patch machinery.
inline std::vector<Detection> toy_detect(const Scene& scene, const DetectorParams& params,
                                         const DetectorConfig& cfg) {
  const CellGrid g = build_cell_grid(scene.cloud, cfg);
  return detail::detect_on_grid(scene.cloud, g, params, cfg);
}

// Inference on a patch-shuffled input: featurize the shuffled points, undo
// the permutation on the feature grid, then run the head. Boxes come out in
// the original (unshuffled) frame.
inline std::vector<Detection> detect_with_shuffle(const Scene& shuffled, const PatchPermutation& p,
                                                  const DetectorParams& params,
                                                  const DetectorConfig& cfg) {
  const CellGrid g = unshuffle_cell_grid(build_cell_grid(shuffled.cloud, cfg), p);
  return detail::detect_on_grid(shuffled.cloud, g, params, cfg);
}

}  // namespace hssda
