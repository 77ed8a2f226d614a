#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "hssda/box.hpp"

namespace hssda {

enum class IouMode { bev, full3d };

namespace detail {

// Intersection areas below this are treated as zero to suppress sign noise
// from near-collinear clipping.
inline constexpr double kAreaEps = 1e-12;

// Shoelace area of a simple polygon (positive for counterclockwise order).
inline double polygon_area(const std::vector<Vec2>& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    acc += poly[j].x * poly[i].y - poly[i].x * poly[j].y;
  }
  return 0.5 * acc;
}

// Sutherland-Hodgman: clip `subject` against the half-plane left of the
// directed edge a->b. Both polygons are convex and counterclockwise.
inline std::vector<Vec2> clip_against_edge(const std::vector<Vec2>& subject, Vec2 a, Vec2 b) {
  std::vector<Vec2> out;
  out.reserve(subject.size() + 1);
  const double ex = b.x - a.x, ey = b.y - a.y;
  auto side = [&](const Vec2& p) { return ex * (p.y - a.y) - ey * (p.x - a.x); };
  const std::size_t n = subject.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2& prev = subject[j];
    const Vec2& cur = subject[i];
    const double sp = side(prev), sc = side(cur);
    const bool prev_in = sp >= 0.0, cur_in = sc >= 0.0;
    if (prev_in != cur_in) {
      const double t = sp / (sp - sc);
      out.push_back({prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)});
    }
    if (cur_in) out.push_back(cur);
  }
  return out;
}

inline double bev_intersection_area(const Box3D& a, const Box3D& b) {
  const auto ca = a.bev_corners();
  const auto cb = b.bev_corners();
  std::vector<Vec2> poly(ca.begin(), ca.end());
  for (int e = 0; e < 4 && !poly.empty(); ++e) {
    poly = clip_against_edge(poly, cb[e], cb[(e + 1) % 4]);
  }
  const double area = polygon_area(poly);
  return area < kAreaEps ? 0.0 : area;
}

inline double z_overlap(const Box3D& a, const Box3D& b) {
  const double lo = std::max(a.cz - 0.5 * a.height, b.cz - 0.5 * b.height);
  const double hi = std::min(a.cz + 0.5 * a.height, b.cz + 0.5 * b.height);
  return std::max(0.0, hi - lo);
}

}  // namespace detail

// IoU of the two rotated BEV footprints.
inline double bev_iou(const Box3D& a, const Box3D& b) {
  const double inter = detail::bev_intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.bev_area() + b.bev_area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// Full 3D IoU for upright boxes: BEV intersection area times vertical
// overlap, over the volume union.
inline double iou_3d(const Box3D& a, const Box3D& b) {
  const double dz = detail::z_overlap(a, b);
  if (dz <= 0.0) return 0.0;
  const double inter = detail::bev_intersection_area(a, b) * dz;
  if (inter <= 0.0) return 0.0;
  const double uni = a.volume() + b.volume() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

inline double iou(const Box3D& a, const Box3D& b, IouMode mode) {
  return mode == IouMode::bev ? bev_iou(a, b) : iou_3d(a, b);
}

// Pairwise IoU, |as| x |bs|, element (i, j) = iou(as[i], bs[j]).
inline std::vector<std::vector<double>> iou_matrix(std::span<const Box3D> as, std::span<const Box3D> bs,
                                                   IouMode mode) {
  std::vector<std::vector<double>> m(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) {
    m[i].resize(bs.size());
    for (std::size_t j = 0; j < bs.size(); ++j) m[i][j] = iou(as[i], bs[j], mode);
  }
  return m;
}

// Indices of points inside the box. Boundary points count as inside.
inline std::vector<std::size_t> points_in_box(const PointCloud& pc, const Box3D& box) {
  std::vector<std::size_t> out;
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double hl = 0.5 * box.length, hw = 0.5 * box.width, hh = 0.5 * box.height;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const double dx = pc.x(i) - box.cx;
    const double dy = pc.y(i) - box.cy;
    const double dz = pc.z(i) - box.cz;
    const double lx = c * dx + s * dy;
    const double ly = -s * dx + c * dy;
    if (std::abs(lx) <= hl && std::abs(ly) <= hw && std::abs(dz) <= hh) out.push_back(i);
  }
  return out;
}

// Remove every point covered by any of the boxes; survivor order preserved.
inline PointCloud remove_points_in_boxes(const PointCloud& pc, std::span<const Box3D> boxes) {
  std::vector<char> dead(pc.size(), 0);
  for (const Box3D& b : boxes) {
    for (std::size_t i : points_in_box(pc, b)) dead[i] = 1;
  }
  PointCloud out;
  out.extra_dims = pc.extra_dims;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    if (!dead[i]) out.append_from(pc, i);
  }
  return out;
}

// Fold yaw into (-pi/2, pi/2] by a pi rotation, which maps the footprint
// onto itself. Used wherever two boxes' size/yaw are compared
// component-wise.
inline Box3D canonical_bev(Box3D b) {
  b.yaw = normalize_yaw(b.yaw);
  if (b.yaw > 0.5 * kPi) {
    b.yaw -= kPi;
  } else if (b.yaw <= -0.5 * kPi) {
    b.yaw += kPi;
  }
  return b;
}

// Yaw difference respecting the pi-periodicity of the footprint; result in
// (-pi/2, pi/2].
inline double yaw_residual(double yaw_a, double yaw_b) {
  double d = normalize_yaw(yaw_a - yaw_b);
  if (d > 0.5 * kPi) d -= kPi;
  if (d <= -0.5 * kPi) d += kPi;
  return d;
}

// Greedy class-aware NMS: keep highest s_cls first, drop any same-class
// detection overlapping a kept one above `iou_thresh`.
inline std::vector<Detection> nms(std::span<const Detection> dets, double iou_thresh,
                                  IouMode mode = IouMode::full3d) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].s_cls > dets[b].s_cls; });
  std::vector<Detection> kept;
  for (std::size_t idx : order) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.box.class_id != dets[idx].box.class_id) continue;
      if (iou(k.box, dets[idx].box, mode) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(dets[idx]);
  }
  return kept;
}

}  // namespace hssda
