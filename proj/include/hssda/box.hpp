#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <vector>

namespace hssda {

inline constexpr double kPi = 3.141592653589793238462643383279502884;

// Wrap an angle to (-pi, pi].
inline double normalize_yaw(double yaw) {
  yaw = std::fmod(yaw, 2.0 * kPi);
  if (yaw <= -kPi) yaw += 2.0 * kPi;
  if (yaw > kPi) yaw -= 2.0 * kPi;
  return yaw;
}

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

// Oriented 3D bounding box: center, extents, rotation about the vertical
// axis (counterclockwise in bird-eye view). `length` runs along the yaw
// direction, `width` across it, `height` along z.
struct Box3D {
  double cx = 0.0;
  double cy = 0.0;
  double cz = 0.0;
  double length = 1.0;
  double width = 1.0;
  double height = 1.0;
  double yaw = 0.0;  // radians, (-pi, pi]
  int class_id = 0;

  double volume() const { return length * width * height; }
  double bev_area() const { return length * width; }

  // BEV footprint corners in counterclockwise order.
  std::array<Vec2, 4> bev_corners() const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double hl = 0.5 * length, hw = 0.5 * width;
    std::array<Vec2, 4> out;
    const double lx[4] = {hl, -hl, -hl, hl};
    const double ly[4] = {hw, hw, -hw, -hw};
    for (int i = 0; i < 4; ++i) {
      out[i].x = cx + c * lx[i] - s * ly[i];
      out[i].y = cy + s * lx[i] + c * ly[i];
    }
    return out;
  }

  bool valid() const {
    return std::isfinite(cx) && std::isfinite(cy) && std::isfinite(cz) &&
           std::isfinite(yaw) && length > 0.0 && width > 0.0 && height > 0.0 &&
           std::isfinite(length) && std::isfinite(width) && std::isfinite(height);
  }
};

inline void validate_box(const Box3D& b) {
  if (!b.valid()) throw std::invalid_argument("Box3D: sizes must be positive and all fields finite");
}

// Point cloud: n points with xyz coordinates plus `extra_dims` additional
// real features per point (e.g. intensity). Interleaved flat storage.
struct PointCloud {
  std::vector<double> xyz;    // 3 * n
  std::vector<double> extra;  // extra_dims * n
  std::size_t extra_dims = 0;

  std::size_t size() const { return xyz.size() / 3; }
  bool empty() const { return xyz.empty(); }

  double x(std::size_t i) const { return xyz[3 * i]; }
  double y(std::size_t i) const { return xyz[3 * i + 1]; }
  double z(std::size_t i) const { return xyz[3 * i + 2]; }

  void append(double px, double py, double pz) {
    xyz.insert(xyz.end(), {px, py, pz});
    extra.insert(extra.end(), extra_dims, 0.0);
  }

  void append(double px, double py, double pz, const std::vector<double>& feats) {
    xyz.insert(xyz.end(), {px, py, pz});
    for (std::size_t k = 0; k < extra_dims; ++k) extra.push_back(k < feats.size() ? feats[k] : 0.0);
  }

  // Copy point i of `src` (extra features padded/truncated to fit).
  void append_from(const PointCloud& src, std::size_t i) {
    xyz.insert(xyz.end(), {src.x(i), src.y(i), src.z(i)});
    for (std::size_t k = 0; k < extra_dims; ++k)
      extra.push_back(k < src.extra_dims ? src.extra[src.extra_dims * i + k] : 0.0);
  }

  bool all_finite() const {
    for (double v : xyz)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Detector output: box plus classification confidence, objectness, and the
// consistency IoU `v` (filled by the threshold/mining stages).
struct Detection {
  Box3D box;
  double s_cls = 0.0;
  double s_obj = 0.0;
  std::optional<double> v;
};

// A scene as the pipeline sees it. `labels` holds ground truth for labeled
// scenes, mined pseudo labels for confident scenes rebuilt from them, and is
// empty for unlabeled scenes in the training path.
struct Scene {
  int id = -1;
  PointCloud cloud;
  std::vector<Box3D> labels;
  bool labeled = false;
};

}  // namespace hssda
