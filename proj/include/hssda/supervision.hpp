#pragma once

#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "hssda/box.hpp"
#include "hssda/geometry.hpp"
#include "hssda/thresholds.hpp"

namespace hssda {

struct MissingClassThresholds : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Three-tier split of teacher predictions. The tiers are disjoint and cover
// the input exactly; ambiguous entries carry their soft weight.
struct HierarchicalLabels {
  std::vector<Detection> high;
  std::vector<std::pair<Detection, double>> ambiguous;
  std::vector<Detection> low;
};

inline double soft_weight(const Detection& d) { return d.s_cls * d.s_obj; }

// Tier rules, all strict: high needs every measure above its high
// threshold; ambiguous needs every measure above its low threshold; the
// rest is low. A value equal to a threshold falls to the lower tier.
inline HierarchicalLabels partition_predictions(const std::vector<Detection>& preds,
                                                const DualThresholds& th) {
  HierarchicalLabels out;
  for (const Detection& d : preds) {
    const auto it = th.per_class.find(d.box.class_id);
    if (it == th.per_class.end()) {
      throw MissingClassThresholds("no thresholds for class " + std::to_string(d.box.class_id));
    }
    if (!d.v.has_value()) {
      throw std::invalid_argument("partition_predictions: consistency IoU not set");
    }
    const ClassThresholds& t = it->second;
    const double v = *d.v;
    if (d.s_cls > t.cls.high && d.s_obj > t.obj.high && v > t.iou.high) {
      out.high.push_back(d);
    } else if (d.s_cls > t.cls.low && d.s_obj > t.obj.low && v > t.iou.low) {
      out.ambiguous.emplace_back(d, soft_weight(d));
    } else {
      out.low.push_back(d);
    }
  }
  return out;
}

// Per-scene training material: cleaned cloud, hard labels, soft-weighted
// labels.
struct TrainingView {
  int scene_id = -1;
  bool from_labeled_scene = false;
  PointCloud cloud;                                // low-confidence boxes' points removed
  std::vector<Box3D> strong;                       // GT plus high-tier pseudo labels
  std::vector<std::pair<Box3D, double>> weighted;  // ambiguous tier
};

// Duplicate suppression applied to the high tier before its boxes become
// training labels.
inline constexpr double kHighLabelNmsIou = 0.1;

inline TrainingView build_training_view(const Scene& scene, const HierarchicalLabels& labels,
                                        const std::optional<std::vector<Box3D>>& gt) {
  TrainingView view;
  view.scene_id = scene.id;
  view.from_labeled_scene = gt.has_value();

  std::vector<Box3D> low_boxes;
  low_boxes.reserve(labels.low.size());
  for (const Detection& d : labels.low) low_boxes.push_back(d.box);
  view.cloud = remove_points_in_boxes(scene.cloud, low_boxes);

  if (gt.has_value()) view.strong = *gt;
  for (const Detection& d : nms(labels.high, kHighLabelNmsIou)) view.strong.push_back(d.box);

  view.weighted.reserve(labels.ambiguous.size());
  for (const auto& [d, w] : labels.ambiguous) view.weighted.emplace_back(d.box, w);
  return view;
}

}  // namespace hssda
