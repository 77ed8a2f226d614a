#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

#include "hssda/augment.hpp"
#include "hssda/box.hpp"
#include "hssda/breaks.hpp"
#include "hssda/geometry.hpp"
#include "hssda/rng.hpp"

namespace hssda {

struct EmptyConfidentSet : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Provenance { ground_truth, mined };

// A scene the threshold stage trusts: labeled scenes carry ground truth,
// mined scenes carry only their high-confidence pseudo labels.
struct ConfidentScene {
  int id = -1;
  PointCloud cloud;
  std::vector<Box3D> labels;
  Provenance provenance = Provenance::ground_truth;
};

struct ClassThresholds {
  ThresholdPair cls;
  ThresholdPair obj;
  ThresholdPair iou;
};

struct DualThresholds {
  std::map<int, ClassThresholds> per_class;
  int epoch = 0;
};

// Detector inference hook: frozen parameters baked into the callable.
using DetectFn = std::function<std::vector<Detection>(const Scene&)>;

// Predictions on a scene and on its weakly augmented copy, with the
// transform connecting the two frames.
struct PairedPrediction {
  std::vector<Detection> original;
  std::vector<Detection> augmented;
  RigidTransform transform;
};

// For each ground-truth box, the best same-class prediction by 3D IoU,
// kept only above tau_pair. Strict argmax comparison keeps the lowest
// prediction index on ties; one prediction may serve several GTs.
inline std::vector<std::pair<std::size_t, std::size_t>> match_gt_to_predictions(
    const std::vector<Box3D>& gt, const std::vector<Detection>& preds, double tau_pair) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t j = 0; j < gt.size(); ++j) {
    double best = 0.0;
    std::size_t best_k = 0;
    bool found = false;
    for (std::size_t k = 0; k < preds.size(); ++k) {
      if (preds[k].box.class_id != gt[j].class_id) continue;
      const double ov = iou_3d(gt[j], preds[k].box);
      if (ov > best) {
        best = ov;
        best_k = k;
        found = true;
      }
    }
    if (found && best > tau_pair) pairs.emplace_back(j, best_k);
  }
  return pairs;
}

// Max IoU between a prediction and the augmented-copy predictions brought
// back into the original frame. Empty augmented set scores 0.
inline double consistency_iou(const Detection& pred, const std::vector<Detection>& augmented,
                              const RigidTransform& transform) {
  double best = 0.0;
  for (const Detection& d : augmented) {
    best = std::max(best, iou_3d(pred.box, invert_transform_box(d.box, transform)));
  }
  return best;
}

struct ClassPools {
  ScorePool cls;
  ScorePool obj;
  ScorePool iou;
};

inline void ensure_class_pools(std::map<int, ClassPools>& pools, int class_id) {
  auto [it, inserted] = pools.try_emplace(class_id);
  if (inserted) {
    it->second.cls.class_id = class_id;
    it->second.cls.measure = Measure::cls;
    it->second.obj.class_id = class_id;
    it->second.obj.measure = Measure::obj;
    it->second.iou.class_id = class_id;
    it->second.iou.measure = Measure::iou;
  }
}

// Pool the matched predictions' scores per class. Scene order and GT index
// order fix the pool order, so the result is deterministic.
inline std::map<int, ClassPools> collect_score_pools(const std::vector<ConfidentScene>& dc,
                                                     const std::vector<PairedPrediction>& paired,
                                                     double tau_pair) {
  if (dc.size() != paired.size()) {
    throw std::invalid_argument("collect_score_pools: one paired prediction per confident scene");
  }
  std::map<int, ClassPools> pools;
  for (std::size_t s = 0; s < dc.size(); ++s) {
    const auto matches = match_gt_to_predictions(dc[s].labels, paired[s].original, tau_pair);
    for (const auto& [j, k] : matches) {
      const Detection& d = paired[s].original[k];
      const int c = dc[s].labels[j].class_id;
      ensure_class_pools(pools, c);
      ClassPools& p = pools.at(c);
      p.cls.values.push_back(d.s_cls);
      p.obj.values.push_back(d.s_obj);
      p.iou.values.push_back(consistency_iou(d, paired[s].augmented, paired[s].transform));
    }
  }
  return pools;
}

namespace detail {

// Tag spaces for the forked RNG streams inside threshold generation.
inline constexpr std::uint64_t kAugmentStream = std::uint64_t{1} << 32;
inline constexpr std::uint64_t kPoolStream = std::uint64_t{2} << 32;

}  // namespace detail

// One full dual-threshold generation pass: run the detector on every
// confident scene and its weak augmentation, pool matched scores per class,
// and solve each pool for (low, high). Classes listed in `class_ids` but
// missing from the pools get the conservative fallback. Only forked RNG
// streams are consumed, so the parent stream never advances and repeated
// calls with equal inputs are bit-identical.
inline DualThresholds generate_dual_thresholds(const std::vector<ConfidentScene>& dc,
                                               const std::vector<int>& class_ids,
                                               const DetectFn& detector, const Rng& rng,
                                               double tau_pair = 0.5, int epoch = 0) {
  if (dc.empty()) throw EmptyConfidentSet("dual-threshold generation needs a nonempty confident set");

  std::vector<PairedPrediction> paired;
  paired.reserve(dc.size());
  for (const ConfidentScene& cs : dc) {
    Scene scene;
    scene.id = cs.id;
    scene.cloud = cs.cloud;
    scene.labels = cs.labels;
    scene.labeled = cs.provenance == Provenance::ground_truth;

    Rng aug_rng = rng.fork(detail::kAugmentStream + static_cast<std::uint64_t>(cs.id));
    auto [aug_scene, transform] = weak_augment(scene, aug_rng);

    PairedPrediction pp;
    pp.original = detector(scene);
    pp.augmented = detector(aug_scene);
    pp.transform = transform;
    paired.push_back(std::move(pp));
  }

  auto pools = collect_score_pools(dc, paired, tau_pair);

  DualThresholds out;
  out.epoch = epoch;
  for (int c : class_ids) {
    ensure_class_pools(pools, c);
    const ClassPools& p = pools.at(c);
    ClassThresholds t;
    const std::uint64_t base = detail::kPoolStream + 4 * static_cast<std::uint64_t>(c);
    Rng r_cls = rng.fork(base);
    Rng r_obj = rng.fork(base + 1);
    Rng r_iou = rng.fork(base + 2);
    t.cls = dual_threshold(p.cls, r_cls);
    t.obj = dual_threshold(p.obj, r_obj);
    t.iou = dual_threshold(p.iou, r_iou);
    out.per_class[c] = t;
  }
  return out;
}

}  // namespace hssda
