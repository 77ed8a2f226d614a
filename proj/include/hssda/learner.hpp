#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hssda/augment.hpp"
#include "hssda/box.hpp"
#include "hssda/detector.hpp"
#include "hssda/geometry.hpp"
#include "hssda/rng.hpp"
#include "hssda/supervision.hpp"
#include "hssda/thresholds.hpp"

namespace hssda {

struct DimMismatch : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NoLabeledData : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// theta_t <- alpha * theta_t + (1 - alpha) * theta_s, element-wise.
inline DetectorParams ema_update(const DetectorParams& teacher, const DetectorParams& student,
                                 double alpha) {
  if (teacher.theta.size() != student.theta.size() || teacher.classes != student.classes) {
    throw DimMismatch("ema_update: parameter vectors differ in dimensionality");
  }
  DetectorParams out = teacher;
  for (std::size_t i = 0; i < out.theta.size(); ++i) {
    out.theta[i] = alpha * teacher.theta[i] + (1.0 - alpha) * student.theta[i];
  }
  return out;
}

struct TrainConfig {
  double alpha = 0.999;        // EMA decay, applied once per epoch
  double learning_rate = 0.05;
  int burn_in_epochs = 10;
  int mutual_epochs = 10;
  int batch_size = 8;
  double tau_pair = 0.5;
  int shuffle_rows = 2;
  int shuffle_cols = 2;
  std::size_t max_paste = 2;
  std::uint64_t seed = 0;
};

struct Loss {
  double supervised = 0.0;
  double unsupervised = 0.0;
  double total = 0.0;  // always supervised + unsupervised
};

namespace detail {

inline double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

inline double bce(double s, double y) {
  const double p = std::clamp(s, 1e-12, 1.0 - 1e-12);
  return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

// Matching threshold between a prediction and a training label.
inline constexpr double kMatchIou = 0.5;

}  // namespace detail

// Loss of one view's predictions against its labels. A prediction is
// matched when some same-class label (hard or soft) overlaps it above 0.5
// 3D IoU; the best such label supplies the regression target. Terms from a
// soft label are scaled by its weight.
inline double view_loss(const TrainingView& view, const std::vector<Detection>& preds) {
  double loss = 0.0;
  for (const Detection& d : preds) {
    double best_iou = detail::kMatchIou;
    const Box3D* target = nullptr;
    double weight = 1.0;
    for (const Box3D& b : view.strong) {
      if (b.class_id != d.box.class_id) continue;
      const double ov = iou_3d(d.box, b);
      if (ov > best_iou) {
        best_iou = ov;
        target = &b;
        weight = 1.0;
      }
    }
    for (const auto& [b, w] : view.weighted) {
      if (b.class_id != d.box.class_id) continue;
      const double ov = iou_3d(d.box, b);
      if (ov > best_iou) {
        best_iou = ov;
        target = &b;
        weight = w;
      }
    }
    if (target == nullptr) {
      loss += detail::bce(d.s_cls, 0.0);
      continue;
    }
    double term = detail::bce(d.s_cls, 1.0);
    term += detail::smooth_l1(d.box.cx - target->cx);
    term += detail::smooth_l1(d.box.cy - target->cy);
    term += detail::smooth_l1(d.box.cz - target->cz);
    term += detail::smooth_l1(d.box.length - target->length);
    term += detail::smooth_l1(d.box.width - target->width);
    term += detail::smooth_l1(d.box.height - target->height);
    term += detail::smooth_l1(yaw_residual(d.box.yaw, target->yaw));
    loss += weight * term;
  }
  return loss;
}

// One student training example: the (possibly patch-shuffled) input cloud,
// the permutation to undo on the feature grid, and labels in the head
// frame.
struct StudentExample {
  Scene input;
  PatchPermutation perm;
  TrainingView view;
};

inline PatchPermutation identity_permutation(const Region& region) {
  PatchPermutation p;
  p.rows = 1;
  p.cols = 1;
  p.perm = {0};
  p.region = region;
  return p;
}

// Plain example: no augmentation, identity patch grid.
inline StudentExample example_from_view(const TrainingView& view, const Region& region) {
  StudentExample ex;
  ex.input.id = view.scene_id;
  ex.input.cloud = view.cloud;
  ex.perm = identity_permutation(region);
  ex.view = view;
  return ex;
}

// Augmented student example: paste database objects into the view, then
// patch-shuffle the input points. Labels stay in the head frame, where the
// unshuffled feature grid places the predictions.
inline StudentExample make_student_example(const TrainingView& view, const std::vector<GtSample>& db,
                                           const TrainConfig& tc, const Region& region, Rng& rng) {
  Scene staged;
  staged.id = view.scene_id;
  staged.cloud = view.cloud;
  staged.labels = view.strong;
  staged = gt_sample_paste(std::move(staged), db, rng, tc.max_paste);

  StudentExample ex;
  ex.view = view;
  ex.view.strong = staged.labels;
  auto [shuffled, perm] =
      shuffle_points(staged, tc.shuffle_rows, tc.shuffle_cols, region, rng);
  ex.input = std::move(shuffled);
  ex.input.labels.clear();
  ex.perm = perm;
  return ex;
}

namespace detail {

// The feature grid is independent of theta, so finite differences reuse
// one prepared grid per example across every probe.
inline std::vector<CellGrid> prepare_grids(const std::vector<StudentExample>& batch,
                                           const DetectorConfig& cfg) {
  std::vector<CellGrid> grids;
  grids.reserve(batch.size());
  for (const StudentExample& ex : batch) {
    grids.push_back(unshuffle_cell_grid(build_cell_grid(ex.input.cloud, cfg), ex.perm));
  }
  return grids;
}

inline Loss batch_loss_on_grids(const std::vector<StudentExample>& batch,
                                const std::vector<CellGrid>& grids, const DetectorParams& params,
                                const DetectorConfig& cfg) {
  Loss out;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto preds = detect_on_grid(batch[i].input.cloud, grids[i], params, cfg);
    const double l = view_loss(batch[i].view, preds);
    if (batch[i].view.from_labeled_scene) {
      out.supervised += l;
    } else {
      out.unsupervised += l;
    }
  }
  out.total = out.supervised + out.unsupervised;
  return out;
}

}  // namespace detail

// Loss over a batch. Supervised and unsupervised parts are split by the
// view's provenance; the total is their exact sum.
inline Loss batch_loss(const std::vector<StudentExample>& batch, const DetectorParams& params,
                       const DetectorConfig& cfg) {
  return detail::batch_loss_on_grids(batch, detail::prepare_grids(batch, cfg), params, cfg);
}

// Central finite-difference gradient of the batch loss.
inline std::vector<double> loss_gradient(const std::vector<StudentExample>& batch,
                                         const DetectorParams& params, const DetectorConfig& cfg,
                                         double h) {
  const auto grids = detail::prepare_grids(batch, cfg);
  std::vector<double> grad(params.theta.size(), 0.0);
  DetectorParams probe = params;
  for (std::size_t i = 0; i < params.theta.size(); ++i) {
    probe.theta[i] = params.theta[i] + h;
    const double up = detail::batch_loss_on_grids(batch, grids, probe, cfg).total;
    probe.theta[i] = params.theta[i] - h;
    const double down = detail::batch_loss_on_grids(batch, grids, probe, cfg).total;
    probe.theta[i] = params.theta[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

inline constexpr double kTrainGradStep = 1e-6;

// One gradient-descent step on the batch loss.
inline DetectorParams train_step(const DetectorParams& params, const std::vector<StudentExample>& batch,
                                 double lr, const DetectorConfig& cfg, double h = kTrainGradStep) {
  if (!(lr > 0.0)) throw std::invalid_argument("train_step: learning rate must be positive");
  const auto grad = loss_gradient(batch, params, cfg, h);
  DetectorParams out = params;
  for (std::size_t i = 0; i < out.theta.size(); ++i) out.theta[i] -= lr * grad[i];
  return out;
}

// Mean ground-truth extents per class over the labeled scenes; classes
// without examples fall back to unit cubes.
inline std::vector<std::array<double, 3>> mean_class_sizes(const std::vector<Scene>& labeled,
                                                           int n_classes) {
  std::vector<std::array<double, 3>> sums(n_classes, {0.0, 0.0, 0.0});
  std::vector<std::size_t> counts(n_classes, 0);
  for (const Scene& sc : labeled) {
    for (const Box3D& b : sc.labels) {
      if (b.class_id < 0 || b.class_id >= n_classes) continue;
      sums[b.class_id][0] += b.length;
      sums[b.class_id][1] += b.width;
      sums[b.class_id][2] += b.height;
      ++counts[b.class_id];
    }
  }
  for (int k = 0; k < n_classes; ++k) {
    if (counts[k] == 0) {
      sums[k] = {1.0, 1.0, 1.0};
    } else {
      for (double& v : sums[k]) v /= static_cast<double>(counts[k]);
    }
  }
  return sums;
}

// Weight of the per-class mean when building the initial size priors; the
// rest comes from the class-agnostic mean. Kept below 1 so burn-in starts
// from coarse priors that the training epochs have to sharpen.
inline constexpr double kPriorInitClassWeight = 0.15;

// Pulls each class mean toward the global mean in log space. Every class
// keeps a distinct prior (no nearest-prior ties) but starts oversized or
// undersized relative to its true mean.
inline std::vector<std::array<double, 3>> initial_prior_sizes(
    const std::vector<std::array<double, 3>>& class_means) {
  std::array<double, 3> log_global = {0.0, 0.0, 0.0};
  for (const auto& m : class_means) {
    for (int d = 0; d < 3; ++d) log_global[d] += std::log(m[d]);
  }
  for (double& v : log_global) v /= static_cast<double>(class_means.size());
  std::vector<std::array<double, 3>> mixed = class_means;
  for (auto& m : mixed) {
    for (int d = 0; d < 3; ++d) {
      m[d] = std::exp(kPriorInitClassWeight * std::log(m[d]) +
                      (1.0 - kPriorInitClassWeight) * log_global[d]);
    }
  }
  return mixed;
}

namespace detail {

// Per-epoch RNG stream tags for the training loops.
inline constexpr std::uint64_t kBurnInStream = std::uint64_t{3} << 32;
inline constexpr std::uint64_t kThresholdStream = std::uint64_t{4} << 32;
inline constexpr std::uint64_t kMiningStream = std::uint64_t{5} << 32;
inline constexpr std::uint64_t kStudentStream = std::uint64_t{6} << 32;

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < n; at += batch_size) {
    batches.emplace_back(order.begin() + at,
                         order.begin() + std::min(n, at + static_cast<std::size_t>(batch_size)));
  }
  return batches;
}

}  // namespace detail

// Fully supervised training on the labeled scenes. The returned parameters
// seed both the teacher and the student.
inline DetectorParams burn_in(const std::vector<Scene>& labeled, int n_classes,
                              const TrainConfig& tc, const DetectorConfig& cfg,
                              std::vector<double>* loss_curve = nullptr) {
  if (labeled.empty()) throw NoLabeledData("burn-in requires at least one labeled scene");
  DetectorParams params =
      init_detector_params(initial_prior_sizes(mean_class_sizes(labeled, n_classes)));

  std::vector<StudentExample> views;
  views.reserve(labeled.size());
  for (const Scene& sc : labeled) {
    const TrainingView v = build_training_view(sc, {}, sc.labels);
    views.push_back(example_from_view(v, cfg.region));
  }

  const Rng root(tc.seed);
  for (int epoch = 0; epoch < tc.burn_in_epochs; ++epoch) {
    Rng erng = root.fork(detail::kBurnInStream + static_cast<std::uint64_t>(epoch));
    for (const auto& batch_idx : detail::epoch_batches(views.size(), tc.batch_size, erng)) {
      std::vector<StudentExample> batch;
      for (std::size_t i : batch_idx) batch.push_back(views[i]);
      params = train_step(params, batch, tc.learning_rate, cfg);
    }
    if (loss_curve != nullptr) {
      loss_curve->push_back(batch_loss(views, params, cfg).total);
    }
  }
  return params;
}

// Mined pseudo labels per unlabeled scene id, rebuilt every epoch.
using MinedLabels = std::map<int, std::vector<Box3D>>;

struct MutualState {
  DetectorParams teacher;
  DetectorParams student;
  MinedLabels mined;
  int epoch = 0;  // completed mutual-learning epochs
};

struct EpochRecord {
  DualThresholds thresholds;
  std::size_t n_high = 0;       // mined hard labels after duplicate suppression
  std::size_t n_ambiguous = 0;  // soft-weighted labels
  std::size_t n_low = 0;        // discarded (point-removal) tier
  Loss last_loss;
};

// Confident scene set for the next threshold pass: every labeled scene with
// its ground truth, plus every unlabeled scene currently holding mined
// labels.
inline std::vector<ConfidentScene> build_confident_set(const std::vector<Scene>& labeled,
                                                       const std::vector<Scene>& unlabeled,
                                                       const MinedLabels& mined) {
  std::vector<ConfidentScene> dc;
  for (const Scene& sc : labeled) {
    ConfidentScene cs;
    cs.id = sc.id;
    cs.cloud = sc.cloud;
    cs.labels = sc.labels;
    cs.provenance = Provenance::ground_truth;
    dc.push_back(std::move(cs));
  }
  for (const Scene& sc : unlabeled) {
    const auto it = mined.find(sc.id);
    if (it == mined.end() || it->second.empty()) continue;
    ConfidentScene cs;
    cs.id = sc.id;
    cs.cloud = sc.cloud;
    cs.labels = it->second;
    cs.provenance = Provenance::mined;
    dc.push_back(std::move(cs));
  }
  return dc;
}

// Object point clusters harvested from labeled ground truth, for paste
// augmentation.
inline std::vector<GtSample> build_gt_sample_db(const std::vector<Scene>& labeled) {
  std::vector<GtSample> db;
  for (const Scene& sc : labeled) {
    for (const Box3D& b : sc.labels) {
      GtSample s;
      s.box = b;
      for (std::size_t i : points_in_box(sc.cloud, b)) s.points.append_from(sc.cloud, i);
      if (!s.points.empty()) db.push_back(std::move(s));
    }
  }
  return db;
}

struct MiningOutcome {
  DualThresholds thresholds;
  std::vector<TrainingView> views;  // labeled views first, then unlabeled in scene order
  MinedLabels mined;
  std::size_t n_high = 0;
  std::size_t n_ambiguous = 0;
  std::size_t n_low = 0;
};

// Epoch steps 1 and 2: regenerate dual thresholds from the confident set,
// then partition the teacher's predictions on each unlabeled scene into the
// hierarchy. High-tier boxes become the next epoch's mined labels.
inline MiningOutcome mine_pseudo_labels(const DetectFn& teacher_fn,
                                        const std::vector<Scene>& labeled,
                                        const std::vector<Scene>& unlabeled,
                                        const MinedLabels& prev_mined,
                                        const std::vector<int>& class_ids, const TrainConfig& tc,
                                        int epoch) {
  const Rng root(tc.seed);
  const auto epoch_tag = static_cast<std::uint64_t>(epoch);
  MiningOutcome out;

  const auto dc = build_confident_set(labeled, unlabeled, prev_mined);
  out.thresholds = generate_dual_thresholds(
      dc, class_ids, teacher_fn, root.fork(detail::kThresholdStream + epoch_tag), tc.tau_pair,
      epoch);

  for (const Scene& sc : labeled) {
    out.views.push_back(build_training_view(sc, {}, sc.labels));
  }
  const Rng mine_root = root.fork(detail::kMiningStream + epoch_tag);
  for (const Scene& sc : unlabeled) {
    Rng srng = mine_root.fork(static_cast<std::uint64_t>(sc.id));
    auto [aug_scene, transform] = weak_augment(sc, srng);
    std::vector<Detection> preds = teacher_fn(sc);
    const std::vector<Detection> aug_preds = teacher_fn(aug_scene);
    for (Detection& d : preds) d.v = consistency_iou(d, aug_preds, transform);

    const HierarchicalLabels tiers = partition_predictions(preds, out.thresholds);
    out.n_ambiguous += tiers.ambiguous.size();
    out.n_low += tiers.low.size();

    TrainingView view = build_training_view(sc, tiers, std::nullopt);
    out.n_high += view.strong.size();
    if (!view.strong.empty()) out.mined[sc.id] = view.strong;
    out.views.push_back(std::move(view));
  }
  return out;
}

// One mutual-learning epoch: mine pseudo labels with the frozen teacher,
// train the student on the label-bearing views with paste and shuffle
// augmentation, then fold the student into the teacher by EMA. Unlabeled
// views that mined nothing carry no supervision and sit the epoch out.
inline EpochRecord mutual_learning_epoch(MutualState& state, const std::vector<Scene>& labeled,
                                         const std::vector<Scene>& unlabeled,
                                         const std::vector<int>& class_ids, const TrainConfig& tc,
                                         const DetectorConfig& cfg) {
  const DetectorParams teacher = state.teacher;
  const DetectFn teacher_fn = [&teacher, &cfg](const Scene& sc) {
    return toy_detect(sc, teacher, cfg);
  };
  MiningOutcome mining =
      mine_pseudo_labels(teacher_fn, labeled, unlabeled, state.mined, class_ids, tc, state.epoch);

  EpochRecord rec;
  rec.thresholds = mining.thresholds;
  rec.n_high = mining.n_high;
  rec.n_ambiguous = mining.n_ambiguous;
  rec.n_low = mining.n_low;

  std::vector<TrainingView> train_views;
  for (TrainingView& v : mining.views) {
    if (v.from_labeled_scene || !v.strong.empty() || !v.weighted.empty()) {
      train_views.push_back(std::move(v));
    }
  }

  const auto db = build_gt_sample_db(labeled);
  const Rng root(tc.seed);
  Rng student_rng =
      root.fork(detail::kStudentStream + static_cast<std::uint64_t>(state.epoch));
  for (const auto& batch_idx :
       detail::epoch_batches(train_views.size(), tc.batch_size, student_rng)) {
    std::vector<StudentExample> batch;
    for (std::size_t i : batch_idx) {
      batch.push_back(make_student_example(train_views[i], db, tc, cfg.region, student_rng));
    }
    state.student = train_step(state.student, batch, tc.learning_rate, cfg);
    rec.last_loss = batch_loss(batch, state.student, cfg);
  }
  state.teacher = ema_update(state.teacher, state.student, tc.alpha);
  state.mined = std::move(mining.mined);
  ++state.epoch;
  return rec;
}

// 40-point interpolated average precision per class. Detections are ranked
// by s_cls (ties by scene then emission order) and greedily matched to
// unmatched same-scene, same-class ground truth at or above the class IoU
// threshold.
inline std::map<int, double> evaluate_ap(const std::vector<std::vector<Detection>>& preds_per_scene,
                                         const std::vector<std::vector<Box3D>>& gts_per_scene,
                                         const std::map<int, double>& iou_thresh) {
  if (preds_per_scene.size() != gts_per_scene.size()) {
    throw std::invalid_argument("evaluate_ap: prediction and ground-truth scene counts differ");
  }
  std::map<int, double> ap;
  for (const auto& [cls, thresh] : iou_thresh) {
    struct Entry {
      double score;
      std::size_t scene;
      std::size_t idx;
    };
    std::vector<Entry> entries;
    std::size_t n_gt = 0;
    for (std::size_t s = 0; s < preds_per_scene.size(); ++s) {
      for (std::size_t i = 0; i < preds_per_scene[s].size(); ++i) {
        if (preds_per_scene[s][i].box.class_id == cls) entries.push_back({preds_per_scene[s][i].s_cls, s, i});
      }
      for (const Box3D& b : gts_per_scene[s]) n_gt += b.class_id == cls;
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.scene != b.scene) return a.scene < b.scene;
      return a.idx < b.idx;
    });

    std::vector<std::vector<char>> taken(gts_per_scene.size());
    for (std::size_t s = 0; s < gts_per_scene.size(); ++s) taken[s].assign(gts_per_scene[s].size(), 0);

    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    for (const Entry& e : entries) {
      const Detection& d = preds_per_scene[e.scene][e.idx];
      double best = 0.0;
      std::size_t best_j = 0;
      bool found = false;
      const auto& gts = gts_per_scene[e.scene];
      for (std::size_t j = 0; j < gts.size(); ++j) {
        if (taken[e.scene][j] || gts[j].class_id != cls) continue;
        const double ov = iou_3d(d.box, gts[j]);
        if (ov >= thresh && ov > best) {
          best = ov;
          best_j = j;
          found = true;
        }
      }
      if (found) {
        taken[e.scene][best_j] = 1;
        ++tp;
      } else {
        ++fp;
      }
      precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
      recall.push_back(n_gt == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(n_gt));
    }

    double sum = 0.0;
    for (int i = 1; i <= 40; ++i) {
      const double r = static_cast<double>(i) / 40.0;
      double p_interp = 0.0;
      for (std::size_t k = 0; k < recall.size(); ++k) {
        if (recall[k] >= r) p_interp = std::max(p_interp, precision[k]);
      }
      sum += p_interp;
    }
    ap[cls] = n_gt == 0 ? 0.0 : sum / 40.0;
  }
  return ap;
}

struct PrecisionResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::optional<std::string> percent;  // truncated to 2 decimals; unset when total == 0
};

// Integer-exact truncation to two decimals: 10000 * correct / total gives
// hundredths of a percent without FP rounding hazards.
inline std::string format_truncated_percent(std::size_t correct, std::size_t total) {
  const auto hundredths =
      static_cast<std::uint64_t>(correct) * 10000ULL / static_cast<std::uint64_t>(total);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%llu.%02llu",
                static_cast<unsigned long long>(hundredths / 100),
                static_cast<unsigned long long>(hundredths % 100));
  return buf;
}

inline PrecisionResult make_precision_result(std::size_t correct, std::size_t total) {
  PrecisionResult r;
  r.correct = correct;
  r.total = total;
  if (total > 0) r.percent = format_truncated_percent(correct, total);
  return r;
}

// A pseudo label is correct when some ground-truth box of the same class
// overlaps it above 0.5 3D IoU.
inline PrecisionResult pseudo_label_precision(const std::vector<Box3D>& pseudo,
                                              const std::vector<Box3D>& gts) {
  std::size_t correct = 0;
  for (const Box3D& p : pseudo) {
    for (const Box3D& g : gts) {
      if (g.class_id == p.class_id && iou_3d(p, g) > 0.5) {
        ++correct;
        break;
      }
    }
  }
  return make_precision_result(correct, pseudo.size());
}

// Fraction of ground-truth objects recovered by some same-class pseudo
// label above 0.5 3D IoU.
inline PrecisionResult pseudo_label_recall(const std::vector<Box3D>& pseudo,
                                           const std::vector<Box3D>& gts) {
  std::size_t hit = 0;
  for (const Box3D& g : gts) {
    for (const Box3D& p : pseudo) {
      if (g.class_id == p.class_id && iou_3d(p, g) > 0.5) {
        ++hit;
        break;
      }
    }
  }
  return make_precision_result(hit, gts.size());
}

}  // namespace hssda
