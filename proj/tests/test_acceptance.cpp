// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Every criterion is self-contained and fully deterministic.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "hssda/augment.hpp"
#include "hssda/breaks.hpp"
#include "hssda/detector.hpp"
#include "hssda/geometry.hpp"
#include "hssda/io.hpp"
#include "hssda/learner.hpp"
#include "hssda/supervision.hpp"
#include "hssda/synth.hpp"
#include "hssda/thresholds.hpp"

namespace {

using namespace hssda;

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void expect(bool ok, const std::string& msg) {
  if (!ok) throw Failure(msg);
}

std::filesystem::path scratch_dir(const char* leaf) {
  const auto dir = std::filesystem::temp_directory_path() / "hssda_acceptance" / leaf;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// --------------------------------------------------------------------------
// 1. Natural-breaks optimality against exhaustive contiguous partitions.
//
// Pools live on the dyadic lattice k/1024 so the oracle can score every
// partition in exact integer arithmetic: with group sums S_g and square sums
// Q_g over the integer ticks, the total SSD scaled by 2^20 * n1*n2*n3 is
//   I(P) = sum_g (n_g * Q_g - S_g^2) * (n1*n2*n3 / n_g),
// an integer. Partitions compare exactly via I(P1)*D(P2) vs I(P2)*D(P1)
// with D = n1*n2*n3, so mathematical ties are recognized as ties.

struct PartitionCost {
  __int128 scaled = 0;  // I(P)
  long long denom = 1;  // D(P)
};

bool cost_less(const PartitionCost& a, const PartitionCost& b) {
  return a.scaled * b.denom < b.scaled * a.denom;
}

bool cost_equal(const PartitionCost& a, const PartitionCost& b) {
  return a.scaled * b.denom == b.scaled * a.denom;
}

PartitionCost exact_cost(const std::vector<long long>& s, const std::vector<long long>& q, int i,
                         int j, int n) {
  const long long n1 = i, n2 = j - i, n3 = n - j;
  const long long s1 = s[i], s2 = s[j] - s[i], s3 = s[n] - s[j];
  const long long q1 = q[i], q2 = q[j] - q[i], q3 = q[n] - q[j];
  PartitionCost c;
  c.denom = n1 * n2 * n3;
  c.scaled = static_cast<__int128>(n1 * q1 - s1 * s1) * (n2 * n3) +
             static_cast<__int128>(n2 * q2 - s2 * s2) * (n1 * n3) +
             static_cast<__int128>(n3 * q3 - s3 * s3) * (n1 * n2);
  return c;
}

void criterion_breaks() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);

  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 3 + static_cast<int>(rng() % 58);
    std::vector<long long> ticks(n);
    const bool coarse = trial % 3 == 0;  // force ties in a third of the pools
    // The solver requires at least k distinct values; degenerate pools are
    // routed to the fallback thresholds upstream, so redraw those here.
    int distinct = 0;
    while (distinct < 3) {
      for (long long& k : ticks) k = coarse ? 100 * static_cast<long long>(rng() % 11)
                                            : static_cast<long long>(rng() % 1001);
      std::vector<long long> uniq = ticks;
      std::sort(uniq.begin(), uniq.end());
      uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
      distinct = static_cast<int>(uniq.size());
    }
    std::vector<double> values(n);
    for (int i = 0; i < n; ++i) values[i] = static_cast<double>(ticks[i]) / 1024.0;

    const BreakResult br = jenks_breaks(values, 3);

    std::sort(ticks.begin(), ticks.end());
    std::vector<long long> s(n + 1, 0), q(n + 1, 0);
    for (int i = 0; i < n; ++i) {
      s[i + 1] = s[i] + ticks[i];
      q[i + 1] = q[i] + ticks[i] * ticks[i];
    }

    int count[3] = {0, 0, 0};
    for (int g : br.assignment) {
      expect(g >= 0 && g < 3, "assignment outside group range");
      ++count[g];
    }
    expect(count[0] > 0 && count[1] > 0 && count[2] > 0, "DP left a group empty");
    const PartitionCost dp_cost =
        exact_cost(s, q, count[0], count[0] + count[1], n);

    PartitionCost best = exact_cost(s, q, 1, 2, n);
    for (int a = 1; a < n - 1; ++a) {
      for (int b = a + 1; b < n; ++b) {
        const PartitionCost cost = exact_cost(s, q, a, b, n);
        if (cost_less(cost, best)) best = cost;
      }
    }
    expect(cost_equal(dp_cost, best),
           "DP partition is not an exact optimum on pool " + std::to_string(trial));
  }

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  expect(secs < 10.0, "enumeration sweep took " + std::to_string(secs) + " s");
}

// --------------------------------------------------------------------------
// 2. Analytic IoU against a voxel-rasterized estimate.

bool inside_bev(const Box3D& b, double px, double py) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double dx = px - b.cx, dy = py - b.cy;
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  return std::fabs(u) <= 0.5 * b.length && std::fabs(v) <= 0.5 * b.width;
}

double raster_iou_3d(const Box3D& a, const Box3D& b) {
  const double oz = std::min(a.cz + 0.5 * a.height, b.cz + 0.5 * b.height) -
                    std::max(a.cz - 0.5 * a.height, b.cz - 0.5 * b.height);
  if (oz <= 0.0) return 0.0;

  double ax1 = 1e30, ax2 = -1e30, ay1 = 1e30, ay2 = -1e30;
  double bx1 = 1e30, bx2 = -1e30, by1 = 1e30, by2 = -1e30;
  for (const Vec2& c : a.bev_corners()) {
    ax1 = std::min(ax1, c.x), ax2 = std::max(ax2, c.x);
    ay1 = std::min(ay1, c.y), ay2 = std::max(ay2, c.y);
  }
  for (const Vec2& c : b.bev_corners()) {
    bx1 = std::min(bx1, c.x), bx2 = std::max(bx2, c.x);
    by1 = std::min(by1, c.y), by2 = std::max(by2, c.y);
  }
  const double x1 = std::max(ax1, bx1), x2 = std::min(ax2, bx2);
  const double y1 = std::max(ay1, by1), y2 = std::min(ay2, by2);
  if (!(x1 < x2 && y1 < y2)) return 0.0;

  constexpr int kCells = 1400;
  const double dx = (x2 - x1) / kCells, dy = (y2 - y1) / kCells;
  long long hits = 0;
  for (int r = 0; r < kCells; ++r) {
    const double px = x1 + (r + 0.5) * dx;
    for (int c = 0; c < kCells; ++c) {
      const double py = y1 + (c + 0.5) * dy;
      if (inside_bev(a, px, py) && inside_bev(b, px, py)) ++hits;
    }
  }
  const double inter = static_cast<double>(hits) * dx * dy * oz;
  return inter / (a.volume() + b.volume() - inter);
}

void criterion_iou() {
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw = [&](double lo, double hi) { return lo + unit(rng) * (hi - lo); };

  double worst = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    Box3D a;
    a.cx = draw(-2.0, 2.0), a.cy = draw(-2.0, 2.0), a.cz = draw(-0.5, 0.5);
    a.length = draw(0.6, 4.5), a.width = draw(0.6, 3.0), a.height = draw(0.6, 2.5);
    a.yaw = draw(-kPi, kPi);
    Box3D b;
    b.cx = a.cx + draw(-2.5, 2.5), b.cy = a.cy + draw(-2.5, 2.5), b.cz = a.cz + draw(-1.0, 1.0);
    b.length = draw(0.6, 4.5), b.width = draw(0.6, 3.0), b.height = draw(0.6, 2.5);
    b.yaw = draw(-kPi, kPi);

    const double analytic = iou_3d(a, b);
    const double raster = raster_iou_3d(a, b);
    worst = std::max(worst, std::fabs(analytic - raster));
    expect(std::fabs(analytic - raster) <= 1e-3,
           "pair " + std::to_string(trial) + ": analytic " + std::to_string(analytic) +
               " vs raster " + std::to_string(raster));

    expect(std::fabs(iou_3d(a, a) - 1.0) <= 1e-9, "identity IoU drifted from 1");
  }

  Box3D sq;
  sq.length = sq.width = sq.height = 1.0;
  Box3D rot = sq;
  rot.yaw = kPi / 4.0;
  expect(std::fabs(bev_iou(sq, rot) - 0.7071) <= 1e-3, "45-degree square case off");
  expect(std::fabs(iou_3d(sq, rot) - 0.7071) <= 1e-3, "45-degree square case off in 3D");
  (void)worst;
}

// --------------------------------------------------------------------------
// 3. Patch shuffle: exact grid round trip, exact in-region point counts.

void criterion_shuffle() {
  std::mt19937_64 rng(303);
  const Region region{0.0, 70.4, -40.0, 40.0};
  const int sizes[3] = {1, 2, 4};

  for (int trial = 0; trial < 100; ++trial) {
    const int rows = sizes[rng() % 3], cols = sizes[rng() % 3];

    GridFeatureMap grid(rows * static_cast<int>(1 + rng() % 6),
                        cols * static_cast<int>(1 + rng() % 6), 1 + static_cast<int>(rng() % 4));
    std::normal_distribution<double> noise(0.0, 3.0);
    for (double& v : grid.data) v = noise(rng);

    PatchPermutation p;
    p.rows = rows, p.cols = cols, p.region = region;
    p.perm.resize(rows * cols);
    std::iota(p.perm.begin(), p.perm.end(), 0);
    std::shuffle(p.perm.begin(), p.perm.end(), rng);

    const GridFeatureMap round_trip = unshuffle_grid(shuffle_grid(grid, p), p);
    expect(round_trip.data.size() == grid.data.size(), "grid size changed");
    expect(std::memcmp(round_trip.data.data(), grid.data.data(),
                       grid.data.size() * sizeof(double)) == 0,
           "grid round trip not bit-identical on trial " + std::to_string(trial));

    Scene sc;
    sc.id = trial;
    std::size_t in_count = 0;
    std::uniform_real_distribution<double> wide_x(-10.0, 80.0), wide_y(-50.0, 50.0);
    for (int i = 0; i < 300; ++i) {
      double x, y;
      if (i % 7 == 0) {
        x = wide_x(rng), y = wide_y(rng);  // some points land outside the region
      } else {
        x = region.x1 + (region.x2 - region.x1) * (0.5 + 0.5 * std::sin(i * 0.7 + trial));
        y = region.y1 + (region.y2 - region.y1) * (0.5 + 0.5 * std::cos(i * 1.3 + trial));
      }
      sc.cloud.append(x, y, noise(rng));
      if (x >= region.x1 && x <= region.x2 && y >= region.y1 && y <= region.y2) ++in_count;
    }

    Rng prng(1000 + static_cast<std::uint64_t>(trial));
    const auto [shuffled, perm] = shuffle_points(sc, rows, cols, region, prng);
    expect(shuffled.cloud.size() == in_count,
           "shuffle kept " + std::to_string(shuffled.cloud.size()) + " of " +
               std::to_string(in_count) + " in-region points");
    for (std::size_t i = 0; i < shuffled.cloud.size(); ++i) {
      expect(shuffled.cloud.x(i) >= region.x1 - 1e-6 && shuffled.cloud.x(i) <= region.x2 + 1e-6 &&
                 shuffled.cloud.y(i) >= region.y1 - 1e-6 && shuffled.cloud.y(i) <= region.y2 + 1e-6,
             "shuffled point escaped the region");
    }
    expect(unshuffle_points(shuffled, perm).cloud.size() == in_count,
           "unshuffle changed the point count");
  }
}

// --------------------------------------------------------------------------
// 4. Three-tier partition against a rule-by-rule reference.

int reference_tier(const Detection& d, const ClassThresholds& t) {
  if (d.s_cls > t.cls.high && d.s_obj > t.obj.high && *d.v > t.iou.high) return 2;
  if (d.s_cls > t.cls.low && d.s_obj > t.obj.low && *d.v > t.iou.low) return 1;
  return 0;
}

void criterion_partition() {
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::size_t seen = 0;
  while (seen < 10000) {
    DualThresholds th;
    for (int k = 0; k < 3; ++k) {
      auto pair = [&]() {
        double a = unit(rng), b = unit(rng);
        if (rng() % 5 == 0) b = a;  // exercise the equal-threshold edge
        return ThresholdPair{std::min(a, b), std::max(a, b)};
      };
      th.per_class[k] = ClassThresholds{pair(), pair(), pair()};
    }

    std::vector<Detection> preds(20);
    for (Detection& d : preds) {
      d.box.class_id = static_cast<int>(rng() % 3);
      const ClassThresholds& t = th.per_class[d.box.class_id];
      // A quarter of the scores sit exactly on a threshold; strict rules must
      // push those down a tier.
      const double edges[6] = {t.cls.low, t.cls.high, t.obj.low,
                               t.obj.high, t.iou.low,  t.iou.high};
      auto score = [&]() { return rng() % 4 == 0 ? edges[rng() % 6] : unit(rng); };
      d.s_cls = score(), d.s_obj = score(), d.v = score();
    }
    seen += preds.size();

    const HierarchicalLabels out = partition_predictions(preds, th);
    expect(out.high.size() + out.ambiguous.size() + out.low.size() == preds.size(),
           "partition is not complete");

    std::size_t hi = 0, mid = 0, lo = 0;
    for (const Detection& d : preds) {
      const int tier = reference_tier(d, th.per_class[d.box.class_id]);
      auto same = [&](const Detection& got) {
        return got.box.class_id == d.box.class_id && got.s_cls == d.s_cls &&
               got.s_obj == d.s_obj && *got.v == *d.v;
      };
      if (tier == 2) {
        expect(hi < out.high.size() && same(out.high[hi]), "high tier disagrees with reference");
        ++hi;
      } else if (tier == 1) {
        expect(mid < out.ambiguous.size() && same(out.ambiguous[mid].first),
               "ambiguous tier disagrees with reference");
        expect(std::fabs(out.ambiguous[mid].second - d.s_cls * d.s_obj) <= 1e-12,
               "soft weight is not s_cls * s_obj");
        ++mid;
      } else {
        expect(lo < out.low.size() && same(out.low[lo]), "low tier disagrees with reference");
        ++lo;
      }
    }
    expect(hi == out.high.size() && mid == out.ambiguous.size() && lo == out.low.size(),
           "partition produced extra entries");
  }
}

// --------------------------------------------------------------------------
// 5. EMA element-wise law and geometric convergence rate.

void criterion_ema() {
  std::mt19937_64 rng(505);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  DetectorParams teacher;
  teacher.classes = 3;
  teacher.theta.resize(teacher.dim());
  for (double& v : teacher.theta) v = -2.0 + 4.0 * unit(rng);

  DetectorParams student = teacher;
  for (double& v : student.theta) v += (unit(rng) < 0.5 ? -1.0 : 1.0) * (0.5 + unit(rng));

  const double alpha = 0.37;
  const DetectorParams mixed = ema_update(teacher, student, alpha);
  for (std::size_t i = 0; i < mixed.theta.size(); ++i) {
    const double want = alpha * teacher.theta[i] + (1.0 - alpha) * student.theta[i];
    expect(std::fabs(mixed.theta[i] - want) <= 1e-12, "EMA element-wise law violated");
  }

  const double decay = 0.9;
  DetectorParams cur = teacher;
  for (int step = 0; step < 100; ++step) {
    const DetectorParams next = ema_update(cur, student, decay);
    for (std::size_t i = 0; i < cur.theta.size(); ++i) {
      const double before = cur.theta[i] - student.theta[i];
      const double after = next.theta[i] - student.theta[i];
      expect(std::fabs(after / before - decay) <= 1e-9,
             "EMA error ratio drifted from alpha at step " + std::to_string(step));
    }
    cur = next;
  }
}

// --------------------------------------------------------------------------
// 6. Precision formatting anchors.

void criterion_precision_anchors() {
  const PrecisionResult a = make_precision_result(114, 120);
  expect(a.percent.has_value() && *a.percent == "95.00",
         "114/120 printed " + a.percent.value_or("<unset>"));
  const PrecisionResult b = make_precision_result(4627, 4783);
  expect(b.percent.has_value() && *b.percent == "96.73",
         "4627/4783 printed " + b.percent.value_or("<unset>"));
}

// --------------------------------------------------------------------------
// 7. Training gradient against an independent central difference.

void criterion_gradient() {
  const SynthDataset ds = synth_dataset(reference_synth_config(), 3, 0, 0, 17);
  const DetectorConfig cfg;

  std::vector<StudentExample> batch;
  for (const Scene& sc : ds.labeled) {
    batch.push_back(example_from_view(build_training_view(sc, {}, sc.labels), cfg.region));
  }

  const DetectorParams base =
      init_detector_params(initial_prior_sizes(mean_class_sizes(ds.labeled, 3)));

  std::mt19937_64 rng(707);
  std::normal_distribution<double> jitter(0.0, 0.02);
  const double h = 1e-5;

  for (int point = 0; point < 20; ++point) {
    DetectorParams params = base;
    for (double& v : params.theta) v += jitter(rng);

    const std::vector<double> grad = loss_gradient(batch, params, cfg, kTrainGradStep);

    DetectorParams probe = params;
    for (std::size_t i = 0; i < params.theta.size(); ++i) {
      probe.theta[i] = params.theta[i] + h;
      const double up = batch_loss(batch, probe, cfg).total;
      probe.theta[i] = params.theta[i] - h;
      const double down = batch_loss(batch, probe, cfg).total;
      probe.theta[i] = params.theta[i];
      const double oracle = (up - down) / (2.0 * h);
      expect(std::fabs(grad[i] - oracle) <= 1e-4 * std::max(std::fabs(oracle), 0.01),
             "component " + std::to_string(i) + " at point " + std::to_string(point) + ": " +
                 std::to_string(grad[i]) + " vs " + std::to_string(oracle));
    }
  }
}

// --------------------------------------------------------------------------
// 8. Reference run: pseudo-label precision, AP recovery, wall clock.

void criterion_reference_run() {
  const auto t0 = std::chrono::steady_clock::now();

  RunConfig rc = load_run_config(std::filesystem::path(HSSDA_CONFIG_DIR) / "reference.json");
  const auto dir = scratch_dir("reference");
  rc.dataset_dir = dir / "data";
  rc.output_dir = dir / "out";

  synth_generate(rc);
  const Dataset ds = load_dataset(rc.dataset_dir);
  const TrainOutcome out = run_training(rc, ds, rc.output_dir);

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  expect(out.metrics.size() == static_cast<std::size_t>(rc.train.mutual_epochs) + 1,
         "unexpected metric row count");
  const EpochMetrics& first = out.metrics.front();
  const EpochMetrics& last = out.metrics.back();
  expect(first.epoch == 0, "baseline row missing");

  expect(last.pseudo_precision.total > 0, "no pseudo labels mined in the final epoch");
  const double precision = 100.0 * static_cast<double>(last.pseudo_precision.correct) /
                           static_cast<double>(last.pseudo_precision.total);
  expect(precision >= 90.0, "final pseudo-label precision " + std::to_string(precision) + "%");

  int improved = 0;
  for (std::size_t k = 0; k < last.ap.size(); ++k) {
    if (last.ap[k] > first.ap[k]) ++improved;
  }
  expect(improved >= 2, "AP improved on only " + std::to_string(improved) + " of " +
                            std::to_string(last.ap.size()) + " classes");

  expect(secs < 300.0, "reference run took " + std::to_string(secs) + " s");
}

// --------------------------------------------------------------------------
// 9. Byte-stable training artifacts across reruns.

void criterion_determinism() {
  RunConfig rc = load_run_config(std::filesystem::path(HSSDA_CONFIG_DIR) / "reference.json");
  const auto dir = scratch_dir("determinism");
  rc.dataset_dir = dir / "data";

  synth_generate(rc);
  const Dataset ds = load_dataset(rc.dataset_dir);

  for (const char* run : {"a", "b"}) {
    rc.output_dir = dir / (std::string("out_") + run);
    run_training(rc, ds, rc.output_dir);
  }

  for (const char* name : {"metrics.csv", "thresholds.jsonl"}) {
    const auto a = detail::read_file_bytes(dir / "out_a" / name);
    const auto b = detail::read_file_bytes(dir / "out_b" / name);
    expect(!a.empty() && a == b, std::string(name) + " differs between identical runs");
  }
}

}  // namespace

int main() {
  struct Entry {
    const char* label;
    void (*fn)();
  };
  const Entry entries[] = {
      {"natural breaks match exhaustive partition search", &criterion_breaks},
      {"analytic box IoU agrees with voxel rasterization", &criterion_iou},
      {"patch shuffle round-trips and preserves counts", &criterion_shuffle},
      {"three-tier partition matches rule-by-rule reference", &criterion_partition},
      {"EMA update exact element-wise and in decay rate", &criterion_ema},
      {"precision formatting anchors", &criterion_precision_anchors},
      {"training gradient matches central finite differences", &criterion_gradient},
      {"reference run recovers AP with precise pseudo labels", &criterion_reference_run},
      {"training artifacts byte-stable across reruns", &criterion_determinism},
  };

  int failed = 0;
  int id = 0;
  for (const Entry& e : entries) {
    ++id;
    try {
      e.fn();
      std::printf("criterion %d (%s): PASS\n", id, e.label);
    } catch (const std::exception& ex) {
      std::printf("criterion %d (%s): FAIL: %s\n", id, e.label, ex.what());
      ++failed;
    }
    std::fflush(stdout);
  }

  if (failed == 0) {
    std::printf("all 9 acceptance criteria passed\n");
  } else {
    std::printf("%d of 9 acceptance criteria failed\n", failed);
  }
  return failed == 0 ? 0 : 1;
}
