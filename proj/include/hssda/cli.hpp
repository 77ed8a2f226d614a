#pragma once

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "CLI11.hpp"

#include "hssda/io.hpp"

namespace hssda {

namespace detail {

inline RunConfig cli_config(const std::string& path, const CLI::Option* seed_opt,
                            std::uint64_t seed) {
  RunConfig rc = load_run_config(path);
  if (seed_opt->count() > 0) {
    rc.seed = seed;
    rc.train.seed = seed;
  }
  return rc;
}

inline nlohmann::json box_to_json(const Box3D& b) {
  return {{"class", b.class_id}, {"cx", b.cx},         {"cy", b.cy},
          {"cz", b.cz},          {"length", b.length}, {"width", b.width},
          {"height", b.height},  {"yaw", b.yaw}};
}

inline nlohmann::json thresholds_to_json(const DualThresholds& dt,
                                         const std::vector<ClassSpec>& classes, int epoch) {
  nlohmann::json out;
  out["epoch"] = epoch;
  out["classes"] = nlohmann::json::array();
  for (const auto& [cls, th] : dt.per_class) {
    nlohmann::json entry = {{"class", cls},
                            {"cls_low", th.cls.low},   {"cls_high", th.cls.high},
                            {"obj_low", th.obj.low},   {"obj_high", th.obj.high},
                            {"iou_low", th.iou.low},   {"iou_high", th.iou.high}};
    if (cls >= 0 && static_cast<std::size_t>(cls) < classes.size()) {
      entry["name"] = classes[cls].name;
    }
    out["classes"].push_back(std::move(entry));
  }
  return out;
}

inline void emit_json(const nlohmann::json& j, const std::string& out_path) {
  const std::string text = j.dump(2) + "\n";
  if (out_path.empty()) {
    std::cout << text;
  } else {
    write_file_bytes(out_path, text);
  }
}

// Loads params from --params when given, otherwise runs burn-in on the
// labeled split so the dump subcommands work on a fresh dataset.
inline DetectorParams cli_teacher_params(const RunConfig& rc, const Dataset& ds,
                                         const std::string& params_path) {
  if (!params_path.empty()) return load_params(params_path);
  return burn_in(ds.labeled, static_cast<int>(ds.classes.size()), rc.train, rc.detector);
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"semi-supervised 3d detection pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_path;
  std::string params_path;
  int scene_id = -1;

  const auto add_common = [&](CLI::App* sub) -> CLI::Option* {
    sub->add_option("--config", config_path, "run configuration JSON")->required();
    return sub->add_option("--seed", seed, "override the configured seed");
  };

  CLI::App* gen = app.add_subcommand("gen", "write a synthetic dataset");
  const CLI::Option* gen_seed = add_common(gen);

  CLI::App* burnin = app.add_subcommand("burnin", "supervised burn-in on the labeled split");
  const CLI::Option* burnin_seed = add_common(burnin);

  CLI::App* train = app.add_subcommand("train", "burn-in followed by mutual learning");
  const CLI::Option* train_seed = add_common(train);

  CLI::App* thresholds = app.add_subcommand("thresholds", "one-shot dual-threshold dump");
  const CLI::Option* thresholds_seed = add_common(thresholds);
  thresholds->add_option("--out", out_path, "write JSON here instead of stdout");
  thresholds->add_option("--params", params_path, "detector params JSON (default: burn-in)");

  CLI::App* pseudolabel = app.add_subcommand("pseudolabel", "dump the pseudo-label partition");
  const CLI::Option* pseudolabel_seed = add_common(pseudolabel);
  pseudolabel->add_option("--out", out_path, "write JSON here instead of stdout");
  pseudolabel->add_option("--params", params_path, "detector params JSON (default: burn-in)");

  CLI::App* preview = app.add_subcommand("augment-preview", "dump one augmented scene");
  const CLI::Option* preview_seed = add_common(preview);
  preview->add_option("--scene", scene_id, "scene id (default: first labeled scene)");

  CLI::App* eval = app.add_subcommand("eval", "AP and pseudo-label quality for saved params");
  const CLI::Option* eval_seed = add_common(eval);
  eval->add_option("--params", params_path, "detector params JSON")->required();
  eval->add_option("--out", out_path, "write JSON here instead of stdout");

  int rc_code = 0;

  gen->callback([&] {
    const RunConfig rc = detail::cli_config(config_path, gen_seed, seed);
    const GenSummary s = synth_generate(rc);
    std::cout << "wrote " << s.labeled << " labeled + " << s.unlabeled << " unlabeled + " << s.test
              << " test scenes (" << s.total_points << " points) to " << rc.dataset_dir.string()
              << "\n";
  });

  burnin->callback([&] {
    const RunConfig rc = detail::cli_config(config_path, burnin_seed, seed);
    const Dataset ds = load_dataset(rc.dataset_dir);
    std::vector<double> curve;
    const DetectorParams p =
        burn_in(ds.labeled, static_cast<int>(ds.classes.size()), rc.train, rc.detector, &curve);
    std::error_code ec;
    std::filesystem::create_directories(rc.output_dir, ec);
    if (ec) throw IoFailure("cannot create directory " + rc.output_dir.string());
    save_params(rc.output_dir / "burnin_params.json", p);
    std::string csv = "epoch,loss\n";
    char buf[64];
    for (std::size_t e = 0; e < curve.size(); ++e) {
      std::snprintf(buf, sizeof(buf), "%zu,%.9f\n", e + 1, curve[e]);
      csv += buf;
    }
    detail::write_file_bytes(rc.output_dir / "burnin_loss.csv", csv);
    const auto ap = evaluate_on_split(p, rc.detector, ds.test, ds.sealed, ds.classes.size(),
                                      rc.eval_iou);
    std::cout << "burn-in done; wrote " << (rc.output_dir / "burnin_params.json").string() << "\n";
    for (std::size_t k = 0; k < ds.classes.size(); ++k) {
      std::cout << "ap_" << ds.classes[k].name << " " << ap.at(static_cast<int>(k)) << "\n";
    }
  });

  train->callback([&] {
    const RunConfig rc = detail::cli_config(config_path, train_seed, seed);
    const Dataset ds = load_dataset(rc.dataset_dir);
    const TrainOutcome out = run_training(rc, ds, rc.output_dir);
    const EpochMetrics& last = out.metrics.back();
    std::cout << "trained " << rc.train.mutual_epochs << " mutual epochs; wrote "
              << (rc.output_dir / "metrics.csv").string() << "\n";
    for (std::size_t k = 0; k < ds.classes.size(); ++k) {
      std::cout << "ap_" << ds.classes[k].name << " " << out.metrics.front().ap[k] << " -> "
                << last.ap[k] << "\n";
    }
    if (last.pseudo_precision.percent) {
      std::cout << "pseudo_precision " << *last.pseudo_precision.percent << "\n";
    }
  });

  thresholds->callback([&] {
    const RunConfig rc = detail::cli_config(config_path, thresholds_seed, seed);
    const Dataset ds = load_dataset(rc.dataset_dir);
    const DetectorParams p = detail::cli_teacher_params(rc, ds, params_path);
    TrainConfig tc = rc.train;
    tc.seed = rc.seed;
    const auto teacher = [&](const Scene& sc) { return toy_detect(sc, p, rc.detector); };
    const MiningOutcome mining =
        mine_pseudo_labels(teacher, ds.labeled, ds.unlabeled, {}, ds.class_ids(), tc, 0);
    detail::emit_json(detail::thresholds_to_json(mining.thresholds, ds.classes, 0), out_path);
  });

  pseudolabel->callback([&] {
    const RunConfig rc = detail::cli_config(config_path, pseudolabel_seed, seed);
    const Dataset ds = load_dataset(rc.dataset_dir);
    const DetectorParams p = detail::cli_teacher_params(rc, ds, params_path);
    TrainConfig tc = rc.train;
    tc.seed = rc.seed;
    const auto teacher = [&](const Scene& sc) { return toy_detect(sc, p, rc.detector); };
    const MiningOutcome mining =
        mine_pseudo_labels(teacher, ds.labeled, ds.unlabeled, {}, ds.class_ids(), tc, 0);
    nlohmann::json out;
    out["thresholds"] = detail::thresholds_to_json(mining.thresholds, ds.classes, 0);
    out["n_high"] = mining.n_high;
    out["n_ambiguous"] = mining.n_ambiguous;
    out["n_low"] = mining.n_low;
    out["scenes"] = nlohmann::json::array();
    for (const TrainingView& v : mining.views) {
      if (v.from_labeled_scene) continue;
      nlohmann::json entry;
      entry["scene"] = v.scene_id;
      entry["high"] = nlohmann::json::array();
      for (const Box3D& b : v.strong) entry["high"].push_back(detail::box_to_json(b));
      entry["ambiguous"] = nlohmann::json::array();
      for (const auto& [box, weight] : v.weighted) {
        nlohmann::json wb = detail::box_to_json(box);
        wb["weight"] = weight;
        entry["ambiguous"].push_back(std::move(wb));
      }
      out["scenes"].push_back(std::move(entry));
    }
    detail::emit_json(out, out_path);
  });

  preview->callback([&] {
    const RunConfig rc = detail::cli_config(config_path, preview_seed, seed);
    const Dataset ds = load_dataset(rc.dataset_dir);
    const Scene* target = nullptr;
    for (const auto* split : {&ds.labeled, &ds.unlabeled, &ds.test}) {
      for (const Scene& sc : *split) {
        if (scene_id < 0 ? target == nullptr : sc.id == scene_id) target = &sc;
      }
      if (scene_id < 0 && target) break;
    }
    if (!target) throw ConfigError("scene " + std::to_string(scene_id) + " not in the dataset");

    const Rng root(rc.seed);
    Rng weak_rng = root.fork(static_cast<std::uint64_t>(target->id));
    const auto [augmented, transform] = weak_augment(*target, weak_rng);
    Rng shuffle_rng = root.fork(static_cast<std::uint64_t>(target->id) + (1ull << 32));
    const auto [shuffled, perm] = shuffle_points(*target, rc.train.shuffle_rows,
                                                 rc.train.shuffle_cols, rc.detector.region,
                                                 shuffle_rng);

    std::error_code ec;
    std::filesystem::create_directories(rc.output_dir, ec);
    if (ec) throw IoFailure("cannot create directory " + rc.output_dir.string());
    save_points(rc.output_dir / "augment_preview_weak.bin", augmented.cloud);
    save_points(rc.output_dir / "augment_preview_shuffled.bin", shuffled.cloud);

    nlohmann::json out;
    out["scene"] = target->id;
    out["weak_transform"] = {{"flip_x", transform.flip_x},
                             {"flip_y", transform.flip_y},
                             {"scale", transform.scale},
                             {"yaw_rot", transform.yaw_rot}};
    out["patch_shuffle"] = {{"rows", perm.rows}, {"cols", perm.cols}, {"perm", perm.perm}};
    out["points"] = {{"original", target->cloud.size()},
                     {"augmented", augmented.cloud.size()},
                     {"shuffled", shuffled.cloud.size()}};
    out["files"] = {{"augmented", "augment_preview_weak.bin"},
                    {"shuffled", "augment_preview_shuffled.bin"}};
    detail::emit_json(out, (rc.output_dir / "augment_preview.json").string());
    std::cout << "wrote augment preview for scene " << target->id << " to "
              << rc.output_dir.string() << "\n";
  });

  eval->callback([&] {
    const RunConfig rc = detail::cli_config(config_path, eval_seed, seed);
    const Dataset ds = load_dataset(rc.dataset_dir);
    const DetectorParams p = load_params(params_path);
    TrainConfig tc = rc.train;
    tc.seed = rc.seed;

    nlohmann::json out;
    const auto ap =
        evaluate_on_split(p, rc.detector, ds.test, ds.sealed, ds.classes.size(), rc.eval_iou);
    out["ap"] = nlohmann::json::object();
    for (std::size_t k = 0; k < ds.classes.size(); ++k) {
      out["ap"][ds.classes[k].name] = ap.at(static_cast<int>(k));
    }
    PrecisionResult prec = make_precision_result(0, 0);
    PrecisionResult rec = make_precision_result(0, 0);
    if (!ds.unlabeled.empty()) {
      const auto teacher = [&](const Scene& sc) { return toy_detect(sc, p, rc.detector); };
      const MiningOutcome mining =
          mine_pseudo_labels(teacher, ds.labeled, ds.unlabeled, {}, ds.class_ids(), tc, 0);
      std::tie(prec, rec) = pseudo_metrics_vs_sealed(mining.mined, ds.unlabeled, ds.sealed);
    }
    const auto result_json = [](const PrecisionResult& r) {
      nlohmann::json j = {{"correct", r.correct}, {"total", r.total}};
      if (r.percent) {
        j["percent"] = *r.percent;
      } else {
        j["percent"] = nullptr;
      }
      return j;
    };
    out["pseudo_precision"] = result_json(prec);
    out["pseudo_recall"] = result_json(rec);
    detail::emit_json(out, out_path);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const MalformedFile& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc_code;
}

}  // namespace hssda
