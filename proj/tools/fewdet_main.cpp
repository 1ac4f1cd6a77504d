#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "fewdet/benchmark.hpp"
#include "fewdet/dataset.hpp"
#include "fewdet/detection.hpp"
#include "fewdet/errors.hpp"
#include "fewdet/evaluator.hpp"
#include "fewdet/featurestore.hpp"
#include "fewdet/head.hpp"
#include "fewdet/sampler.hpp"

namespace {

using namespace fewdet;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;

const std::map<std::string, ClassifierKind> kKindNames{{"fc", ClassifierKind::kFc},
                                                       {"cosine", ClassifierKind::kCosine}};
const std::map<std::string, InitMode> kInitNames{{"random", InitMode::kRandom},
                                                 {"novel", InitMode::kNovelPretrained}};

std::set<int> select_classes(const Dataset& d, const std::string& which) {
  std::vector<int> ids;
  if (which == "base") {
    ids = d.categories.ids_of(Split::kBase);
  } else if (which == "novel") {
    ids = d.categories.ids_of(Split::kNovel);
  } else {
    ids = d.categories.ids();
  }
  return {ids.begin(), ids.end()};
}

std::vector<int> intersect(const std::vector<int>& ids, const std::set<int>& keep) {
  std::vector<int> out;
  for (int id : ids) {
    if (keep.count(id)) out.push_back(id);
  }
  return out;
}

struct TrainFlags {
  std::string classifier = "cosine";
  double alpha = 20.0;
  std::string init = "random";
  TrainConfig cfg;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--classifier", classifier, "Classifier head kind")
        ->transform(CLI::IsMember({"fc", "cosine"}));
    cmd.add_option("--alpha", alpha, "Cosine similarity scale");
    cmd.add_option("--init", init, "Novel-class weight initialization")
        ->transform(CLI::IsMember({"random", "novel"}));
    cmd.add_option("--lr", cfg.lr, "Learning rate");
    cmd.add_option("--momentum", cfg.momentum, "SGD momentum");
    cmd.add_option("--weight-decay", cfg.weight_decay, "L2 weight decay");
    cmd.add_option("--iters", cfg.iters, "Training iterations");
    cmd.add_option("--batch-size", cfg.batch_size, "Mini-batch size (records)");
    cmd.add_option("--loc-weight", cfg.loc_weight, "Box regression loss weight");
    cmd.add_flag("--freeze-base", cfg.freeze_base_classifier_columns,
                 "Freeze base-class classifier columns and regressor blocks");
  }
};

int run_cli(int argc, char** argv) {
  CLI::App app{"Few-shot detection head toolkit: synthetic features, balanced "
               "shot sampling, two-stage head training, COCO-style evaluation, "
               "and repeated-run benchmarking"};
  app.require_subcommand(1);

  // --- synth ---
  auto* synth = app.add_subcommand("synth", "Generate synthetic features and annotations");
  std::string synth_out;
  SynthConfig synth_cfg;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_cfg.seed, "RNG seed");
  synth->add_option("--dim", synth_cfg.dim, "Feature dimension");
  synth->add_option("--base-classes", synth_cfg.n_classes_base, "Number of base classes");
  synth->add_option("--novel-classes", synth_cfg.n_classes_novel, "Number of novel classes");
  synth->add_option("--per-class", synth_cfg.per_class_count, "Instances per class");
  synth->add_option("--separation", synth_cfg.class_separation, "Class mean separation");
  synth->add_option("--sigma", synth_cfg.noise_sigma, "Feature noise sigma");
  synth->callback([&] {
    const auto out = std::filesystem::path(synth_out);
    std::filesystem::create_directories(out);
    const SynthOutput s = synth_features(synth_cfg);
    save_dataset(s.dataset, out / "annotations.json");
    write_features(s.train, out / "features_train.tfaf");
    write_features(s.test, out / "features_test.tfaf");
    std::cout << "wrote " << (out / "annotations.json").string() << ", features_train.tfaf, "
              << "features_test.tfaf (" << s.train.records.size() << " train / "
              << s.test.records.size() << " test records)\n";
  });

  // --- sample-shots ---
  auto* shots_cmd = app.add_subcommand("sample-shots", "Draw a balanced k-shot set");
  std::string shots_ann, shots_out, shots_classes = "all";
  int shots_k = 1;
  std::uint64_t shots_seed = 0;
  shots_cmd->add_option("--annotations", shots_ann, "Annotation file")->required();
  shots_cmd->add_option("--k", shots_k, "Shots per class")->required();
  shots_cmd->add_option("--seed", shots_seed, "RNG seed");
  shots_cmd->add_option("--classes", shots_classes, "Class subset")
      ->transform(CLI::IsMember({"all", "base", "novel"}));
  shots_cmd->add_option("--out", shots_out, "Output shot file")->required();
  shots_cmd->callback([&] {
    const Dataset d = load_dataset(shots_ann);
    const ShotSet s = sample_kshot(d, select_classes(d, shots_classes), shots_k, shots_seed);
    save_shotset(s, shots_out);
    std::cout << "wrote " << shots_out << "\n";
  });

  // --- train-head ---
  auto* train_cmd = app.add_subcommand("train-head", "Train a classifier+regressor head");
  std::string train_features, train_ann, train_out, train_classes = "all";
  std::string train_shots, train_base_head;
  TrainFlags train_flags;
  train_cmd->add_option("--features", train_features, "Training feature file")->required();
  train_cmd->add_option("--annotations", train_ann, "Annotation file (category table)")
      ->required();
  train_cmd->add_option("--out", train_out, "Output head file")->required();
  train_cmd->add_option("--classes", train_classes, "Classes the head covers")
      ->transform(CLI::IsMember({"all", "base", "novel"}));
  train_cmd->add_option("--shots", train_shots, "Restrict foreground records to this shot file");
  train_cmd->add_option("--base-head", train_base_head, "Initialize matching columns from here");
  train_cmd->add_option("--seed", train_flags.cfg.seed, "RNG seed");
  train_flags.add_to(*train_cmd);
  train_cmd->callback([&] {
    const Dataset d = load_dataset(train_ann);
    const FeatureSet feats = read_features(train_features);
    const std::set<int> selected = select_classes(d, train_classes);
    const std::vector<int> base_ids = intersect(d.categories.ids_of(Split::kBase), selected);
    const std::vector<int> novel_ids = intersect(d.categories.ids_of(Split::kNovel), selected);

    FeatureSet train_set;
    if (!train_shots.empty()) {
      train_set = shots_to_features(load_shotset(train_shots), d, feats);
      train_set = filter_records(train_set, selected, true);
    } else {
      train_set = filter_records(feats, selected, true);
    }

    Heads base;
    const Heads* base_ptr = nullptr;
    if (!train_base_head.empty()) {
      base = load_heads(train_base_head);
      base_ptr = &base;
    }
    FeatureSet novel_set;
    const FeatureSet* novel_ptr = nullptr;
    const InitMode mode = kInitNames.at(train_flags.init);
    if (mode == InitMode::kNovelPretrained) {
      novel_set = filter_records(train_set, {novel_ids.begin(), novel_ids.end()}, true);
      novel_ptr = &novel_set;
    }
    const Heads start = init_head(mode, base_ptr, novel_ptr,
                                  kKindNames.at(train_flags.classifier), train_flags.alpha,
                                  feats.dim, base_ids, novel_ids, train_flags.cfg.seed);
    const TrainResult res =
        train_head(start, train_set, train_flags.cfg, {base_ids.begin(), base_ids.end()});
    save_heads(res.heads, train_out);
    std::cout << "wrote " << train_out << " (final loss "
              << (res.loss_trace.empty() ? 0.0 : res.loss_trace.back()) << ")\n";
  });

  // --- predict ---
  auto* predict_cmd = app.add_subcommand("predict", "Run a head over features");
  std::string pred_head, pred_features, pred_out;
  double pred_thresh = 0.05, pred_nms = 0.5;
  int pred_max = 100;
  predict_cmd->add_option("--head", pred_head, "Head file")->required();
  predict_cmd->add_option("--features", pred_features, "Feature file")->required();
  predict_cmd->add_option("--out", pred_out, "Output detection file")->required();
  predict_cmd->add_option("--score-thresh", pred_thresh, "Score threshold");
  predict_cmd->add_option("--nms-iou", pred_nms, "NMS IoU threshold");
  predict_cmd->add_option("--max-dets", pred_max, "Max detections per image");
  predict_cmd->callback([&] {
    const Heads h = load_heads(pred_head);
    const FeatureSet feats = read_features(pred_features);
    const DetectionSet dets = predict(h, feats, pred_thresh, pred_nms, pred_max);
    save_detections(dets, pred_out);
    std::cout << "wrote " << pred_out << " (" << dets.size() << " detections)\n";
  });

  // --- evaluate ---
  auto* eval_cmd = app.add_subcommand("evaluate", "COCO-style AP report");
  std::string eval_dets, eval_ann, eval_out;
  EvalConfig eval_cfg;
  eval_cmd->add_option("--detections", eval_dets, "Detection file")->required();
  eval_cmd->add_option("--annotations", eval_ann, "Annotation file")->required();
  eval_cmd->add_option("--out", eval_out, "Output metrics file")->required();
  eval_cmd->add_option("--max-dets", eval_cfg.max_dets_per_image, "Max detections per image");
  eval_cmd->callback([&] {
    const Dataset d = load_dataset(eval_ann);
    const DetectionSet dets = load_detections(eval_dets);
    const MetricsReport m = evaluate(dets, d, eval_cfg);
    save_metrics(m, eval_out);
    for (const auto& [name, value] : m.named()) {
      std::cout << name << " = " << (value ? std::to_string(*value) : "absent") << "\n";
    }
  });

  // --- benchmark ---
  auto* bench_cmd = app.add_subcommand("benchmark", "Repeated-run k-shot benchmark");
  std::string bench_ann, bench_pool, bench_test, bench_base_feats, bench_out;
  BenchmarkConfig bench_cfg;
  TrainFlags bench_flags;
  bench_cmd->add_option("--annotations", bench_ann, "Annotation file")->required();
  bench_cmd->add_option("--train-features", bench_pool, "Fine-tuning pool feature file")
      ->required();
  bench_cmd->add_option("--test-features", bench_test, "Test feature file")->required();
  bench_cmd->add_option("--base-features", bench_base_feats,
                        "Stage-1 feature file (default: pool restricted to base classes)");
  bench_cmd->add_option("--out", bench_out, "Output directory")->required();
  bench_cmd->add_option("--k-values", bench_cfg.k_values, "Shot counts");
  bench_cmd->add_option("--n-runs", bench_cfg.n_runs, "Repeated runs per k");
  bench_cmd->add_option("--base-seed", bench_cfg.base_seed, "First run seed");
  bench_cmd->add_option("--stage1-lr", bench_cfg.stage1.lr, "Stage-1 learning rate");
  bench_cmd->add_option("--stage1-iters", bench_cfg.stage1.iters, "Stage-1 iterations");
  bench_cmd->add_option("--score-thresh", bench_cfg.score_thresh, "Prediction score threshold");
  bench_cmd->add_option("--nms-iou", bench_cfg.nms_iou, "NMS IoU threshold");
  bench_cmd->add_option("--max-dets", bench_cfg.max_dets, "Max detections per image");
  bench_flags.add_to(*bench_cmd);
  bench_cmd->callback([&] {
    BenchmarkInputs inputs;
    inputs.dataset = load_dataset(bench_ann);
    inputs.pool = read_features(bench_pool);
    inputs.test = read_features(bench_test);
    if (!bench_base_feats.empty()) inputs.base_features = read_features(bench_base_feats);
    bench_cfg.classifier = kKindNames.at(bench_flags.classifier);
    bench_cfg.alpha = bench_flags.alpha;
    bench_cfg.init = kInitNames.at(bench_flags.init);
    bench_cfg.train = bench_flags.cfg;
    const BenchmarkResult res = run_benchmark(bench_cfg, inputs, bench_out);
    for (const auto& [k, rows] : res.aggregates) {
      std::cout << "k=" << k << ":";
      for (const auto& [name, stats] : rows) {
        if (name == "AP" || name == "bAP50" || name == "nAP50") {
          std::cout << " " << name << "=" << stats.mean;
        }
      }
      std::cout << "\n";
    }
  });

  // --- aggregate ---
  auto* agg_cmd = app.add_subcommand("aggregate", "Re-aggregate per-run metric files");
  std::string agg_runs, agg_out;
  agg_cmd->add_option("--runs", agg_runs, "Directory of run_*.metrics.json files")->required();
  agg_cmd->add_option("--out", agg_out, "Output directory")->required();
  agg_cmd->callback([&] {
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(agg_runs)) {
      const auto name = entry.path().filename().string();
      if (name.starts_with("run_") && name.ends_with(".metrics.json")) {
        files.push_back(entry.path());
      }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ValidationError("aggregate: no run_*.metrics.json files in " + agg_runs);
    std::filesystem::create_directories(agg_out);
    write_aggregate_outputs(aggregate_metric_files(files), agg_out);
    std::cout << "wrote " << agg_out << "/aggregate.csv and cumulative.csv (" << files.size()
              << " runs)\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const fewdet::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
}
