#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "fewdet/dataset.hpp"
#include "fewdet/evaluator.hpp"
#include "fewdet/featurestore.hpp"
#include "fewdet/head.hpp"
#include "fewdet/sampler.hpp"
#include "fewdet/stats.hpp"

namespace fewdet {

/// Repeated-run protocol: for every k and every run seed, sample shots,
/// fine-tune from the cached stage-1 base head, predict, evaluate; then
/// summarize each metric across runs.
struct BenchmarkConfig {
  std::vector<int> k_values{1, 2, 3, 5, 10};
  int n_runs = 30;
  std::uint64_t base_seed = 42;
  ClassifierKind classifier = ClassifierKind::kCosine;  // fine-tuning head kind
  double alpha = 20.0;
  InitMode init = InitMode::kRandom;
  TrainConfig train;   // fine-tuning stage
  TrainConfig stage1;  // base-head stage (always an fc head, higher lr)
  double score_thresh = 0.05;
  double nms_iou = 0.5;
  int max_dets = 100;
  EvalConfig eval;

  BenchmarkConfig() { stage1.lr = 0.02; }
};

struct BenchmarkInputs {
  Dataset dataset;  // ground truth for evaluation and shot sampling
  FeatureSet pool;  // fine-tuning pool: one record per annotation + background
  FeatureSet test;
  std::optional<FeatureSet> base_features;  // stage-1 set; defaults to the
                                            // pool restricted to base classes
};

struct BenchmarkResult {
  Heads base_head;
  MetricsReport base_metrics;
  std::map<int, std::vector<std::pair<std::string, RunStatistics>>> aggregates;
};

/// Records whose label is in `labels`, plus background records when asked.
FeatureSet filter_records(const FeatureSet& fs, const std::set<int>& labels,
                          bool include_background);

/// Resolves shot picks to pool records: the record on the picked
/// annotation's image, with its label, whose decoded regression target
/// recovers the annotation's box. All background records come along. Missing
/// records are a ValidationError.
FeatureSet shots_to_features(const ShotSet& shots, const Dataset& d, const FeatureSet& pool);

/// Writes per-run metric files (k<k>/run_<i>.metrics.json), per-k aggregate
/// and cumulative CSVs, the cached base head, and its metrics. Failed runs
/// leave a run_<i>.error.txt and are skipped by the aggregate.
BenchmarkResult run_benchmark(const BenchmarkConfig& cfg, const BenchmarkInputs& inputs,
                              const std::filesystem::path& out_dir);

/// Builds one RunStatistics per named metric from per-run metric files, in
/// file order. Metrics absent in every file are dropped.
std::vector<std::pair<std::string, RunStatistics>> aggregate_metric_files(
    const std::vector<std::filesystem::path>& files);

void write_aggregate_outputs(const std::vector<std::pair<std::string, RunStatistics>>& rows,
                             const std::filesystem::path& dir);

}  // namespace fewdet
