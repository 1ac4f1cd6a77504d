#include "fewdet/benchmark.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <unordered_map>

#include "fewdet/errors.hpp"
#include "fewdet/rng.hpp"

namespace fewdet {

namespace {

enum BenchmarkStream : std::uint64_t {
  kStage1InitStream = 101,
  kStage1TrainStream,
  kRunInitStream,
  kRunTrainStream,
};

// Pool records must decode back to the annotation box this closely (pixels).
constexpr double kBoxMatchTolerance = 0.5;

std::string run_stem(int run_index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "run_%03d", run_index);
  return buf;
}

double box_distance(const BBox& a, const BBox& b) {
  return std::max(std::max(std::abs(a.x - b.x), std::abs(a.y - b.y)),
                  std::max(std::abs(a.w - b.w), std::abs(a.h - b.h)));
}

}  // namespace

FeatureSet filter_records(const FeatureSet& fs, const std::set<int>& labels,
                          bool include_background) {
  FeatureSet out;
  out.dim = fs.dim;
  for (const auto& r : fs.records) {
    if (r.label == kBackgroundLabel ? include_background : labels.count(r.label) > 0) {
      out.records.push_back(r);
    }
  }
  return out;
}

FeatureSet shots_to_features(const ShotSet& shots, const Dataset& d, const FeatureSet& pool) {
  std::unordered_map<std::int64_t, const Annotation*> ann_by_id;
  for (const auto& a : d.annotations) ann_by_id[a.id] = &a;

  // Foreground pool records indexed by (image, label).
  std::map<std::pair<std::uint64_t, int>, std::vector<std::size_t>> pool_index;
  for (std::size_t i = 0; i < pool.records.size(); ++i) {
    const auto& r = pool.records[i];
    if (r.label != kBackgroundLabel) {
      pool_index[{r.image_id, static_cast<int>(r.label)}].push_back(i);
    }
  }

  FeatureSet out;
  out.dim = pool.dim;
  std::set<std::uint64_t> shot_images;
  for (const auto& [cid, ann_ids] : shots.picks) {
    for (std::int64_t ann_id : ann_ids) {
      const auto ann_it = ann_by_id.find(ann_id);
      if (ann_it == ann_by_id.end()) {
        throw ValidationError("shot pick references unknown annotation " +
                              std::to_string(ann_id));
      }
      const Annotation& ann = *ann_it->second;
      const auto idx_it = pool_index.find({static_cast<std::uint64_t>(ann.image_id), cid});
      double best = std::numeric_limits<double>::infinity();
      std::size_t best_i = pool.records.size();
      if (idx_it != pool_index.end()) {
        for (std::size_t i : idx_it->second) {
          const auto& r = pool.records[i];
          std::array<double, 4> deltas;
          for (int k = 0; k < 4; ++k) deltas[static_cast<std::size_t>(k)] = r.reg_target[static_cast<std::size_t>(k)];
          const double dist = box_distance(decode_reg_target(deltas, r.proposal_box()), ann.bbox);
          if (dist < best) {
            best = dist;
            best_i = i;
          }
        }
      }
      if (best_i == pool.records.size() || best > kBoxMatchTolerance) {
        throw ValidationError("no pool record matches annotation " + std::to_string(ann_id));
      }
      out.records.push_back(pool.records[best_i]);
      shot_images.insert(static_cast<std::uint64_t>(ann.image_id));
    }
  }
  // Background comes from the shot images only (as fine-tuning on the k-shot
  // images would), capped at half the foreground count so the balanced set
  // stays dominated by the shots. Falls back to the whole pool if those
  // images carry none, so the background column still gets trained.
  const std::size_t n_fg = out.records.size();
  const std::size_t bg_cap = std::max<std::size_t>(1, n_fg / 2);
  std::size_t n_bg = 0;
  for (const auto& r : pool.records) {
    if (n_bg >= bg_cap) break;
    if (r.label == kBackgroundLabel && shot_images.count(r.image_id)) {
      out.records.push_back(r);
      ++n_bg;
    }
  }
  if (n_bg == 0) {
    for (const auto& r : pool.records) {
      if (n_bg >= bg_cap) break;
      if (r.label == kBackgroundLabel) {
        out.records.push_back(r);
        ++n_bg;
      }
    }
  }
  return out;
}

std::vector<std::pair<std::string, RunStatistics>> aggregate_metric_files(
    const std::vector<std::filesystem::path>& files) {
  std::vector<MetricsReport> reports;
  reports.reserve(files.size());
  for (const auto& f : files) reports.push_back(load_metrics(f));

  std::vector<std::pair<std::string, RunStatistics>> rows;
  if (reports.empty()) return rows;
  for (const auto& [name, unused] : reports.front().named()) {
    RunSeries series;
    series.metric_name = name;
    for (const auto& report : reports) {
      for (const auto& [n, v] : report.named()) {
        if (n == name && v.has_value()) series.values.push_back(*v);
      }
    }
    if (!series.values.empty()) rows.emplace_back(name, summarize(series));
  }
  return rows;
}

void write_aggregate_outputs(const std::vector<std::pair<std::string, RunStatistics>>& rows,
                             const std::filesystem::path& dir) {
  write_aggregate_csv(rows, dir / "aggregate.csv");
  write_cumulative_csv(rows, dir / "cumulative.csv");
}

BenchmarkResult run_benchmark(const BenchmarkConfig& cfg, const BenchmarkInputs& inputs,
                              const std::filesystem::path& out_dir) {
  if (cfg.k_values.empty()) throw ValidationError("benchmark: empty k list");
  if (cfg.n_runs < 1) throw ValidationError("benchmark: n_runs must be >= 1");
  if (inputs.pool.dim != inputs.test.dim) {
    throw ValidationError("benchmark: pool and test feature dims differ");
  }
  std::filesystem::create_directories(out_dir);

  const int dim = inputs.pool.dim;
  const std::vector<int> base_ids = inputs.dataset.categories.ids_of(Split::kBase);
  const std::vector<int> novel_ids = inputs.dataset.categories.ids_of(Split::kNovel);
  if (base_ids.empty() || novel_ids.empty()) {
    throw ValidationError("benchmark: dataset needs both base and novel categories");
  }
  const std::set<int> base_id_set(base_ids.begin(), base_ids.end());
  const std::set<int> novel_id_set(novel_ids.begin(), novel_ids.end());
  std::set<int> all_ids = base_id_set;
  all_ids.insert(novel_id_set.begin(), novel_id_set.end());

  // Stage 1: one fc head on the abundant base-class records, trained once
  // and reused by every run.
  const FeatureSet base_set = inputs.base_features.has_value()
                                  ? *inputs.base_features
                                  : filter_records(inputs.pool, base_id_set, true);
  const Rng root(cfg.base_seed);
  Heads base_start =
      init_head(InitMode::kRandom, nullptr, nullptr, ClassifierKind::kFc, cfg.alpha, dim,
                base_ids, {}, root.fork(kStage1InitStream).next_u64());
  TrainConfig stage1_cfg = cfg.stage1;
  stage1_cfg.seed = root.fork(kStage1TrainStream).next_u64();

  BenchmarkResult result;
  result.base_head = train_head(base_start, base_set, stage1_cfg).heads;
  save_heads(result.base_head, out_dir / "base_head.json");
  const DetectionSet base_dets =
      predict(result.base_head, inputs.test, cfg.score_thresh, cfg.nms_iou, cfg.max_dets);
  result.base_metrics = evaluate(base_dets, inputs.dataset, cfg.eval);
  save_metrics(result.base_metrics, out_dir / "base_metrics.json");

  const SeedSchedule schedule = seed_schedule(cfg.base_seed, cfg.n_runs);
  for (int k : cfg.k_values) {
    const auto k_dir = out_dir / ("k" + std::to_string(k));
    std::filesystem::create_directories(k_dir);
    std::vector<std::filesystem::path> run_files;
    for (int run = 0; run < cfg.n_runs; ++run) {
      const std::uint64_t run_seed = schedule.run_seeds[static_cast<std::size_t>(run)];
      const auto metrics_path = k_dir / (run_stem(run) + ".metrics.json");
      try {
        const ShotSet shots = sample_kshot(inputs.dataset, all_ids, k, run_seed);
        const FeatureSet fine_set = shots_to_features(shots, inputs.dataset, inputs.pool);
        FeatureSet novel_set;
        if (cfg.init == InitMode::kNovelPretrained) {
          novel_set = filter_records(fine_set, novel_id_set, true);
        }
        const Rng run_root(run_seed);
        TrainConfig ft_cfg = cfg.train;
        ft_cfg.seed = run_root.fork(kRunTrainStream).next_u64();
        const Heads start = init_head(
            cfg.init, &result.base_head,
            cfg.init == InitMode::kNovelPretrained ? &novel_set : nullptr, cfg.classifier,
            cfg.alpha, dim, base_ids, novel_ids, run_root.fork(kRunInitStream).next_u64());
        const Heads trained = train_head(start, fine_set, ft_cfg, base_id_set).heads;
        const DetectionSet dets =
            predict(trained, inputs.test, cfg.score_thresh, cfg.nms_iou, cfg.max_dets);
        save_metrics(evaluate(dets, inputs.dataset, cfg.eval), metrics_path);
        run_files.push_back(metrics_path);
      } catch (const std::exception& e) {
        std::cerr << "benchmark: k=" << k << " run " << run << " failed: " << e.what() << "\n";
        std::ofstream err(k_dir / (run_stem(run) + ".error.txt"));
        err << e.what() << "\n";
      }
    }
    // Aggregate from the files just written so that re-aggregating them
    // standalone reproduces these CSVs byte for byte.
    const auto rows = aggregate_metric_files(run_files);
    write_aggregate_outputs(rows, k_dir);
    result.aggregates[k] = rows;
  }
  return result;
}

}  // namespace fewdet
