#include "fewdet/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "fewdet/errors.hpp"
#include "json.hpp"

namespace fewdet {

EvalConfig::EvalConfig() {
  for (int i = 0; i < 10; ++i) iou_thresholds.push_back(0.50 + 0.05 * i);
}

double iou(const BBox& a, const BBox& b) {
  const double ix1 = std::max(a.x, b.x);
  const double iy1 = std::max(a.y, b.y);
  const double ix2 = std::min(a.x2(), b.x2());
  const double iy2 = std::min(a.y2(), b.y2());
  const double iw = ix2 - ix1;
  const double ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

std::vector<bool> match_detections(const std::vector<Detection>& dets,
                                   const std::vector<Annotation>& gts, double iou_thresh) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return a < b;
  });

  std::vector<bool> gt_taken(gts.size(), false);
  std::vector<bool> tp(dets.size(), false);
  for (std::size_t di : order) {
    double best = -1.0;
    std::size_t best_gt = gts.size();
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (gt_taken[gi]) continue;
      const double v = iou(dets[di].bbox, gts[gi].bbox);
      if (v > best) {
        best = v;
        best_gt = gi;
      }
    }
    if (best_gt < gts.size() && best >= iou_thresh) {
      gt_taken[best_gt] = true;
      tp[di] = true;
    }
  }
  return tp;
}

std::optional<double> average_precision(std::vector<ScoredFlag> flags, int n_gt,
                                        int recall_points) {
  if (n_gt < 0) throw ValidationError("average_precision: n_gt must be >= 0");
  if (recall_points < 2) throw ValidationError("average_precision: need at least 2 recall points");
  if (n_gt == 0) return std::nullopt;

  std::sort(flags.begin(), flags.end(), [](const ScoredFlag& a, const ScoredFlag& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });

  const std::size_t n = flags.size();
  std::vector<double> recall(n), precision(n);
  double tp = 0.0, fp = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    (flags[i].tp ? tp : fp) += 1.0;
    recall[i] = tp / n_gt;
    precision[i] = tp / (tp + fp);
  }
  // Precision envelope: best precision at this recall or beyond.
  for (std::size_t i = n; i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }

  double sum = 0.0;
  std::size_t lo = 0;
  for (int k = 0; k < recall_points; ++k) {
    const double r = static_cast<double>(k) / (recall_points - 1);
    while (lo < n && recall[lo] < r) ++lo;
    if (lo < n) sum += precision[lo];
  }
  return sum / recall_points;
}

namespace {

std::optional<double> mean_over(const std::vector<std::optional<double>>& values) {
  double sum = 0.0;
  int count = 0;
  for (const auto& v : values) {
    if (v.has_value()) {
      sum += *v;
      ++count;
    }
  }
  if (count == 0) return std::nullopt;
  return sum / count;
}

struct EvalIndex {
  // detections kept after the per-image cap, grouped by (image, category),
  // keeping the global input index for tie-breaking
  std::map<std::pair<std::int64_t, int>, std::vector<std::size_t>> dets_by_img_cat;
  std::map<std::pair<std::int64_t, int>, std::vector<const Annotation*>> gts_by_img_cat;
};

// Per-class AP at one threshold, optionally restricted to a ground-truth
// area range. Matched detections are TPs; unmatched ones count as FPs only
// when their own area falls in the range.
std::optional<double> class_ap(const DetectionSet& dets, const EvalIndex& index, int category,
                               double thresh, const AreaRange* range, const EvalConfig& cfg) {
  int n_gt = 0;
  for (const auto& [key, gts] : index.gts_by_img_cat) {
    if (key.second != category) continue;
    for (const auto* g : gts) {
      if (range == nullptr || range->contains(g->bbox.area())) ++n_gt;
    }
  }

  std::vector<ScoredFlag> flags;
  for (const auto& [key, det_idxs] : index.dets_by_img_cat) {
    if (key.second != category) continue;
    std::vector<Detection> local;
    local.reserve(det_idxs.size());
    for (std::size_t i : det_idxs) local.push_back(dets[i]);

    std::vector<Annotation> gts;
    const auto git = index.gts_by_img_cat.find(key);
    if (git != index.gts_by_img_cat.end()) {
      for (const auto* g : git->second) {
        if (range == nullptr || range->contains(g->bbox.area())) gts.push_back(*g);
      }
    }
    const auto tp = match_detections(local, gts, thresh);
    for (std::size_t i = 0; i < local.size(); ++i) {
      if (tp[i]) {
        flags.push_back({local[i].score, det_idxs[i], true});
      } else if (range == nullptr || range->contains(local[i].bbox.area())) {
        flags.push_back({local[i].score, det_idxs[i], false});
      }
    }
  }
  return average_precision(std::move(flags), n_gt, cfg.recall_points);
}

std::optional<double> class_sweep_ap(const DetectionSet& dets, const EvalIndex& index,
                                     int category, const AreaRange* range,
                                     const EvalConfig& cfg) {
  std::vector<std::optional<double>> per_thresh;
  per_thresh.reserve(cfg.iou_thresholds.size());
  for (double t : cfg.iou_thresholds) {
    per_thresh.push_back(class_ap(dets, index, category, t, range, cfg));
  }
  return mean_over(per_thresh);
}

}  // namespace

MetricsReport evaluate(const DetectionSet& dets, const Dataset& d, const EvalConfig& cfg) {
  if (cfg.iou_thresholds.empty()) {
    throw ValidationError("evaluate: empty IoU threshold list");
  }
  for (std::size_t i = 1; i < cfg.iou_thresholds.size(); ++i) {
    if (!(cfg.iou_thresholds[i] > cfg.iou_thresholds[i - 1])) {
      throw ValidationError("evaluate: IoU thresholds must be strictly increasing");
    }
  }
  for (const auto& det : dets) {
    if (!d.categories.contains(det.category_id)) {
      throw ValidationError("evaluate: detection references unknown category " +
                            std::to_string(det.category_id));
    }
    if (!std::isfinite(det.score)) throw ValidationError("evaluate: non-finite detection score");
  }

  // Per-image cap: keep the top max_dets_per_image detections by score.
  std::vector<bool> kept(dets.size(), true);
  {
    std::map<std::int64_t, std::vector<std::size_t>> by_image;
    for (std::size_t i = 0; i < dets.size(); ++i) by_image[dets[i].image_id].push_back(i);
    for (auto& [img, idxs] : by_image) {
      if (idxs.size() <= static_cast<std::size_t>(cfg.max_dets_per_image)) continue;
      std::sort(idxs.begin(), idxs.end(), [&](std::size_t a, std::size_t b) {
        if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
        return a < b;
      });
      for (std::size_t i = static_cast<std::size_t>(cfg.max_dets_per_image); i < idxs.size(); ++i) {
        kept[idxs[i]] = false;
      }
    }
  }

  EvalIndex index;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (kept[i]) index.dets_by_img_cat[{dets[i].image_id, dets[i].category_id}].push_back(i);
  }
  for (const auto& a : d.annotations) {
    index.gts_by_img_cat[{a.image_id, a.category_id}].push_back(&a);
  }

  MetricsReport report;
  std::vector<std::optional<double>> all_ap, all_50, all_75;
  std::vector<std::optional<double>> base_ap, base_50, base_75;
  std::vector<std::optional<double>> novel_ap, novel_50, novel_75;
  std::vector<std::optional<double>> small_ap, medium_ap, large_ap;
  std::vector<std::optional<double>> rare_ap, common_ap, frequent_ap;
  const auto buckets = frequency_buckets(d);

  for (const auto& cat : d.categories.entries) {
    ClassMetrics cm;
    cm.ap = class_sweep_ap(dets, index, cat.id, nullptr, cfg);
    cm.ap50 = class_ap(dets, index, cat.id, 0.50, nullptr, cfg);
    cm.ap75 = class_ap(dets, index, cat.id, 0.75, nullptr, cfg);
    report.per_class[cat.id] = cm;

    all_ap.push_back(cm.ap);
    all_50.push_back(cm.ap50);
    all_75.push_back(cm.ap75);
    if (cat.split == Split::kBase) {
      base_ap.push_back(cm.ap);
      base_50.push_back(cm.ap50);
      base_75.push_back(cm.ap75);
    } else {
      novel_ap.push_back(cm.ap);
      novel_50.push_back(cm.ap50);
      novel_75.push_back(cm.ap75);
    }

    small_ap.push_back(class_sweep_ap(dets, index, cat.id, &cfg.small_range, cfg));
    medium_ap.push_back(class_sweep_ap(dets, index, cat.id, &cfg.medium_range, cfg));
    large_ap.push_back(class_sweep_ap(dets, index, cat.id, &cfg.large_range, cfg));

    switch (buckets.at(cat.id)) {
      case FrequencyBucket::kRare:
        rare_ap.push_back(cm.ap);
        break;
      case FrequencyBucket::kCommon:
        common_ap.push_back(cm.ap);
        break;
      case FrequencyBucket::kFrequent:
        frequent_ap.push_back(cm.ap);
        break;
    }
  }

  report.ap = mean_over(all_ap);
  report.ap50 = mean_over(all_50);
  report.ap75 = mean_over(all_75);
  report.bap = mean_over(base_ap);
  report.bap50 = mean_over(base_50);
  report.bap75 = mean_over(base_75);
  report.nap = mean_over(novel_ap);
  report.nap50 = mean_over(novel_50);
  report.nap75 = mean_over(novel_75);
  report.ap_small = mean_over(small_ap);
  report.ap_medium = mean_over(medium_ap);
  report.ap_large = mean_over(large_ap);
  report.ap_rare = mean_over(rare_ap);
  report.ap_common = mean_over(common_ap);
  report.ap_frequent = mean_over(frequent_ap);
  return report;
}

std::vector<std::pair<std::string, std::optional<double>>> MetricsReport::named() const {
  return {{"AP", ap},        {"AP50", ap50},      {"AP75", ap75},     {"bAP", bap},
          {"bAP50", bap50},  {"bAP75", bap75},    {"nAP", nap},       {"nAP50", nap50},
          {"nAP75", nap75},  {"APs", ap_small},   {"APm", ap_medium}, {"APl", ap_large},
          {"APr", ap_rare},  {"APc", ap_common},  {"APf", ap_frequent}};
}

namespace {

nlohmann::ordered_json opt_json(const std::optional<double>& v) {
  if (v.has_value()) return *v;
  return nullptr;
}

std::optional<double> opt_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

void save_metrics(const MetricsReport& m, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  for (const auto& [name, value] : m.named()) j[name] = opt_json(value);
  nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
  for (const auto& [cid, cm] : m.per_class) {
    per_class[std::to_string(cid)] = {
        {"ap", opt_json(cm.ap)}, {"ap50", opt_json(cm.ap50)}, {"ap75", opt_json(cm.ap75)}};
  }
  j["per_class"] = std::move(per_class);
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

MetricsReport load_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    MetricsReport m;
    m.ap = opt_from_json(j.at("AP"));
    m.ap50 = opt_from_json(j.at("AP50"));
    m.ap75 = opt_from_json(j.at("AP75"));
    m.bap = opt_from_json(j.at("bAP"));
    m.bap50 = opt_from_json(j.at("bAP50"));
    m.bap75 = opt_from_json(j.at("bAP75"));
    m.nap = opt_from_json(j.at("nAP"));
    m.nap50 = opt_from_json(j.at("nAP50"));
    m.nap75 = opt_from_json(j.at("nAP75"));
    m.ap_small = opt_from_json(j.at("APs"));
    m.ap_medium = opt_from_json(j.at("APm"));
    m.ap_large = opt_from_json(j.at("APl"));
    m.ap_rare = opt_from_json(j.at("APr"));
    m.ap_common = opt_from_json(j.at("APc"));
    m.ap_frequent = opt_from_json(j.at("APf"));
    if (j.contains("per_class")) {
      for (const auto& [key, val] : j.at("per_class").items()) {
        ClassMetrics cm;
        cm.ap = opt_from_json(val.at("ap"));
        cm.ap50 = opt_from_json(val.at("ap50"));
        cm.ap75 = opt_from_json(val.at("ap75"));
        m.per_class[std::stoi(key)] = cm;
      }
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace fewdet
