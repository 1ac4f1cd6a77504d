#include "fewdet/stats.hpp"

#include <cmath>
#include <fstream>

#include "fewdet/errors.hpp"
#include "json.hpp"

namespace fewdet {

namespace {

constexpr double kZValue = 1.96;

struct PrefixStats {
  double mean = 0.0;
  std::optional<double> std_dev;
  std::optional<double> ci;
};

PrefixStats prefix_stats(const std::vector<double>& values, std::size_t k) {
  PrefixStats out;
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) sum += values[i];
  out.mean = sum / static_cast<double>(k);
  if (k >= 2) {
    double sq = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const double d = values[i] - out.mean;
      sq += d * d;
    }
    const double s = std::sqrt(sq / static_cast<double>(k - 1));
    out.std_dev = s;
    out.ci = kZValue * s / std::sqrt(static_cast<double>(k));
  }
  return out;
}

// Shortest round-trip decimal repr, deterministic across runs.
std::string fmt(double v) { return nlohmann::json(v).dump(); }

}  // namespace

RunStatistics summarize(const RunSeries& series) {
  if (series.values.empty()) throw ValidationError("summarize: empty series");
  for (double v : series.values) {
    if (!std::isfinite(v)) throw ValidationError("summarize: non-finite value");
  }
  RunStatistics out;
  for (std::size_t k = 1; k <= series.values.size(); ++k) {
    const PrefixStats ps = prefix_stats(series.values, k);
    out.cumulative.push_back({static_cast<int>(k), ps.mean, ps.ci});
  }
  const PrefixStats full = prefix_stats(series.values, series.values.size());
  out.mean = full.mean;
  out.std_dev = full.std_dev;
  out.ci95 = full.ci;
  return out;
}

bool stabilization_check(const RunStatistics& stats, int k_small, int k_large) {
  if (k_small < 2 || k_small >= k_large || k_large > stats.n()) {
    throw ValidationError("stabilization_check: need 2 <= k_small < k_large <= n");
  }
  const auto& small = stats.cumulative[static_cast<std::size_t>(k_small - 1)];
  const auto& large = stats.cumulative[static_cast<std::size_t>(k_large - 1)];
  return large.ci.value() < small.ci.value();
}

void write_aggregate_csv(const std::vector<std::pair<std::string, RunStatistics>>& rows,
                         const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << "metric,n,mean,std,ci95\n";
  for (const auto& [name, stats] : rows) {
    out << name << ',' << stats.n() << ',' << fmt(stats.mean) << ','
        << (stats.std_dev ? fmt(*stats.std_dev) : "") << ','
        << (stats.ci95 ? fmt(*stats.ci95) : "") << '\n';
  }
}

void write_cumulative_csv(const std::vector<std::pair<std::string, RunStatistics>>& rows,
                          const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << "metric,k,mean_k,ci_k\n";
  for (const auto& [name, stats] : rows) {
    for (const auto& entry : stats.cumulative) {
      out << name << ',' << entry.k << ',' << fmt(entry.mean) << ','
          << (entry.ci ? fmt(*entry.ci) : "") << '\n';
    }
  }
}

}  // namespace fewdet
