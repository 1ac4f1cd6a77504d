#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fewdet {

/// One metric across repeated runs, in seed-schedule order.
struct RunSeries {
  std::string metric_name;
  std::vector<double> values;
};

struct CumulativeEntry {
  int k = 0;
  double mean = 0.0;
  std::optional<double> ci;  // absent at k = 1
};

/// mean, sample standard deviation (divisor n-1), the 95% interval
/// 1.96 * std / sqrt(n), and the prefix series used for stabilization plots.
struct RunStatistics {
  double mean = 0.0;
  std::optional<double> std_dev;  // absent for n = 1
  std::optional<double> ci95;
  std::vector<CumulativeEntry> cumulative;  // k = 1..n

  int n() const { return static_cast<int>(cumulative.size()); }
};

RunStatistics summarize(const RunSeries& series);

/// True iff the confidence interval at k_large is strictly smaller than at
/// k_small. Requires 2 <= k_small < k_large <= n.
bool stabilization_check(const RunStatistics& stats, int k_small, int k_large);

/// Columns: metric,n,mean,std,ci95 (std/ci empty when absent).
void write_aggregate_csv(const std::vector<std::pair<std::string, RunStatistics>>& rows,
                         const std::filesystem::path& path);

/// Columns: metric,k,mean_k,ci_k (ci empty at k = 1).
void write_cumulative_csv(const std::vector<std::pair<std::string, RunStatistics>>& rows,
                          const std::filesystem::path& path);

}  // namespace fewdet
