#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <vector>

#include "fewdet/dataset.hpp"

namespace fewdet {

/// A balanced K-shot draw. For each requested class, `picks` holds
/// min(k, available) annotation ids, and `shortfalls` holds k - |picks|
/// (zero when the class had enough annotations).
struct ShotSet {
  int k = 0;
  std::uint64_t seed = 0;
  std::map<int, std::vector<std::int64_t>> picks;
  std::map<int, int> shortfalls;
};

struct SeedSchedule {
  std::uint64_t base_seed = 0;
  int n_runs = 0;
  std::vector<std::uint64_t> run_seeds;
};

/// Samples annotations uniformly without replacement, per class, with a
/// stream keyed by (seed, category_id): picks for one class never depend on
/// annotations of other classes. Classes with fewer than k annotations
/// contribute everything they have and record the shortfall. Unknown
/// category ids are a ValidationError.
ShotSet sample_kshot(const Dataset& d, const std::set<int>& classes, int k, std::uint64_t seed);

/// run_seeds[i] = base_seed + i with wrap-around arithmetic.
SeedSchedule seed_schedule(std::uint64_t base_seed, int n_runs);

ShotSet load_shotset(const std::filesystem::path& path);
void save_shotset(const ShotSet& s, const std::filesystem::path& path);

}  // namespace fewdet
