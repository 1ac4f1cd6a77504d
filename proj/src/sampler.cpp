#include "fewdet/sampler.hpp"

#include <algorithm>
#include <fstream>

#include "fewdet/errors.hpp"
#include "fewdet/rng.hpp"
#include "json.hpp"

namespace fewdet {

ShotSet sample_kshot(const Dataset& d, const std::set<int>& classes, int k, std::uint64_t seed) {
  if (classes.empty()) throw ValidationError("sample_kshot: empty class set");
  if (k < 1) throw ValidationError("sample_kshot: k must be >= 1");
  for (int c : classes) {
    if (!d.categories.contains(c)) {
      throw ValidationError("sample_kshot: unknown category id " + std::to_string(c));
    }
  }

  ShotSet out;
  out.k = k;
  out.seed = seed;
  const Rng root(seed);
  for (int c : classes) {
    // Candidates sorted by id so the draw is invariant to annotation order
    // and to everything outside this class.
    std::vector<std::int64_t> ids;
    for (const auto& a : d.annotations) {
      if (a.category_id == c) ids.push_back(a.id);
    }
    std::sort(ids.begin(), ids.end());

    Rng rng = root.fork(static_cast<std::uint64_t>(c));
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), ids.size());
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + rng.uniform_below(ids.size() - i);
      std::swap(ids[i], ids[j]);
    }
    std::vector<std::int64_t> picked(ids.begin(), ids.begin() + take);
    std::sort(picked.begin(), picked.end());
    out.picks[c] = std::move(picked);
    out.shortfalls[c] = k - static_cast<int>(take);
  }
  return out;
}

SeedSchedule seed_schedule(std::uint64_t base_seed, int n_runs) {
  if (n_runs < 1) throw ValidationError("seed_schedule: n_runs must be >= 1");
  SeedSchedule s;
  s.base_seed = base_seed;
  s.n_runs = n_runs;
  s.run_seeds.reserve(static_cast<std::size_t>(n_runs));
  for (int i = 0; i < n_runs; ++i) {
    s.run_seeds.push_back(base_seed + static_cast<std::uint64_t>(i));  // wraps mod 2^64
  }
  return s;
}

ShotSet load_shotset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    ShotSet s;
    s.k = j.at("k").get<int>();
    s.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [key, val] : j.at("picks").items()) {
      s.picks[std::stoi(key)] = val.get<std::vector<std::int64_t>>();
    }
    for (const auto& [key, val] : j.at("shortfalls").items()) {
      s.shortfalls[std::stoi(key)] = val.get<int>();
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void save_shotset(const ShotSet& s, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["k"] = s.k;
  j["seed"] = s.seed;
  nlohmann::ordered_json picks = nlohmann::ordered_json::object();
  for (const auto& [c, ids] : s.picks) picks[std::to_string(c)] = ids;
  j["picks"] = std::move(picks);
  nlohmann::ordered_json shortfalls = nlohmann::ordered_json::object();
  for (const auto& [c, n] : s.shortfalls) shortfalls[std::to_string(c)] = n;
  j["shortfalls"] = std::move(shortfalls);
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace fewdet
