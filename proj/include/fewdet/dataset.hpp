#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace fewdet {

/// Axis-aligned box in pixel coordinates, stored as (left, top, width,
/// height). Corner accessors give the (x1, y1, x2, y2) view used wherever
/// geometry is computed.
struct BBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x2() const { return x + w; }
  double y2() const { return y + h; }
  double area() const { return w * h; }
};

struct ImageInfo {
  std::int64_t id = 0;
  int width = 0;
  int height = 0;
};

struct Annotation {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  int category_id = 0;
  BBox bbox;
};

enum class Split { kBase, kNovel };

struct Category {
  int id = 0;
  std::string name;
  Split split = Split::kBase;
};

struct CategoryTable {
  std::vector<Category> entries;

  bool contains(int id) const;
  const Category* find(int id) const;
  std::vector<int> ids() const;
  std::vector<int> ids_of(Split split) const;
};

/// Immutable after load; all lookups are by id.
struct Dataset {
  std::vector<ImageInfo> images;
  std::vector<Annotation> annotations;
  CategoryTable categories;

  const ImageInfo* find_image(std::int64_t id) const;
};

enum class FrequencyBucket { kRare, kCommon, kFrequent };

/// Throws ValidationError on the first record violating an invariant:
/// duplicate id, dangling reference, degenerate or out-of-bounds box.
void validate_dataset(const Dataset& d);

/// Reads the annotation JSON format. ParseError on malformed input,
/// ValidationError on invariant violations. Unknown keys are ignored.
Dataset load_dataset(const std::filesystem::path& path);
void save_dataset(const Dataset& d, const std::filesystem::path& path);

/// Buckets every category by the number of *distinct images* it appears in:
/// rare < 10, common 10..100 inclusive, frequent > 100. Zero occurrences
/// bucket as rare.
std::map<int, FrequencyBucket> frequency_buckets(const Dataset& d);

/// Keeps exactly the annotations whose category is in `keep`; images are
/// retained even when emptied and the category table is restricted to
/// `keep`. Unknown ids in `keep` are a ValidationError.
Dataset filter_by_categories(const Dataset& d, const std::set<int>& keep);

}  // namespace fewdet
