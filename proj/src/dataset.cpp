#include "fewdet/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "fewdet/errors.hpp"
#include "json.hpp"

namespace fewdet {

namespace {

std::string split_name(Split s) { return s == Split::kBase ? "base" : "novel"; }

Split split_from_name(const std::string& s) {
  if (s == "base") return Split::kBase;
  if (s == "novel") return Split::kNovel;
  throw ParseError("category split must be \"base\" or \"novel\", got \"" + s + "\"");
}

}  // namespace

bool CategoryTable::contains(int id) const { return find(id) != nullptr; }

const Category* CategoryTable::find(int id) const {
  for (const auto& c : entries) {
    if (c.id == id) return &c;
  }
  return nullptr;
}

std::vector<int> CategoryTable::ids() const {
  std::vector<int> out;
  out.reserve(entries.size());
  for (const auto& c : entries) out.push_back(c.id);
  return out;
}

std::vector<int> CategoryTable::ids_of(Split split) const {
  std::vector<int> out;
  for (const auto& c : entries) {
    if (c.split == split) out.push_back(c.id);
  }
  return out;
}

const ImageInfo* Dataset::find_image(std::int64_t id) const {
  for (const auto& im : images) {
    if (im.id == id) return &im;
  }
  return nullptr;
}

void validate_dataset(const Dataset& d) {
  std::unordered_map<std::int64_t, const ImageInfo*> image_by_id;
  for (const auto& im : d.images) {
    if (!image_by_id.emplace(im.id, &im).second) {
      throw ValidationError("duplicate image id " + std::to_string(im.id));
    }
    if (im.width <= 0 || im.height <= 0) {
      throw ValidationError("image " + std::to_string(im.id) + " has non-positive size");
    }
  }
  std::unordered_set<int> category_ids;
  for (const auto& c : d.categories.entries) {
    if (!category_ids.insert(c.id).second) {
      throw ValidationError("duplicate category id " + std::to_string(c.id));
    }
  }
  std::unordered_set<std::int64_t> annotation_ids;
  for (const auto& a : d.annotations) {
    const std::string tag = "annotation " + std::to_string(a.id);
    if (!annotation_ids.insert(a.id).second) {
      throw ValidationError("duplicate annotation id " + std::to_string(a.id));
    }
    auto it = image_by_id.find(a.image_id);
    if (it == image_by_id.end()) {
      throw ValidationError(tag + ": image_id " + std::to_string(a.image_id) + " does not exist");
    }
    if (category_ids.find(a.category_id) == category_ids.end()) {
      throw ValidationError(tag + ": category_id " + std::to_string(a.category_id) +
                            " does not exist");
    }
    const BBox& b = a.bbox;
    if (!(b.w > 0.0) || !(b.h > 0.0)) {
      throw ValidationError(tag + ": bbox has non-positive width or height");
    }
    if (b.x < 0.0 || b.y < 0.0) {
      throw ValidationError(tag + ": bbox has negative origin");
    }
    const ImageInfo& im = *it->second;
    if (b.x2() > static_cast<double>(im.width) || b.y2() > static_cast<double>(im.height)) {
      throw ValidationError(tag + ": bbox exceeds image bounds");
    }
  }
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }

  Dataset d;
  try {
    for (const auto& im : j.at("images")) {
      d.images.push_back({im.at("id").get<std::int64_t>(), im.at("width").get<int>(),
                          im.at("height").get<int>()});
    }
    for (const auto& a : j.at("annotations")) {
      const auto& bb = a.at("bbox");
      if (!bb.is_array() || bb.size() != 4) {
        throw ParseError("bbox must be an array of 4 numbers");
      }
      d.annotations.push_back({a.at("id").get<std::int64_t>(),
                               a.at("image_id").get<std::int64_t>(),
                               a.at("category_id").get<int>(),
                               BBox{bb[0].get<double>(), bb[1].get<double>(),
                                    bb[2].get<double>(), bb[3].get<double>()}});
    }
    for (const auto& c : j.at("categories")) {
      d.categories.entries.push_back({c.at("id").get<int>(),
                                      c.at("name").get<std::string>(),
                                      split_from_name(c.at("split").get<std::string>())});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }

  validate_dataset(d);
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["images"] = nlohmann::json::array();
  for (const auto& im : d.images) {
    j["images"].push_back({{"id", im.id}, {"width", im.width}, {"height", im.height}});
  }
  j["annotations"] = nlohmann::json::array();
  for (const auto& a : d.annotations) {
    j["annotations"].push_back({{"id", a.id},
                                {"image_id", a.image_id},
                                {"category_id", a.category_id},
                                {"bbox", {a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h}}});
  }
  j["categories"] = nlohmann::json::array();
  for (const auto& c : d.categories.entries) {
    j["categories"].push_back({{"id", c.id}, {"name", c.name}, {"split", split_name(c.split)}});
  }
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::map<int, FrequencyBucket> frequency_buckets(const Dataset& d) {
  std::unordered_map<int, std::unordered_set<std::int64_t>> images_per_category;
  for (const auto& a : d.annotations) {
    images_per_category[a.category_id].insert(a.image_id);
  }
  std::map<int, FrequencyBucket> out;
  for (const auto& c : d.categories.entries) {
    const auto it = images_per_category.find(c.id);
    const std::size_t n = it == images_per_category.end() ? 0 : it->second.size();
    FrequencyBucket b = FrequencyBucket::kRare;
    if (n > 100) {
      b = FrequencyBucket::kFrequent;
    } else if (n >= 10) {
      b = FrequencyBucket::kCommon;
    }
    out[c.id] = b;
  }
  return out;
}

Dataset filter_by_categories(const Dataset& d, const std::set<int>& keep) {
  for (int id : keep) {
    if (!d.categories.contains(id)) {
      throw ValidationError("filter_by_categories: unknown category id " + std::to_string(id));
    }
  }
  Dataset out;
  out.images = d.images;
  for (const auto& a : d.annotations) {
    if (keep.count(a.category_id)) out.annotations.push_back(a);
  }
  for (const auto& c : d.categories.entries) {
    if (keep.count(c.id)) out.categories.entries.push_back(c);
  }
  return out;
}

}  // namespace fewdet
