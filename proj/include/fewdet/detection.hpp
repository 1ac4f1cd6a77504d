#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "fewdet/dataset.hpp"

namespace fewdet {

struct Detection {
  std::int64_t image_id = 0;
  int category_id = 0;
  BBox bbox;
  double score = 0.0;
};

using DetectionSet = std::vector<Detection>;

/// COCO results convention: a JSON array of
/// {image_id, category_id, bbox:[x,y,w,h], score}.
DetectionSet load_detections(const std::filesystem::path& path);
void save_detections(const DetectionSet& dets, const std::filesystem::path& path);

}  // namespace fewdet
