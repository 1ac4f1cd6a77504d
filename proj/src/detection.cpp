#include "fewdet/detection.hpp"

#include <fstream>

#include "fewdet/errors.hpp"
#include "json.hpp"

namespace fewdet {

DetectionSet load_detections(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    DetectionSet out;
    for (const auto& e : j) {
      const auto& bb = e.at("bbox");
      if (!bb.is_array() || bb.size() != 4) {
        throw ParseError("detection bbox must be an array of 4 numbers");
      }
      out.push_back({e.at("image_id").get<std::int64_t>(), e.at("category_id").get<int>(),
                     BBox{bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(),
                          bb[3].get<double>()},
                     e.at("score").get<double>()});
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void save_detections(const DetectionSet& dets, const std::filesystem::path& path) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& d : dets) {
    j.push_back({{"image_id", d.image_id},
                 {"category_id", d.category_id},
                 {"bbox", {d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h}},
                 {"score", d.score}});
  }
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace fewdet
