#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "fewdet/dataset.hpp"

namespace fewdet {

constexpr std::int32_t kBackgroundLabel = -1;

/// One frozen proposal feature. The proposal is stored as (x1, y1, x2, y2)
/// corners in float32, matching the on-disk layout, so file round-trips are
/// bit-exact. Background records (label -1) carry zero regression targets.
struct FeatureRecord {
  std::uint64_t image_id = 0;
  std::array<float, 4> proposal{};    // x1, y1, x2, y2
  std::int32_t label = kBackgroundLabel;
  std::array<float, 4> reg_target{};  // tx, ty, tw, th
  std::vector<float> feature;

  BBox proposal_box() const {
    return BBox{proposal[0], proposal[1], static_cast<double>(proposal[2]) - proposal[0],
                static_cast<double>(proposal[3]) - proposal[1]};
  }
};

struct FeatureSet {
  int dim = 0;
  std::vector<FeatureRecord> records;
};

struct SynthConfig {
  int n_classes_base = 15;
  int n_classes_novel = 5;
  int dim = 64;
  int per_class_count = 300;
  double class_separation = 4.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 0;
};

struct SynthOutput {
  Dataset dataset;   // ground truth aligned with the test records
  FeatureSet train;  // candidate pool: one record per annotation, plus background
  FeatureSet test;
};

/// Center/size log-space deltas taking `proposal` to `gt`:
/// tx = (cx_g - cx_p)/w_p, ty = (cy_g - cy_p)/h_p, tw = ln(w_g/w_p),
/// th = ln(h_g/h_p). Non-positive box sizes are a ValidationError.
std::array<double, 4> encode_reg_target(const BBox& proposal, const BBox& gt);

/// Inverse of encode_reg_target. tw/th are clamped to ln(1000/16) before
/// exponentiation so extreme deltas stay finite.
BBox decode_reg_target(const std::array<double, 4>& deltas, const BBox& proposal);

/// Deterministic synthetic surrogate for a frozen feature extractor: one
/// orthonormal mean direction per class (requires dim >= total classes),
/// features = class_separation * mean + N(0, noise_sigma^2 I), proposals
/// jittered around synthetic ground-truth boxes, plus pure-noise background
/// records. Train and test records use independent noise draws.
SynthOutput synth_features(const SynthConfig& cfg);

FeatureSet read_features(const std::filesystem::path& path);
void write_features(const FeatureSet& fs, const std::filesystem::path& path);

}  // namespace fewdet
