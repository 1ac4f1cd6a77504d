#include "fewdet/featurestore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "fewdet/errors.hpp"
#include "fewdet/rng.hpp"

namespace fewdet {

namespace {

const double kDeltaClamp = std::log(1000.0 / 16.0);

constexpr char kMagic[4] = {'T', 'F', 'A', 'F'};
constexpr std::uint32_t kFormatVersion = 1;

// Sub-stream tags for the synthetic generator.
enum SynthStream : std::uint64_t {
  kMeansStream = 1,
  kLayoutStream,
  kBoxStream,
  kTestGeomStream,
  kTestFeatStream,
  kTestBgStream,
  kTrainGeomStream,
  kTrainFeatStream,
  kTrainBgStream,
};

void put_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put_le(std::ofstream& out, T value) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
#if defined(__BYTE_ORDER__) && __BYTE_ORDER__ == __ORDER_BIG_ENDIAN__
  std::reverse(buf, buf + sizeof(T));
#endif
  put_bytes(out, buf, sizeof(T));
}

template <typename T>
T get_le(std::ifstream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) {
    throw ParseError("feature file truncated");
  }
#if defined(__BYTE_ORDER__) && __BYTE_ORDER__ == __ORDER_BIG_ENDIAN__
  std::reverse(buf, buf + sizeof(T));
#endif
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

void check_box(const BBox& b, const char* what) {
  if (!(b.w > 0.0) || !(b.h > 0.0)) {
    throw ValidationError(std::string(what) + " box has non-positive width or height");
  }
}

}  // namespace

std::array<double, 4> encode_reg_target(const BBox& proposal, const BBox& gt) {
  check_box(proposal, "proposal");
  check_box(gt, "ground-truth");
  const double pcx = proposal.x + 0.5 * proposal.w;
  const double pcy = proposal.y + 0.5 * proposal.h;
  const double gcx = gt.x + 0.5 * gt.w;
  const double gcy = gt.y + 0.5 * gt.h;
  return {(gcx - pcx) / proposal.w, (gcy - pcy) / proposal.h, std::log(gt.w / proposal.w),
          std::log(gt.h / proposal.h)};
}

BBox decode_reg_target(const std::array<double, 4>& deltas, const BBox& proposal) {
  check_box(proposal, "proposal");
  const double tw = std::min(deltas[2], kDeltaClamp);
  const double th = std::min(deltas[3], kDeltaClamp);
  const double cx = proposal.x + 0.5 * proposal.w + deltas[0] * proposal.w;
  const double cy = proposal.y + 0.5 * proposal.h + deltas[1] * proposal.h;
  const double w = std::exp(tw) * proposal.w;
  const double h = std::exp(th) * proposal.h;
  return BBox{cx - 0.5 * w, cy - 0.5 * h, w, h};
}

void write_features(const FeatureSet& fs, const std::filesystem::path& path) {
  if (fs.dim < 1) throw ValidationError("feature set dim must be >= 1");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write " + path.string());
  put_bytes(out, kMagic, 4);
  put_le<std::uint32_t>(out, kFormatVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(fs.dim));
  put_le<std::uint64_t>(out, fs.records.size());
  for (const auto& r : fs.records) {
    if (static_cast<int>(r.feature.size()) != fs.dim) {
      throw ValidationError("feature record dimension mismatch");
    }
    put_le<std::uint64_t>(out, r.image_id);
    for (float v : r.proposal) put_le<float>(out, v);
    put_le<std::int32_t>(out, r.label);
    for (float v : r.reg_target) put_le<float>(out, v);
    for (float v : r.feature) put_le<float>(out, v);
  }
  if (!out) throw ParseError("write failed for " + path.string());
}

FeatureSet read_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw ParseError(path.string() + ": bad magic");
  }
  const auto version = get_le<std::uint32_t>(in);
  if (version != kFormatVersion) {
    throw ParseError(path.string() + ": unsupported version " + std::to_string(version));
  }
  FeatureSet fs;
  fs.dim = static_cast<int>(get_le<std::uint32_t>(in));
  if (fs.dim < 1) throw ParseError(path.string() + ": dim must be >= 1");
  const auto count = get_le<std::uint64_t>(in);
  fs.records.resize(count);
  for (auto& r : fs.records) {
    r.image_id = get_le<std::uint64_t>(in);
    for (auto& v : r.proposal) v = get_le<float>(in);
    r.label = get_le<std::int32_t>(in);
    for (auto& v : r.reg_target) v = get_le<float>(in);
    r.feature.resize(static_cast<std::size_t>(fs.dim));
    for (auto& v : r.feature) v = get_le<float>(in);
  }
  return fs;
}

namespace {

// Scale of the delta directions mixed into foreground features. ROI features
// of a real detector encode how the object sits inside the proposal; without
// this term box regression would be unlearnable from the synthetic features.
constexpr double kGeometryGain = 10.0;

// Orthonormal directions via Gram-Schmidt on a Gaussian draw: one per class
// plus four carrying the regression target.
std::vector<std::vector<double>> orthonormal_directions(int dim, int count, Rng rng) {
  std::vector<std::vector<double>> dirs(count, std::vector<double>(dim));
  for (auto& m : dirs) {
    for (auto& v : m) v = rng.normal();
  }
  for (int c = 0; c < count; ++c) {
    auto& m = dirs[static_cast<std::size_t>(c)];
    for (int j = 0; j < c; ++j) {
      double dot = 0.0;
      for (int i = 0; i < dim; ++i) dot += dirs[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] * m[static_cast<std::size_t>(i)];
      for (int i = 0; i < dim; ++i) m[static_cast<std::size_t>(i)] -= dot * dirs[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
    }
    double norm = 0.0;
    for (double v : m) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-8) throw NumericError("degenerate direction draw");
    for (auto& v : m) v /= norm;
  }
  return dirs;
}

std::vector<float> draw_feature(const std::vector<double>* mean, double separation,
                                const std::vector<std::vector<double>>* delta_dirs,
                                const std::array<double, 4>* deltas, double sigma, int dim,
                                Rng rng) {
  std::vector<float> f(static_cast<std::size_t>(dim));
  for (int i = 0; i < dim; ++i) {
    double v = mean ? separation * (*mean)[static_cast<std::size_t>(i)] : 0.0;
    if (delta_dirs != nullptr) {
      for (int k = 0; k < 4; ++k) {
        v += kGeometryGain * (*deltas)[static_cast<std::size_t>(k)] *
             (*delta_dirs)[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)];
      }
    }
    f[static_cast<std::size_t>(i)] = static_cast<float>(v + sigma * rng.normal());
  }
  return f;
}

BBox random_box(Rng& rng, int img_w, int img_h) {
  const double w = rng.uniform(40.0, 160.0);
  const double h = rng.uniform(40.0, 160.0);
  const double x = rng.uniform(0.0, img_w - w);
  const double y = rng.uniform(0.0, img_h - h);
  return BBox{x, y, w, h};
}

FeatureRecord make_proposal_record(const Annotation& ann, const BBox& gt, double sigma,
                                   double separation, const std::vector<double>& mean,
                                   const std::vector<std::vector<double>>& delta_dirs, int dim,
                                   Rng geom_rng, Rng feat_rng) {
  // Jitter keeps proposals overlapping their box but off-center, so the
  // regression targets are nonzero and informative.
  const double dx = geom_rng.uniform(-0.08, 0.08) * gt.w;
  const double dy = geom_rng.uniform(-0.08, 0.08) * gt.h;
  const double sw = std::exp(geom_rng.uniform(-0.12, 0.12));
  const double sh = std::exp(geom_rng.uniform(-0.12, 0.12));
  const double pw = gt.w * sw;
  const double ph = gt.h * sh;
  const double pcx = gt.x + 0.5 * gt.w + dx;
  const double pcy = gt.y + 0.5 * gt.h + dy;

  FeatureRecord r;
  r.image_id = static_cast<std::uint64_t>(ann.image_id);
  r.label = ann.category_id;
  r.proposal = {static_cast<float>(pcx - 0.5 * pw), static_cast<float>(pcy - 0.5 * ph),
                static_cast<float>(pcx + 0.5 * pw), static_cast<float>(pcy + 0.5 * ph)};
  // Encode against the float-rounded proposal so decoding the stored record
  // recovers the ground-truth box to float precision.
  const auto deltas = encode_reg_target(r.proposal_box(), gt);
  for (int i = 0; i < 4; ++i) r.reg_target[static_cast<std::size_t>(i)] = static_cast<float>(deltas[static_cast<std::size_t>(i)]);
  r.feature = draw_feature(&mean, separation, &delta_dirs, &deltas, sigma, dim, feat_rng);
  return r;
}

}  // namespace

SynthOutput synth_features(const SynthConfig& cfg) {
  if (cfg.n_classes_base < 1 || cfg.n_classes_novel < 1 || cfg.dim < 1 ||
      cfg.per_class_count < 1) {
    throw ValidationError("synth_features: all counts must be >= 1");
  }
  if (!(cfg.class_separation > 0.0)) {
    throw ValidationError("synth_features: class_separation must be > 0");
  }
  if (cfg.noise_sigma < 0.0) {
    throw ValidationError("synth_features: noise_sigma must be >= 0");
  }
  const int n_classes = cfg.n_classes_base + cfg.n_classes_novel;
  if (n_classes + 4 > cfg.dim) {
    throw ValidationError("synth_features: dim " + std::to_string(cfg.dim) +
                          " too small for " + std::to_string(n_classes) +
                          " orthogonal class directions plus 4 delta directions");
  }

  const Rng root(cfg.seed);
  auto directions = orthonormal_directions(cfg.dim, n_classes + 4, root.fork(kMeansStream));
  const std::vector<std::vector<double>> delta_dirs(directions.end() - 4, directions.end());
  directions.resize(static_cast<std::size_t>(n_classes));
  const auto& means = directions;

  constexpr int kImageWidth = 640;
  constexpr int kImageHeight = 480;
  constexpr int kObjectsPerImage = 5;

  SynthOutput out;
  for (int c = 0; c < n_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof(name), "class_%02d", c + 1);
    out.dataset.categories.entries.push_back(
        {c + 1, name, c < cfg.n_classes_base ? Split::kBase : Split::kNovel});
  }

  // Interleave classes across images, then assign ids in layout order.
  std::vector<int> instance_class;
  instance_class.reserve(static_cast<std::size_t>(n_classes) * cfg.per_class_count);
  for (int c = 0; c < n_classes; ++c) {
    for (int i = 0; i < cfg.per_class_count; ++i) instance_class.push_back(c);
  }
  Rng layout = root.fork(kLayoutStream);
  for (std::size_t i = 0; i + 1 < instance_class.size(); ++i) {
    const std::size_t j = i + layout.uniform_below(instance_class.size() - i);
    std::swap(instance_class[i], instance_class[j]);
  }

  const std::size_t n_instances = instance_class.size();
  const std::size_t n_images = (n_instances + kObjectsPerImage - 1) / kObjectsPerImage;
  for (std::size_t i = 0; i < n_images; ++i) {
    out.dataset.images.push_back(
        {static_cast<std::int64_t>(i + 1), kImageWidth, kImageHeight});
  }

  const Rng box_rng = root.fork(kBoxStream);
  for (std::size_t i = 0; i < n_instances; ++i) {
    Annotation ann;
    ann.id = static_cast<std::int64_t>(i + 1);
    ann.image_id = static_cast<std::int64_t>(i / kObjectsPerImage + 1);
    ann.category_id = instance_class[i] + 1;
    Rng r = box_rng.fork(static_cast<std::uint64_t>(ann.id));
    ann.bbox = random_box(r, kImageWidth, kImageHeight);
    out.dataset.annotations.push_back(ann);
  }

  out.train.dim = cfg.dim;
  out.test.dim = cfg.dim;
  const Rng test_geom = root.fork(kTestGeomStream);
  const Rng test_feat = root.fork(kTestFeatStream);
  const Rng train_geom = root.fork(kTrainGeomStream);
  const Rng train_feat = root.fork(kTrainFeatStream);
  for (const auto& ann : out.dataset.annotations) {
    const auto& mean = means[static_cast<std::size_t>(ann.category_id - 1)];
    const auto tag = static_cast<std::uint64_t>(ann.id);
    out.test.records.push_back(make_proposal_record(
        ann, ann.bbox, cfg.noise_sigma, cfg.class_separation, mean, delta_dirs, cfg.dim,
        test_geom.fork(tag), test_feat.fork(tag)));
    out.train.records.push_back(make_proposal_record(
        ann, ann.bbox, cfg.noise_sigma, cfg.class_separation, mean, delta_dirs, cfg.dim,
        train_geom.fork(tag), train_feat.fork(tag)));
  }

  // The training pool carries enough background for calibrated background
  // scoring; the test set carries a lighter share so false-positive pressure
  // stays realistic rather than dominant.
  const std::size_t n_train_bg = (n_instances + 1) / 2;
  const std::size_t n_test_bg = (n_instances + 5) / 6;
  const Rng test_bg = root.fork(kTestBgStream);
  const Rng train_bg = root.fork(kTrainBgStream);
  for (std::size_t b = 0; b < std::max(n_train_bg, n_test_bg); ++b) {
    for (const auto* stream : {&test_bg, &train_bg}) {
      if (b >= (stream == &test_bg ? n_test_bg : n_train_bg)) continue;
      Rng r = stream->fork(b);
      FeatureRecord rec;
      rec.image_id = 1 + r.uniform_below(n_images);
      const BBox box = random_box(r, kImageWidth, kImageHeight);
      rec.proposal = {static_cast<float>(box.x), static_cast<float>(box.y),
                      static_cast<float>(box.x2()), static_cast<float>(box.y2())};
      rec.label = kBackgroundLabel;
      rec.feature = draw_feature(nullptr, 0.0, nullptr, nullptr, cfg.noise_sigma, cfg.dim, r);
      (stream == &test_bg ? out.test : out.train).records.push_back(std::move(rec));
    }
  }

  validate_dataset(out.dataset);
  return out;
}

}  // namespace fewdet
