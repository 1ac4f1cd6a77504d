#include "fewdet/head.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "fewdet/errors.hpp"
#include "fewdet/evaluator.hpp"
#include "fewdet/rng.hpp"
#include "json.hpp"

namespace fewdet {

namespace {

enum HeadStream : std::uint64_t {
  kInitClsStream = 1,
  kInitRegStream,
  kShuffleStream,
  kPretrainInitStream,
  kPretrainTrainStream,
};

constexpr double kInitStd = 0.01;

void check_finite(const Eigen::VectorXd& v, const char* what) {
  if (!v.allFinite()) throw NumericError(std::string(what) + " contains non-finite values");
}

// p = softmax(s), lse = log sum exp(s), both with max subtraction.
void stable_softmax(const Eigen::VectorXd& s, Eigen::VectorXd& p, double& lse) {
  check_finite(s, "scores");
  const double m = s.maxCoeff();
  p = (s.array() - m).exp();
  const double z = p.sum();
  p /= z;
  lse = m + std::log(z);
}

double huber_grad(double e) {
  if (e > 1.0) return 1.0;
  if (e < -1.0) return -1.0;
  return e;
}

// Strict-total-order comparator making training independent of record order.
bool record_less(const FeatureRecord& a, const FeatureRecord& b) {
  if (a.image_id != b.image_id) return a.image_id < b.image_id;
  if (a.label != b.label) return a.label < b.label;
  if (a.proposal != b.proposal) return a.proposal < b.proposal;
  if (a.reg_target != b.reg_target) return a.reg_target < b.reg_target;
  return a.feature < b.feature;
}

void copy_column(Heads& dst, int dst_col, const Heads& src, int src_col) {
  dst.cls.W.col(dst_col) = src.cls.W.col(src_col);
  if (dst.cls.b.size() > 0 && src.cls.b.size() > 0) dst.cls.b(dst_col) = src.cls.b(src_col);
  const int c = dst.cls.num_classes();
  if (dst_col < c && src_col < src.cls.num_classes()) {
    dst.reg.R.block(0, 4 * dst_col, dst.reg.R.rows(), 4) =
        src.reg.R.block(0, 4 * src_col, src.reg.R.rows(), 4);
    dst.reg.b_r.segment(4 * dst_col, 4) = src.reg.b_r.segment(4 * src_col, 4);
  }
}

std::string kind_name(ClassifierKind k) { return k == ClassifierKind::kFc ? "fc" : "cosine"; }

ClassifierKind kind_from_name(const std::string& s) {
  if (s == "fc") return ClassifierKind::kFc;
  if (s == "cosine") return ClassifierKind::kCosine;
  throw ParseError("classifier kind must be \"fc\" or \"cosine\", got \"" + s + "\"");
}

}  // namespace

int Heads::column_of(std::int32_t label) const {
  if (label == kBackgroundLabel) return cls.num_classes();
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    if (class_ids[i] == label) return static_cast<int>(i);
  }
  throw ValidationError("label " + std::to_string(label) + " is not a head class");
}

OptimState OptimState::zeros_like(const Heads& h, double lr, double momentum,
                                  double weight_decay) {
  OptimState o;
  o.lr = lr;
  o.momentum = momentum;
  o.weight_decay = weight_decay;
  o.vW = Eigen::MatrixXd::Zero(h.cls.W.rows(), h.cls.W.cols());
  o.vb = Eigen::VectorXd::Zero(h.cls.b.size());
  o.vR = Eigen::MatrixXd::Zero(h.reg.R.rows(), h.reg.R.cols());
  o.vbr = Eigen::VectorXd::Zero(h.reg.b_r.size());
  return o;
}

Eigen::VectorXd forward_scores(const ClassifierHead& h, const Eigen::VectorXd& f) {
  if (f.size() != h.W.rows()) {
    throw ValidationError("feature dimension " + std::to_string(f.size()) +
                          " does not match head dimension " + std::to_string(h.W.rows()));
  }
  if (h.kind == ClassifierKind::kFc) {
    return h.W.transpose() * f + h.b;
  }
  const double nf = f.norm();
  if (nf == 0.0) throw NumericError("cosine classifier: zero-norm feature");
  Eigen::VectorXd s(h.W.cols());
  for (int j = 0; j < h.W.cols(); ++j) {
    const double nw = h.W.col(j).norm();
    if (nw == 0.0) {
      throw NumericError("cosine classifier: zero-norm weight column " + std::to_string(j));
    }
    s(j) = h.alpha * f.dot(h.W.col(j)) / (nf * nw);
  }
  return s;
}

double cross_entropy(const Eigen::VectorXd& scores, int label) {
  if (label < 0 || label >= scores.size()) {
    throw ValidationError("cross_entropy: label index out of range");
  }
  Eigen::VectorXd p;
  double lse;
  stable_softmax(scores, p, lse);
  return lse - scores(label);
}

double smooth_l1(const Eigen::Vector4d& pred, const Eigen::Vector4d& target) {
  if (!pred.allFinite() || !target.allFinite()) {
    throw NumericError("smooth_l1: non-finite input");
  }
  double loss = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double e = std::abs(pred(i) - target(i));
    loss += e < 1.0 ? 0.5 * e * e : e - 0.5;
  }
  return loss;
}

BatchLossResult batch_loss(const Heads& heads, std::span<const FeatureRecord* const> batch,
                           double loc_weight) {
  if (batch.empty()) throw ValidationError("batch_loss: empty batch");
  const int d = heads.cls.dim();
  const int c = heads.cls.num_classes();
  const bool cosine = heads.cls.kind == ClassifierKind::kCosine;

  BatchLossResult out;
  out.grads.W = Eigen::MatrixXd::Zero(d, c + 1);
  out.grads.b = Eigen::VectorXd::Zero(heads.cls.b.size());
  out.grads.R = Eigen::MatrixXd::Zero(d, 4 * c);
  out.grads.b_r = Eigen::VectorXd::Zero(4 * c);

  std::size_t n_fg = 0;
  for (const auto* r : batch) {
    if (r->label != kBackgroundLabel) ++n_fg;
  }
  const double cls_scale = 1.0 / static_cast<double>(batch.size());
  const double loc_scale = n_fg > 0 ? loc_weight / static_cast<double>(n_fg) : 0.0;

  Eigen::VectorXd f(d), scores(c + 1), p(c + 1), dscore(c + 1);
  for (const auto* rec : batch) {
    if (static_cast<int>(rec->feature.size()) != d) {
      throw ValidationError("batch_loss: record dimension mismatch");
    }
    for (int i = 0; i < d; ++i) f(i) = rec->feature[static_cast<std::size_t>(i)];
    const int col = heads.column_of(rec->label);

    scores = forward_scores(heads.cls, f);
    double lse;
    stable_softmax(scores, p, lse);
    out.loss += cls_scale * (lse - scores(col));

    dscore = p;
    dscore(col) -= 1.0;
    dscore *= cls_scale;
    if (!cosine) {
      out.grads.W.noalias() += f * dscore.transpose();
      out.grads.b += dscore;
    } else {
      const double nf = f.norm();
      for (int j = 0; j <= c; ++j) {
        const double nw = heads.cls.W.col(j).norm();
        const double dot = f.dot(heads.cls.W.col(j));
        const double coef = dscore(j) * heads.cls.alpha / (nf * nw);
        out.grads.W.col(j).noalias() += coef * (f - (dot / (nw * nw)) * heads.cls.W.col(j));
      }
    }

    if (rec->label != kBackgroundLabel) {
      Eigen::Vector4d pred, target;
      for (int i = 0; i < 4; ++i) {
        pred(i) = heads.reg.R.col(4 * col + i).dot(f) + heads.reg.b_r(4 * col + i);
        target(i) = rec->reg_target[static_cast<std::size_t>(i)];
      }
      out.loss += loc_scale * smooth_l1(pred, target);
      for (int i = 0; i < 4; ++i) {
        const double g = loc_scale * huber_grad(pred(i) - target(i));
        out.grads.R.col(4 * col + i).noalias() += g * f;
        out.grads.b_r(4 * col + i) += g;
      }
    }
  }
  if (!std::isfinite(out.loss)) throw NumericError("batch_loss: non-finite loss");
  return out;
}

void sgd_step(Heads& heads, const Gradients& grads, OptimState& opt) {
  if (grads.W.rows() != heads.cls.W.rows() || grads.W.cols() != heads.cls.W.cols() ||
      grads.R.cols() != heads.reg.R.cols() || grads.b.size() != heads.cls.b.size()) {
    throw ValidationError("sgd_step: gradient shapes do not match parameters");
  }
  opt.vW = opt.momentum * opt.vW + (grads.W + opt.weight_decay * heads.cls.W);
  heads.cls.W -= opt.lr * opt.vW;
  if (heads.cls.b.size() > 0) {
    opt.vb = opt.momentum * opt.vb + (grads.b + opt.weight_decay * heads.cls.b);
    heads.cls.b -= opt.lr * opt.vb;
  }
  opt.vR = opt.momentum * opt.vR + (grads.R + opt.weight_decay * heads.reg.R);
  heads.reg.R -= opt.lr * opt.vR;
  opt.vbr = opt.momentum * opt.vbr + (grads.b_r + opt.weight_decay * heads.reg.b_r);
  heads.reg.b_r -= opt.lr * opt.vbr;
}

Heads init_head(InitMode mode, const Heads* base_head, const FeatureSet* novel_features,
                ClassifierKind kind, double alpha, int dim, const std::vector<int>& base_classes,
                const std::vector<int>& novel_classes, std::uint64_t seed,
                const TrainConfig* novel_cfg) {
  if (dim < 1) throw ValidationError("init_head: dim must be >= 1");
  std::vector<int> base_sorted = base_classes;
  std::vector<int> novel_sorted = novel_classes;
  std::sort(base_sorted.begin(), base_sorted.end());
  std::sort(novel_sorted.begin(), novel_sorted.end());
  const int c = static_cast<int>(base_sorted.size() + novel_sorted.size());
  if (c < 1) throw ValidationError("init_head: no classes given");

  const Rng root(seed);
  Rng cls_rng = root.fork(kInitClsStream);
  Rng reg_rng = root.fork(kInitRegStream);

  Heads h;
  h.cls.kind = kind;
  h.cls.alpha = alpha;
  h.cls.W.resize(dim, c + 1);
  for (int j = 0; j <= c; ++j) {
    for (int i = 0; i < dim; ++i) h.cls.W(i, j) = cls_rng.normal(0.0, kInitStd);
  }
  h.cls.b = kind == ClassifierKind::kFc ? Eigen::VectorXd::Zero(c + 1) : Eigen::VectorXd();
  h.reg.R.resize(dim, 4 * c);
  for (int j = 0; j < 4 * c; ++j) {
    for (int i = 0; i < dim; ++i) h.reg.R(i, j) = reg_rng.normal(0.0, kInitStd);
  }
  h.reg.b_r = Eigen::VectorXd::Zero(4 * c);
  h.class_ids = base_sorted;
  h.class_ids.insert(h.class_ids.end(), novel_sorted.begin(), novel_sorted.end());

  if (base_head != nullptr) {
    if (base_head->cls.dim() != dim) {
      throw ValidationError("init_head: base head dimension mismatch");
    }
    for (int cid : base_sorted) {
      copy_column(h, h.column_of(cid), *base_head, base_head->column_of(cid));
    }
    copy_column(h, c, *base_head, base_head->cls.num_classes());  // background
  }

  if (mode == InitMode::kNovelPretrained) {
    if (novel_features == nullptr) {
      throw ValidationError("init_head: novel_pretrained mode requires novel features");
    }
    TrainConfig cfg = novel_cfg != nullptr ? *novel_cfg : TrainConfig{};
    if (novel_cfg == nullptr) cfg.seed = root.fork(kPretrainTrainStream).next_u64();
    const Heads pre =
        pretrain_novel_head(*novel_features, kind, alpha, dim, novel_sorted,
                            root.fork(kPretrainInitStream).next_u64(), cfg);
    for (int cid : novel_sorted) {
      copy_column(h, h.column_of(cid), pre, pre.column_of(cid));
    }
  }
  return h;
}

Heads pretrain_novel_head(const FeatureSet& novel_features, ClassifierKind kind, double alpha,
                          int dim, const std::vector<int>& novel_classes, std::uint64_t seed,
                          const TrainConfig& cfg) {
  const Heads start = init_head(InitMode::kRandom, nullptr, nullptr, kind, alpha, dim, {},
                                novel_classes, seed);
  return train_head(start, novel_features, cfg).heads;
}

TrainResult train_head(const Heads& heads, const FeatureSet& feats, const TrainConfig& cfg,
                       const std::set<int>& frozen_classes) {
  if (feats.records.empty()) throw ValidationError("train_head: empty feature set");
  if (feats.dim != heads.cls.dim()) {
    throw ValidationError("train_head: feature dim does not match head dim");
  }
  if (cfg.iters < 1) throw ValidationError("train_head: iters must be >= 1");
  if (cfg.batch_size < 1) throw ValidationError("train_head: batch_size must be >= 1");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) {
    throw ValidationError("train_head: momentum must be in [0, 1)");
  }
  if (cfg.weight_decay < 0.0 || cfg.lr < 0.0 || cfg.loc_weight < 0.0) {
    throw ValidationError("train_head: lr, weight_decay and loc_weight must be >= 0");
  }

  TrainResult out;
  out.heads = heads;
  Heads& h = out.heads;

  std::vector<bool> frozen(static_cast<std::size_t>(h.cls.num_classes()) + 1, false);
  bool any_frozen = false;
  if (cfg.freeze_base_classifier_columns) {
    for (int cid : frozen_classes) {
      frozen[static_cast<std::size_t>(h.column_of(cid))] = true;
      any_frozen = true;
    }
  }

  // Canonical record order: training must not depend on input order.
  const std::size_t n = feats.records.size();
  std::vector<int> canonical(n);
  std::iota(canonical.begin(), canonical.end(), 0);
  std::sort(canonical.begin(), canonical.end(), [&](int a, int b) {
    return record_less(feats.records[static_cast<std::size_t>(a)],
                       feats.records[static_cast<std::size_t>(b)]);
  });

  OptimState opt = OptimState::zeros_like(h, cfg.lr, cfg.momentum, cfg.weight_decay);
  Rng shuffle_rng = Rng(cfg.seed).fork(kShuffleStream);
  std::vector<int> order;
  std::size_t pos = n;  // forces a shuffle before the first batch
  std::vector<const FeatureRecord*> batch;
  batch.reserve(static_cast<std::size_t>(cfg.batch_size));

  const int c = h.cls.num_classes();
  for (int iter = 0; iter < cfg.iters; ++iter) {
    if (pos >= n) {
      order = canonical;
      for (std::size_t i = 0; i + 1 < n; ++i) {
        const std::size_t j = i + shuffle_rng.uniform_below(n - i);
        std::swap(order[i], order[j]);
      }
      pos = 0;
    }
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size),
                                                   n - pos);
    batch.clear();
    for (std::size_t i = 0; i < take; ++i) {
      batch.push_back(&feats.records[static_cast<std::size_t>(order[pos + i])]);
    }
    pos += take;

    BatchLossResult res = batch_loss(h, batch, cfg.loc_weight);
    if (!any_frozen) {
      sgd_step(h, res.grads, opt);
    } else {
      // Frozen columns are skipped outright so that neither the loss gradient
      // nor weight decay can move them.
      for (int j = 0; j <= c; ++j) {
        if (frozen[static_cast<std::size_t>(j)]) continue;
        opt.vW.col(j) = cfg.momentum * opt.vW.col(j) +
                        (res.grads.W.col(j) + cfg.weight_decay * h.cls.W.col(j));
        h.cls.W.col(j) -= cfg.lr * opt.vW.col(j);
        if (h.cls.b.size() > 0) {
          opt.vb(j) = cfg.momentum * opt.vb(j) + (res.grads.b(j) + cfg.weight_decay * h.cls.b(j));
          h.cls.b(j) -= cfg.lr * opt.vb(j);
        }
        if (j < c) {
          opt.vR.middleCols(4 * j, 4) =
              cfg.momentum * opt.vR.middleCols(4 * j, 4) +
              (res.grads.R.middleCols(4 * j, 4) + cfg.weight_decay * h.reg.R.middleCols(4 * j, 4));
          h.reg.R.middleCols(4 * j, 4) -= cfg.lr * opt.vR.middleCols(4 * j, 4);
          opt.vbr.segment(4 * j, 4) =
              cfg.momentum * opt.vbr.segment(4 * j, 4) +
              (res.grads.b_r.segment(4 * j, 4) + cfg.weight_decay * h.reg.b_r.segment(4 * j, 4));
          h.reg.b_r.segment(4 * j, 4) -= cfg.lr * opt.vbr.segment(4 * j, 4);
        }
      }
    }
    out.loss_trace.push_back(res.loss);
  }
  return out;
}

DetectionSet predict(const Heads& heads, const FeatureSet& feats, double score_thresh,
                     double nms_iou, int max_dets) {
  if (!feats.records.empty() && feats.dim != heads.cls.dim()) {
    throw ValidationError("predict: feature dim does not match head dim");
  }
  const int d = heads.cls.dim();
  const int c = heads.cls.num_classes();

  DetectionSet candidates;
  Eigen::VectorXd f(d), p;
  for (const auto& rec : feats.records) {
    for (int i = 0; i < d; ++i) f(i) = rec.feature[static_cast<std::size_t>(i)];
    double lse;
    stable_softmax(forward_scores(heads.cls, f), p, lse);
    for (int j = 0; j < c; ++j) {
      if (p(j) < score_thresh) continue;
      std::array<double, 4> deltas;
      for (int i = 0; i < 4; ++i) {
        deltas[static_cast<std::size_t>(i)] =
            heads.reg.R.col(4 * j + i).dot(f) + heads.reg.b_r(4 * j + i);
      }
      BBox box = decode_reg_target(deltas, rec.proposal_box());
      const double x1 = std::max(box.x, 0.0);
      const double y1 = std::max(box.y, 0.0);
      if (box.x2() <= x1 || box.y2() <= y1) continue;
      candidates.push_back({static_cast<std::int64_t>(rec.image_id), heads.class_ids[static_cast<std::size_t>(j)],
                            BBox{x1, y1, box.x2() - x1, box.y2() - y1}, p(j)});
    }
  }

  // Greedy NMS within each (image, class) group, highest score first.
  std::map<std::pair<std::int64_t, int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    groups[{candidates[i].image_id, candidates[i].category_id}].push_back(i);
  }
  std::vector<std::size_t> survivors;
  for (auto& [key, idxs] : groups) {
    std::sort(idxs.begin(), idxs.end(), [&](std::size_t a, std::size_t b) {
      if (candidates[a].score != candidates[b].score) {
        return candidates[a].score > candidates[b].score;
      }
      return a < b;
    });
    std::vector<std::size_t> kept;
    for (std::size_t i : idxs) {
      bool suppressed = false;
      for (std::size_t k : kept) {
        if (iou(candidates[i].bbox, candidates[k].bbox) > nms_iou) {
          suppressed = true;
          break;
        }
      }
      if (!suppressed) kept.push_back(i);
    }
    survivors.insert(survivors.end(), kept.begin(), kept.end());
  }

  // Per-image cap.
  std::map<std::int64_t, std::vector<std::size_t>> by_image;
  for (std::size_t i : survivors) by_image[candidates[i].image_id].push_back(i);
  std::vector<std::size_t> final_idx;
  for (auto& [img, idxs] : by_image) {
    std::sort(idxs.begin(), idxs.end(), [&](std::size_t a, std::size_t b) {
      if (candidates[a].score != candidates[b].score) {
        return candidates[a].score > candidates[b].score;
      }
      return a < b;
    });
    const std::size_t keep = std::min<std::size_t>(idxs.size(), static_cast<std::size_t>(max_dets));
    final_idx.insert(final_idx.end(), idxs.begin(), idxs.begin() + static_cast<std::ptrdiff_t>(keep));
  }

  std::sort(final_idx.begin(), final_idx.end(), [&](std::size_t a, std::size_t b) {
    const Detection& da = candidates[a];
    const Detection& db = candidates[b];
    if (da.image_id != db.image_id) return da.image_id < db.image_id;
    if (da.score != db.score) return da.score > db.score;
    if (da.category_id != db.category_id) return da.category_id < db.category_id;
    return a < b;
  });
  DetectionSet out;
  out.reserve(final_idx.size());
  for (std::size_t i : final_idx) out.push_back(candidates[i]);
  return out;
}

Heads load_heads(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    Heads h;
    h.cls.kind = kind_from_name(j.at("kind").get<std::string>());
    const int d = j.at("dim").get<int>();
    const int c = j.at("num_classes").get<int>();
    if (d < 1 || c < 1) throw ParseError("head file: dim and num_classes must be >= 1");
    if (h.cls.kind == ClassifierKind::kCosine) h.cls.alpha = j.at("alpha").get<double>();
    const auto w = j.at("W").get<std::vector<double>>();
    if (w.size() != static_cast<std::size_t>(d) * (c + 1)) {
      throw ParseError("head file: W has wrong size");
    }
    h.cls.W.resize(d, c + 1);
    for (int r = 0; r < d; ++r) {
      for (int col = 0; col <= c; ++col) {
        h.cls.W(r, col) = w[static_cast<std::size_t>(r) * (c + 1) + col];
      }
    }
    if (h.cls.kind == ClassifierKind::kFc) {
      const auto b = j.at("b").get<std::vector<double>>();
      if (b.size() != static_cast<std::size_t>(c) + 1) throw ParseError("head file: b has wrong size");
      h.cls.b = Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
    }
    const auto r_flat = j.at("R").get<std::vector<double>>();
    if (r_flat.size() != static_cast<std::size_t>(d) * 4 * c) {
      throw ParseError("head file: R has wrong size");
    }
    h.reg.R.resize(d, 4 * c);
    for (int r = 0; r < d; ++r) {
      for (int col = 0; col < 4 * c; ++col) {
        h.reg.R(r, col) = r_flat[static_cast<std::size_t>(r) * 4 * c + col];
      }
    }
    const auto br = j.at("b_r").get<std::vector<double>>();
    if (br.size() != static_cast<std::size_t>(4) * c) throw ParseError("head file: b_r has wrong size");
    h.reg.b_r = Eigen::Map<const Eigen::VectorXd>(br.data(), static_cast<Eigen::Index>(br.size()));
    h.class_ids = j.at("class_ids").get<std::vector<int>>();
    if (h.class_ids.size() != static_cast<std::size_t>(c)) {
      throw ParseError("head file: class_ids has wrong size");
    }
    return h;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void save_heads(const Heads& heads, const std::filesystem::path& path) {
  const int d = heads.cls.dim();
  const int c = heads.cls.num_classes();
  nlohmann::ordered_json j;
  j["kind"] = kind_name(heads.cls.kind);
  j["dim"] = d;
  j["num_classes"] = c;
  if (heads.cls.kind == ClassifierKind::kCosine) j["alpha"] = heads.cls.alpha;
  std::vector<double> w;
  w.reserve(static_cast<std::size_t>(d) * (c + 1));
  for (int r = 0; r < d; ++r) {
    for (int col = 0; col <= c; ++col) w.push_back(heads.cls.W(r, col));
  }
  j["W"] = w;
  if (heads.cls.kind == ClassifierKind::kFc) {
    j["b"] = std::vector<double>(heads.cls.b.data(), heads.cls.b.data() + heads.cls.b.size());
  }
  std::vector<double> r_flat;
  r_flat.reserve(static_cast<std::size_t>(d) * 4 * c);
  for (int r = 0; r < d; ++r) {
    for (int col = 0; col < 4 * c; ++col) r_flat.push_back(heads.reg.R(r, col));
  }
  j["R"] = r_flat;
  j["b_r"] = std::vector<double>(heads.reg.b_r.data(), heads.reg.b_r.data() + heads.reg.b_r.size());
  j["class_ids"] = heads.class_ids;
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << j.dump() << "\n";
}

}  // namespace fewdet
