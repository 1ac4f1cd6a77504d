#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "fewdet/detection.hpp"
#include "fewdet/featurestore.hpp"

namespace fewdet {

enum class ClassifierKind { kFc, kCosine };

/// Box classifier over C foreground classes plus one background column
/// (column index C). The fc kind is an affine layer; the cosine kind scores
/// alpha * cos(feature, w_j) and carries no bias.
struct ClassifierHead {
  ClassifierKind kind = ClassifierKind::kFc;
  double alpha = 20.0;   // used only by the cosine kind
  Eigen::MatrixXd W;     // d x (C+1)
  Eigen::VectorXd b;     // C+1, fc only (size 0 for cosine)

  int dim() const { return static_cast<int>(W.rows()); }
  int num_classes() const { return static_cast<int>(W.cols()) - 1; }
};

/// Per-class box regressor: 4 delta outputs per foreground class.
struct RegressorHead {
  Eigen::MatrixXd R;     // d x 4C
  Eigen::VectorXd b_r;   // 4C
};

/// The trainable object: classifier + regressor + the category id behind
/// each foreground column.
struct Heads {
  ClassifierHead cls;
  RegressorHead reg;
  std::vector<int> class_ids;  // size C, column -> category id

  /// Column index for a record label; background maps to num_classes().
  /// Unknown labels are a ValidationError.
  int column_of(std::int32_t label) const;
};

struct OptimState {
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  Eigen::MatrixXd vW;
  Eigen::VectorXd vb;
  Eigen::MatrixXd vR;
  Eigen::VectorXd vbr;

  static OptimState zeros_like(const Heads& h, double lr, double momentum, double weight_decay);
};

struct TrainConfig {
  int iters = 2000;
  int batch_size = 128;
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  bool freeze_base_classifier_columns = false;
  double loc_weight = 1.0;
};

struct Gradients {
  Eigen::MatrixXd W;
  Eigen::VectorXd b;
  Eigen::MatrixXd R;
  Eigen::VectorXd b_r;
};

struct BatchLossResult {
  double loss = 0.0;
  Gradients grads;
};

struct TrainResult {
  Heads heads;
  std::vector<double> loss_trace;
};

enum class InitMode { kRandom, kNovelPretrained };

/// Raw (pre-softmax) scores, length C+1. The cosine kind requires nonzero
/// feature and weight-column norms; violations raise NumericError rather
/// than being masked by an epsilon.
Eigen::VectorXd forward_scores(const ClassifierHead& h, const Eigen::VectorXd& f);

/// -log softmax(scores)[label], computed with max subtraction.
double cross_entropy(const Eigen::VectorXd& scores, int label);

/// Sum over 4 components of the Huber-style transition: 0.5 e^2 for |e| < 1,
/// |e| - 0.5 otherwise.
double smooth_l1(const Eigen::Vector4d& pred, const Eigen::Vector4d& target);

/// Mean cross-entropy over the batch plus loc_weight times the mean smooth-L1
/// over foreground records (the true class's delta block only), with exact
/// analytic gradients for every trainable parameter.
BatchLossResult batch_loss(const Heads& heads, std::span<const FeatureRecord* const> batch,
                           double loc_weight);

/// g' = grad + weight_decay * param; v <- momentum * v + g';
/// param <- param - lr * v. Plain momentum, no Nesterov, no dampening.
void sgd_step(Heads& heads, const Gradients& grads, OptimState& opt);

/// Builds a head over base_classes + novel_classes (+ background). Base
/// columns, bias entries, and regressor blocks are copied from base_head
/// when given; novel columns are N(0, 0.01^2) draws, or are copied from a
/// head pre-trained on novel_features in kNovelPretrained mode (see
/// pretrain_novel_head). Column order: sorted base ids, sorted novel ids,
/// background.
Heads init_head(InitMode mode, const Heads* base_head, const FeatureSet* novel_features,
                ClassifierKind kind, double alpha, int dim, const std::vector<int>& base_classes,
                const std::vector<int>& novel_classes, std::uint64_t seed,
                const TrainConfig* novel_cfg = nullptr);

/// The novel-weights initializer behind InitMode::kNovelPretrained: a fresh
/// head over the novel classes only, trained on novel_features.
Heads pretrain_novel_head(const FeatureSet& novel_features, ClassifierKind kind, double alpha,
                          int dim, const std::vector<int>& novel_classes, std::uint64_t seed,
                          const TrainConfig& cfg);

/// Mini-batch SGD over a seeded shuffle of the records (canonicalized, so
/// training is invariant to input record order), cycling epochs. When
/// cfg.freeze_base_classifier_columns is set, the columns and regressor
/// blocks of `frozen_classes` receive no update at all — not even weight
/// decay — so they stay bit-identical.
TrainResult train_head(const Heads& heads, const FeatureSet& feats, const TrainConfig& cfg,
                       const std::set<int>& frozen_classes = {});

/// Softmax scores per record; every foreground class with probability >=
/// score_thresh decodes its delta block against the proposal, then greedy
/// per-image per-class NMS at nms_iou and a per-image top-max_dets cut.
DetectionSet predict(const Heads& heads, const FeatureSet& feats, double score_thresh,
                     double nms_iou, int max_dets);

Heads load_heads(const std::filesystem::path& path);
void save_heads(const Heads& heads, const std::filesystem::path& path);

}  // namespace fewdet
