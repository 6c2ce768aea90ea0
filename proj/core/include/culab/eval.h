#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "culab/data.h"
#include "culab/model.h"

namespace culab {

// Fraction of rows whose argmax logit equals the label.
double accuracy(const ModelParameters& model, const Dataset& view);
double accuracy_of_predictions(const std::vector<int>& predictions, const std::vector<int>& labels);

// Mean cross-entropy of the model on a dataset.
double mean_cross_entropy(const ModelParameters& model, const Dataset& view);

struct AccuracyRow {
  std::string split;  // "D_r_ts", "D_u_tr", "D_u_ts", "D_ts"
  double accuracy = 0.0;
  std::optional<double> reference;
  std::optional<double> delta;  // accuracy - reference
};

struct EvaluationReport {
  TaskKind kind = TaskKind::kClass;
  std::vector<AccuracyRow> rows;
};

// Class kind reports D_r_ts, D_u_tr, D_u_ts; sample kind reports D_ts, D_u_tr.
EvaluationReport evaluate(const ModelParameters& model, const UnlearnTask& task,
                          const ModelParameters* reference = nullptr);

// --- Embedding geometry ----------------------------------------------------

struct Centroid {
  std::vector<double> mean;  // un-normalized mean embedding
  std::size_t count = 0;
  bool degenerate = false;   // norm <= 1e-12: no direction to compare against
};

// Per-class mean embedding; absent (count 0) for classes with no rows.
std::vector<Centroid> class_centroids(const Tensor& embeddings, const std::vector<int>& labels,
                                      std::size_t num_classes);

// Cosine similarity of a unit embedding to a centroid; nullopt when the
// centroid is absent or degenerate.
std::optional<double> centroid_similarity(std::span<const double> embedding, const Centroid& centroid);

struct SampleGeometry {
  std::size_t train_index = 0;
  int label = 0;
  std::optional<double> own_similarity;
  std::optional<double> max_other_similarity;
};

struct GeometryDiagnostics {
  std::vector<Centroid> centroids;  // of remaining-sample embeddings
  std::vector<SampleGeometry> samples;
  std::optional<double> mean_own_similarity;
  std::optional<double> mean_max_other_similarity;
};

GeometryDiagnostics embedding_geometry(const ModelParameters& model, const UnlearnTask& task);

// --- Membership inference ----------------------------------------------------

struct AttackModel {
  std::vector<double> weights;
  double bias = 0.0;

  double probability(std::span<const double> features) const;
  bool is_member(std::span<const double> features) const { return probability(features) > 0.5; }
};

struct MiaConfig {
  std::uint64_t split_seed = 0;
  std::size_t max_per_side = 1000;
  double validation_fraction = 0.2;
  double ridge = 1e-4;
  std::size_t max_iterations = 100;
  // Appends the probability of the true label to the sorted softmax vector.
  bool label_probability = true;
};

struct AttackTraining {
  AttackModel model;
  double validation_accuracy = 0.0;
  std::size_t train_size = 0;
  std::size_t validation_size = 0;
};

// Softmax probabilities of each row, sorted descending. When `labels` is
// given, the probability assigned to each row's label is appended as an
// extra column.
Tensor attack_features(const ModelParameters& model, const Tensor& x, const std::vector<int>* labels = nullptr);

// L2-regularized logistic regression (Newton iterations) on a seeded
// train/validation split of the rows.
AttackTraining fit_attack(const Tensor& features, const std::vector<int>& member_labels, const MiaConfig& cfg);

struct MiaAttack {
  AttackTraining training;
  std::vector<std::size_t> member_idx;         // D^M, into remain_train
  std::vector<std::size_t> nonmember_idx;      // D^N, into test
  std::vector<std::size_t> heldout_member_idx;  // into remain_train, disjoint from D^M
};

// Samples balanced members (remaining train) and non-members (test) and fits
// the attack on the model's sorted softmax outputs.
MiaAttack mia_train(const ModelParameters& model, const UnlearnTask& task, const MiaConfig& cfg);

// Fraction of rows the attack labels as members (probability > 0.5).
double mia_member_rate(const AttackModel& attack, const ModelParameters& model, const Dataset& samples,
                       bool label_probability = true);
double member_rate_of_predictions(const std::vector<bool>& predictions);

struct MiaReport {
  double unlearn_member_rate = 0.0;
  double heldout_member_rate = 0.0;
  double attack_validation_accuracy = 0.0;
  std::size_t members_size = 0;
  std::size_t nonmembers_size = 0;
  std::size_t unlearn_size = 0;
  std::size_t heldout_size = 0;
};

MiaReport run_mia(const ModelParameters& model, const UnlearnTask& task, const MiaConfig& cfg);

}  // namespace culab
