#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "culab/data.h"
#include "culab/losses.h"
#include "culab/model.h"

namespace culab {

struct EngineConfig {
  std::size_t batch_size = 64;
  // Remaining-batch resamples per unlearning batch.
  std::size_t omega = 4;
  double learning_rate = 0.05;
  std::size_t max_epochs = 30;
  std::size_t max_unlearn_epochs = 50;
  // Epochs between termination checks.
  std::size_t eval_every = 1;
  std::uint64_t seed = 0;
  LossConfig loss;
  // NegGrad halts once CE on the unlearning eval set exceeds
  // neggrad_ce_cap_factor * log(C).
  double neggrad_ce_cap_factor = 10.0;
  // Treat remaining-sample embeddings as constants inside the contrastive
  // term, so only the anchors move under L_UL. Off by default.
  bool detach_remaining = false;

  // Throws ValidationError listing every violated field.
  void validate() const;
};

enum class TerminationReason { kConditionMet, kEpochCap, kError };

std::string to_string(TerminationReason r);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  double mean_ce = 0.0;
  // Mean contrastive term over steps that had at least one valid anchor.
  std::optional<double> mean_ul;
  double mean_total = 0.0;
  std::size_t skipped_ul_steps = 0;
  // Termination-check accuracies (present on evaluated epochs).
  std::optional<double> eval_unlearn_acc;
  std::optional<double> eval_test_acc;
  std::optional<double> eval_unlearn_ce;
  bool terminated = false;
};

struct RunRecord {
  std::string method;
  std::vector<EpochMetrics> epochs;
  double duration_seconds = 0.0;
  TerminationReason reason = TerminationReason::kEpochCap;
  std::string detail;
  std::size_t batches_processed = 0;
};

struct RunResult {
  ModelParameters params;
  RunRecord record;
};

// Cross-entropy training from a fresh initialization seeded by cfg.seed.
RunResult train(const ModelArchitecture& arch, const Dataset& train_data, const EngineConfig& cfg);

// Contrastive unlearning: for every unlearning batch, omega times: sample a
// remaining batch, take one gradient step on
//   lambda_ul * L_UL(anchors vs remaining) + lambda_ce * CE(remaining).
// Termination is checked after every eval_every passes over the unlearning set.
RunResult unlearn_contrastive(const ModelParameters& params, const UnlearnTask& task, const EngineConfig& cfg);

// Training from scratch on the remaining set.
RunResult retrain(const ModelArchitecture& arch, const UnlearnTask& task, const EngineConfig& cfg);

// CE descent on the remaining set starting from `params`.
RunResult unlearn_finetune(const ModelParameters& params, const UnlearnTask& task, const EngineConfig& cfg);

// CE ascent on the unlearning set starting from `params`.
RunResult unlearn_neggrad(const ModelParameters& params, const UnlearnTask& task, const EngineConfig& cfg);

// Class kind: Acc <= 1/C. Inclusive.
bool termination_class(double eval_accuracy, std::size_t num_classes);
// Sample kind: Acc(unlearn eval) <= Acc(test eval). Inclusive.
bool termination_sample(double unlearn_accuracy, double test_accuracy);

bool check_termination_class(const ModelParameters& model, const Dataset& eval_set, std::size_t num_classes);
bool check_termination_sample(const ModelParameters& model, const Dataset& unlearn_eval, const Dataset& test_eval);

// Applies the termination predicate matching the task kind.
bool check_termination(const ModelParameters& model, const UnlearnTask& task);

}  // namespace culab
