#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "culab/rng.h"
#include "culab/tensor.h"

namespace culab {

// Per-column affine transform fitted on a training split.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;
  bool operator==(const Standardizer&) const = default;
};

// Labeled feature matrix. A Dataset with zero rows is allowed only as a view
// (for example the unlearning test split of a sample task); in that case
// `features` is an empty tensor.
struct Dataset {
  Tensor features;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::optional<Standardizer> transform;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t dim() const { return empty() ? 0 : features.cols(); }

  Dataset subset(std::span<const std::size_t> indices) const;
  // Throws ValidationError if a label is out of range or features are non-finite.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

struct SyntheticSpec {
  std::size_t num_classes = 4;
  std::size_t dim = 8;
  std::size_t per_class_train = 500;
  std::size_t per_class_test = 100;
  double spread = 1.0;
  std::uint64_t seed = 0;
};

// Unit-variance isotropic Gaussian blobs, one per class. Class means are at
// pairwise distance >= 4 * spread, so spread controls class separation.
// Returns {train, test}.
std::pair<Dataset, Dataset> generate_synthetic(const SyntheticSpec& spec);

// Class means used by generate_synthetic, exposed for tests.
std::vector<std::vector<double>> synthetic_class_means(const SyntheticSpec& spec);

// CSV with header f0,...,f{k-1},label.
Dataset load_csv(const std::filesystem::path& path);
void write_csv(const Dataset& data, const std::filesystem::path& path);

Standardizer fit_standardizer(const Dataset& train);
Dataset standardize(const Dataset& data, const Standardizer& transform);

enum class TaskKind { kClass, kSample };

struct TaskSpec {
  TaskKind kind = TaskKind::kClass;
  int class_id = 0;
  // Sample kind: either an explicit index list or a count drawn from `seed`.
  std::vector<std::size_t> indices;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  // Upper bound on each sample-kind evaluation subset.
  std::size_t eval_cap = 500;
};

// Partition of train/test into unlearning and remaining subsets plus the
// small evaluation sets used by the termination checks.
//   class kind:  eval_unlearn = unlearn_test, eval_test empty
//   sample kind: eval_unlearn subset of unlearn_train, eval_test subset of test
struct UnlearnTask {
  TaskKind kind = TaskKind::kClass;
  int class_id = -1;

  Dataset train;
  Dataset test;

  std::vector<std::size_t> unlearn_train_idx;
  std::vector<std::size_t> remain_train_idx;
  std::vector<std::size_t> unlearn_test_idx;
  std::vector<std::size_t> remain_test_idx;
  std::vector<std::size_t> eval_unlearn_idx;  // into train (sample) or test (class)
  std::vector<std::size_t> eval_test_idx;     // into test

  Dataset unlearn_train;
  Dataset remain_train;
  Dataset unlearn_test;
  Dataset remain_test;
  Dataset eval_unlearn;
  Dataset eval_test;

  std::size_t num_classes() const { return train.num_classes; }
  // Throws IntegrityError if the partition invariants are violated.
  void check_invariants() const;
};

UnlearnTask make_task(const Dataset& train, const Dataset& test, const TaskSpec& spec);

enum class BatchSource { kUnlearn, kRemain };

struct Batch {
  Tensor features;
  std::vector<int> labels;
  BatchSource source = BatchSource::kRemain;
  std::vector<std::size_t> indices;  // rows of the view the batch was drawn from

  std::size_t size() const { return labels.size(); }
};

// One epoch over `view`: a seeded permutation chunked into batches of
// `batch_size`; the final short chunk is kept unless drop_last.
std::vector<Batch> batches(const Dataset& view, std::size_t batch_size, std::uint64_t seed, bool drop_last = false,
                           BatchSource source = BatchSource::kRemain);

// Uniform draw of `batch_size` remaining samples without replacement.
Batch sample_remaining(const UnlearnTask& task, std::size_t batch_size, Rng& rng);

}  // namespace culab
