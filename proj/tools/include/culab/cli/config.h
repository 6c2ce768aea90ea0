#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "culab/data.h"
#include "culab/engine.h"
#include "culab/eval.h"
#include "culab/model.h"

namespace culab::cli {

struct CsvSource {
  std::filesystem::path train;
  std::filesystem::path test;
};

struct DatasetConfig {
  // Exactly one of these is set after parsing.
  std::optional<SyntheticSpec> synthetic;
  std::optional<CsvSource> csv;
  bool standardize = true;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  // input_dim and num_classes of 0 mean "infer from the data".
  ModelArchitecture arch;
  // learning_rate drives unlearn/finetune/neggrad; train and retrain use
  // train_learning_rate.
  EngineConfig engine;
  double train_learning_rate = 0.05;
  std::optional<TaskSpec> task;
  std::optional<std::filesystem::path> index_file;
  MiaConfig mia;
  std::filesystem::path output_dir = "culab-out";
  // Flags of the command that produced an echoed config.
  nlohmann::json invocation = nlohmann::json::object();
};

// Defaults for every field, synthetic data source.
ExperimentConfig default_config();

// Parses a config document over the defaults. Throws ValidationError listing
// every violated field. Relative paths resolve against `base_dir`.
ExperimentConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

// Fully materialized document; to_json(parse_config(to_json(c))) == to_json(c).
nlohmann::json to_json(const ExperimentConfig& config);

// Replaces every seed (data, engine, task, attack split) with `seed`.
void override_seeds(ExperimentConfig& config, std::uint64_t seed);

struct LoadedData {
  Dataset train;
  Dataset test;
};

// Generates or reads the data, widens num_classes to cover both splits and
// standardizes with train statistics when enabled. Fills arch.input_dim and
// arch.num_classes when they were left at 0; throws ValidationError if they
// were set and disagree with the data.
LoadedData load_data(ExperimentConfig& config);

// Builds the unlearning task; throws ValidationError when the config has no
// task section.
UnlearnTask build_task(const ExperimentConfig& config, const LoadedData& data);

// Engine config for train/retrain (train_learning_rate) or unlearning.
EngineConfig training_engine(const ExperimentConfig& config);
EngineConfig unlearning_engine(const ExperimentConfig& config, TaskKind kind);

}  // namespace culab::cli
