#pragma once

#include <filesystem>
#include <iosfwd>

#include <nlohmann/json.hpp>

#include "culab/engine.h"
#include "culab/eval.h"

namespace culab {

// Run record: {method, config, epochs: [...], duration_seconds,
// termination_reason, detail, batches_processed}. `config` is echoed verbatim.
nlohmann::json run_record_json(const RunRecord& record, const nlohmann::json& config);

nlohmann::json evaluation_report_json(const EvaluationReport& report);
nlohmann::json mia_report_json(const MiaReport& report);
nlohmann::json geometry_summary_json(const GeometryDiagnostics& geometry);

// One row per unlearning sample:
//   train_index,label,own_similarity,max_other_similarity[,before_own,before_max_other]
// Absent values are written as empty cells.
void write_geometry_csv(std::ostream& out, const GeometryDiagnostics& after, const GeometryDiagnostics* before);

// Pretty-printed JSON file with a trailing newline.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& value);
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace culab
