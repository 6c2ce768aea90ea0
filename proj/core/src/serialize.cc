#include "culab/serialize.h"

#include <charconv>
#include <fstream>
#include <ostream>

#include "culab/error.h"

namespace culab {

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

void write_cell(std::ostream& out, const std::optional<double>& v) {
  if (!v) return;
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), *v);
  out.write(buf, p - buf);
}

}  // namespace

nlohmann::json run_record_json(const RunRecord& record, const nlohmann::json& config) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : record.epochs) {
    epochs.push_back({
        {"epoch", e.epoch},
        {"steps", e.steps},
        {"mean_ce", e.mean_ce},
        {"mean_ul", optional_json(e.mean_ul)},
        {"mean_total", e.mean_total},
        {"skipped_ul_steps", e.skipped_ul_steps},
        {"eval_unlearn_acc", optional_json(e.eval_unlearn_acc)},
        {"eval_test_acc", optional_json(e.eval_test_acc)},
        {"eval_unlearn_ce", optional_json(e.eval_unlearn_ce)},
        {"terminated", e.terminated},
    });
  }
  return {
      {"method", record.method},
      {"config", config},
      {"epochs", epochs},
      {"duration_seconds", record.duration_seconds},
      {"termination_reason", to_string(record.reason)},
      {"detail", record.detail},
      {"batches_processed", record.batches_processed},
  };
}

nlohmann::json evaluation_report_json(const EvaluationReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    nlohmann::json row = {{"split", r.split}, {"accuracy", r.accuracy}};
    if (r.reference) row["reference"] = *r.reference;
    if (r.delta) row["delta"] = *r.delta;
    rows.push_back(std::move(row));
  }
  return {{"task_kind", report.kind == TaskKind::kClass ? "class" : "sample"}, {"rows", rows}};
}

nlohmann::json mia_report_json(const MiaReport& r) {
  return {
      {"unlearn_member_rate", r.unlearn_member_rate},
      {"heldout_member_rate", r.heldout_member_rate},
      {"attack_validation_accuracy", r.attack_validation_accuracy},
      {"members_size", r.members_size},
      {"nonmembers_size", r.nonmembers_size},
      {"unlearn_size", r.unlearn_size},
      {"heldout_size", r.heldout_size},
  };
}

nlohmann::json geometry_summary_json(const GeometryDiagnostics& g) {
  nlohmann::json centroids = nlohmann::json::array();
  for (std::size_t k = 0; k < g.centroids.size(); ++k) {
    const auto& c = g.centroids[k];
    centroids.push_back({{"class", k}, {"count", c.count}, {"absent", c.count == 0}, {"degenerate", c.degenerate}});
  }
  return {
      {"mean_own_similarity", optional_json(g.mean_own_similarity)},
      {"mean_max_other_similarity", optional_json(g.mean_max_other_similarity)},
      {"centroids", centroids},
  };
}

void write_geometry_csv(std::ostream& out, const GeometryDiagnostics& after, const GeometryDiagnostics* before) {
  if (before && before->samples.size() != after.samples.size()) {
    throw ContractError("geometry before/after sample counts differ");
  }
  out << "train_index,label,own_similarity,max_other_similarity";
  if (before) out << ",before_own_similarity,before_max_other_similarity";
  out << '\n';
  for (std::size_t i = 0; i < after.samples.size(); ++i) {
    const auto& s = after.samples[i];
    out << s.train_index << ',' << s.label << ',';
    write_cell(out, s.own_similarity);
    out << ',';
    write_cell(out, s.max_other_similarity);
    if (before) {
      out << ',';
      write_cell(out, before->samples[i].own_similarity);
      out << ',';
      write_cell(out, before->samples[i].max_other_similarity);
    }
    out << '\n';
  }
}

void write_json_file(const std::filesystem::path& path, const nlohmann::json& value) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path.string());
  out << value.dump(2) << '\n';
  if (!out) throw Error("failed writing " + path.string());
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open JSON file: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": invalid JSON: " + e.what());
  }
}

}  // namespace culab
