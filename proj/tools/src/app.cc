#include "culab/cli/app.h"

#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>

#include <CLI11.hpp>

#include "culab/cli/config.h"
#include "culab/error.h"
#include "culab/serialize.h"

namespace culab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

struct GenFlags {
  std::optional<std::size_t> classes, dim, per_class_train, per_class_test;
  std::optional<double> spread;
};

struct ModelFlags {
  std::string method;
  std::string from;
  std::string model;
  std::string reference;
  std::string before;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "Output directory (overrides output_dir)");
  cmd->add_option("--seed", f.seed, "Replace every seed in the config");
}

// Fills flags the user left empty from the invocation block of an echoed
// config produced by the same command.
void inherit(const ExperimentConfig& c, const std::string& command, const char* key, std::string& value) {
  if (!value.empty()) return;
  const json& inv = c.invocation;
  if (!inv.is_object() || inv.value("command", "") != command) return;
  if (inv.contains(key) && inv.at(key).is_string()) value = inv.at(key).get<std::string>();
}

std::string absolute_string(const std::string& p) { return p.empty() ? p : fs::absolute(p).lexically_normal().string(); }

ExperimentConfig resolve_config(const CommonFlags& f) {
  ExperimentConfig c = f.config.empty() ? default_config() : load_config(f.config);
  if (f.seed) override_seeds(c, *f.seed);
  if (!f.out.empty()) c.output_dir = fs::absolute(f.out).lexically_normal();
  return c;
}

void prepare_output(const ExperimentConfig& c) {
  std::error_code ec;
  fs::create_directories(c.output_dir, ec);
  if (ec) throw Error("cannot create output directory " + c.output_dir.string() + ": " + ec.message());
}

void write_echo(ExperimentConfig& c, json invocation) {
  c.invocation = std::move(invocation);
  write_json_file(c.output_dir / "config.echo.json", to_json(c));
}

ModelParameters load_model(const std::string& path, const char* flag) {
  if (path.empty()) throw ValidationError(std::string("missing required flag ") + flag);
  if (!fs::exists(path)) throw ValidationError(std::string(flag) + ": file not found: " + path);
  return load_checkpoint(path);
}

std::string describe(const ModelArchitecture& a) {
  std::string s = std::to_string(a.input_dim);
  for (auto h : a.hidden) s += "->" + std::to_string(h);
  s += "->" + std::to_string(a.embedding_dim) + " (" + to_string(a.activation) + "), " +
       std::to_string(a.num_classes) + " classes";
  return s;
}

void require_same_arch(const ModelParameters& model, const ModelArchitecture& expected, const char* flag) {
  if (model.arch != expected) {
    throw ValidationError(std::string("architecture mismatch: ") + flag + " is " + describe(model.arch) +
                          ", config is " + describe(expected));
  }
}

int cmd_gen_data(const CommonFlags& f, const GenFlags& g, std::ostream& out) {
  ExperimentConfig c = resolve_config(f);
  if (!c.dataset.synthetic) throw ValidationError("invalid config:\n  dataset.synthetic: gen-data needs a synthetic source");
  SyntheticSpec& s = *c.dataset.synthetic;
  if (g.classes) s.num_classes = *g.classes;
  if (g.dim) s.dim = *g.dim;
  if (g.per_class_train) s.per_class_train = *g.per_class_train;
  if (g.per_class_test) s.per_class_test = *g.per_class_test;
  if (g.spread) s.spread = *g.spread;
  // Re-validate after flag overrides.
  c = parse_config(to_json(c));
  prepare_output(c);
  const SyntheticSpec& spec = *c.dataset.synthetic;
  auto [train, test] = generate_synthetic(spec);
  write_csv(train, c.output_dir / "train.csv");
  write_csv(test, c.output_dir / "test.csv");
  json manifest = {
      {"generator", "synthetic"},
      {"synthetic", to_json(c)["dataset"]["synthetic"]},
      {"files", {{"train", "train.csv"}, {"test", "test.csv"}}},
      {"train_rows", train.size()},
      {"test_rows", test.size()},
  };
  write_json_file(c.output_dir / "manifest.json", manifest);
  write_echo(c, {{"command", "gen-data"}});
  out << "wrote " << train.size() << " train and " << test.size() << " test rows to " << c.output_dir.string() << '\n';
  return kExitOk;
}

int cmd_train(const CommonFlags& f, std::ostream& out) {
  ExperimentConfig c = resolve_config(f);
  LoadedData data = load_data(c);
  prepare_output(c);
  write_echo(c, {{"command", "train"}});
  const RunResult r = train(c.arch, data.train, training_engine(c));
  save_checkpoint(r.params, c.output_dir / "model.ckpt");
  write_json_file(c.output_dir / "run.json", run_record_json(r.record, to_json(c)));
  out << "train: " << r.record.epochs.size() << " epochs, " << r.record.duration_seconds << " s, train acc "
      << accuracy(r.params, data.train) << ", test acc " << accuracy(r.params, data.test) << '\n';
  return kExitOk;
}

int cmd_unlearn(const CommonFlags& f, ModelFlags m, std::ostream& out, std::ostream& err) {
  ExperimentConfig c = resolve_config(f);
  inherit(c, "unlearn", "method", m.method);
  inherit(c, "unlearn", "from", m.from);
  if (m.method.empty()) throw ValidationError("missing required flag --method");
  if (m.method != "contrastive" && m.method != "retrain" && m.method != "finetune" && m.method != "neggrad") {
    throw ValidationError("--method: unknown method \"" + m.method + "\" (contrastive|retrain|finetune|neggrad)");
  }
  LoadedData data = load_data(c);
  const UnlearnTask task = build_task(c, data);
  prepare_output(c);
  m.from = absolute_string(m.from);
  json invocation = {{"command", "unlearn"}, {"method", m.method}};
  if (!m.from.empty()) invocation["from"] = m.from;
  write_echo(c, invocation);

  RunResult r;
  if (m.method == "retrain") {
    if (!m.from.empty()) err << "warning: retrain ignores --from and trains from a fresh initialization\n";
    r = retrain(c.arch, task, training_engine(c));
  } else {
    const ModelParameters initial = load_model(m.from, "--from");
    require_same_arch(initial, c.arch, "--from");
    const EngineConfig e = unlearning_engine(c, task.kind);
    if (m.method == "contrastive") {
      r = unlearn_contrastive(initial, task, e);
    } else if (m.method == "finetune") {
      r = unlearn_finetune(initial, task, e);
    } else {
      r = unlearn_neggrad(initial, task, e);
    }
  }
  save_checkpoint(r.params, c.output_dir / "model.ckpt");
  write_json_file(c.output_dir / "run.json", run_record_json(r.record, to_json(c)));
  out << m.method << ": " << to_string(r.record.reason) << " after " << r.record.epochs.size() << " epochs, "
      << r.record.duration_seconds << " s\n";
  if (r.record.reason == TerminationReason::kError) err << "warning: " << r.record.detail << '\n';
  return kExitOk;
}

int cmd_eval(const CommonFlags& f, ModelFlags m, std::ostream& out) {
  ExperimentConfig c = resolve_config(f);
  inherit(c, "eval", "model", m.model);
  inherit(c, "eval", "reference", m.reference);
  inherit(c, "eval", "before", m.before);
  LoadedData data = load_data(c);
  const UnlearnTask task = build_task(c, data);
  const ModelParameters model = load_model(m.model, "--model");
  std::optional<ModelParameters> reference, before;
  if (!m.reference.empty()) reference = load_model(m.reference, "--reference");
  if (!m.before.empty()) before = load_model(m.before, "--before");
  prepare_output(c);
  json invocation = {{"command", "eval"}, {"model", absolute_string(m.model)}};
  if (reference) invocation["reference"] = absolute_string(m.reference);
  if (before) invocation["before"] = absolute_string(m.before);
  write_echo(c, invocation);

  const EvaluationReport report = evaluate(model, task, reference ? &*reference : nullptr);
  const GeometryDiagnostics after = embedding_geometry(model, task);
  std::optional<GeometryDiagnostics> prior;
  if (before) prior = embedding_geometry(*before, task);

  json geometry = {{"after", geometry_summary_json(after)}};
  if (prior) geometry["before"] = geometry_summary_json(*prior);
  json doc = evaluation_report_json(report);
  doc["geometry"] = geometry;
  write_json_file(c.output_dir / "eval.json", doc);
  std::ofstream csv(c.output_dir / "geometry.csv", std::ios::trunc);
  if (!csv) throw Error("cannot open " + (c.output_dir / "geometry.csv").string());
  write_geometry_csv(csv, after, prior ? &*prior : nullptr);

  for (const auto& row : report.rows) {
    out << row.split << ": " << row.accuracy;
    if (row.reference) out << " (reference " << *row.reference << ", delta " << *row.delta << ")";
    out << '\n';
  }
  return kExitOk;
}

int cmd_mia(const CommonFlags& f, ModelFlags m, std::ostream& out) {
  ExperimentConfig c = resolve_config(f);
  inherit(c, "mia", "model", m.model);
  LoadedData data = load_data(c);
  const UnlearnTask task = build_task(c, data);
  const ModelParameters model = load_model(m.model, "--model");
  prepare_output(c);
  write_echo(c, {{"command", "mia"}, {"model", absolute_string(m.model)}});
  const MiaReport r = run_mia(model, task, c.mia);
  write_json_file(c.output_dir / "mia.json", mia_report_json(r));
  out << "member rate: unlearning set " << r.unlearn_member_rate << ", held-out members " << r.heldout_member_rate
      << " (attack validation accuracy " << r.attack_validation_accuracy << ")\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Contrastive machine-unlearning laboratory", "culab"};
  app.require_subcommand(1);

  CommonFlags common;
  GenFlags gen;
  ModelFlags model;

  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic Gaussian dataset as CSV");
  add_common(gen_cmd, common);
  gen_cmd->add_option("--classes", gen.classes, "Number of classes");
  gen_cmd->add_option("--dim", gen.dim, "Feature dimension");
  gen_cmd->add_option("--per-class-train", gen.per_class_train, "Training rows per class");
  gen_cmd->add_option("--per-class-test", gen.per_class_test, "Test rows per class");
  gen_cmd->add_option("--spread", gen.spread, "Class separation scale");

  auto* train_cmd = app.add_subcommand("train", "Train the original model");
  add_common(train_cmd, common);

  auto* unlearn_cmd = app.add_subcommand("unlearn", "Unlearn the task's samples from a trained model");
  add_common(unlearn_cmd, common);
  unlearn_cmd->add_option("--method", model.method, "contrastive | retrain | finetune | neggrad");
  unlearn_cmd->add_option("--from", model.from, "Checkpoint of the original model");

  auto* eval_cmd = app.add_subcommand("eval", "Accuracy report and embedding geometry");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--model", model.model, "Checkpoint to evaluate");
  eval_cmd->add_option("--reference", model.reference, "Reference checkpoint (usually the retrained model)");
  eval_cmd->add_option("--before", model.before, "Checkpoint before unlearning, for geometry deltas");

  auto* mia_cmd = app.add_subcommand("mia", "Membership-inference verification");
  add_common(mia_cmd, common);
  mia_cmd->add_option("--model", model.model, "Checkpoint to attack");

  std::vector<const char*> args;
  args.reserve(argv.size());
  for (const auto& a : argv) args.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(args.size()), args.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(common, gen, out);
    if (*train_cmd) return cmd_train(common, out);
    if (*unlearn_cmd) return cmd_unlearn(common, model, out, err);
    if (*eval_cmd) return cmd_eval(common, model, out);
    if (*mia_cmd) return cmd_mia(common, model, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitValidation;
}

}  // namespace culab::cli
