#include "culab/cli/config.h"

#include <algorithm>
#include <concepts>
#include <functional>
#include <fstream>
#include <set>
#include <vector>

#include "culab/error.h"
#include "culab/serialize.h"

namespace culab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Reads typed fields out of one JSON object, collecting every problem instead
// of stopping at the first.
class Section {
 public:
  Section(const json& doc, std::string path, std::vector<std::string>& problems)
      : path_(std::move(path)), problems_(problems) {
    if (doc.is_object()) {
      obj_ = &doc;
    } else if (!doc.is_null()) {
      problems_.push_back(path_ + ": must be an object");
    }
  }

  bool has(const char* key) {
    seen_.insert(key);
    return obj_ && obj_->contains(key);
  }

  const json* raw(const char* key) {
    if (!has(key)) return nullptr;
    return &obj_->at(key);
  }

  template <std::unsigned_integral T>
  void get(const char* key, T& out) {
    if (const json* v = raw(key)) {
      if (v->is_number_unsigned()) {
        out = v->get<T>();
      } else {
        fail(key, "must be a non-negative integer");
      }
    }
  }

  void get(const char* key, int& out) {
    if (const json* v = raw(key)) {
      if (v->is_number_integer()) {
        out = v->get<int>();
      } else {
        fail(key, "must be an integer");
      }
    }
  }

  void get(const char* key, double& out) {
    if (const json* v = raw(key)) {
      if (v->is_number()) {
        out = v->get<double>();
      } else {
        fail(key, "must be a number");
      }
    }
  }

  void get(const char* key, bool& out) {
    if (const json* v = raw(key)) {
      if (v->is_boolean()) {
        out = v->get<bool>();
      } else {
        fail(key, "must be a boolean");
      }
    }
  }

  void get(const char* key, std::string& out) {
    if (const json* v = raw(key)) {
      if (v->is_string()) {
        out = v->get<std::string>();
      } else {
        fail(key, "must be a string");
      }
    }
  }

  void get(const char* key, std::vector<std::size_t>& out) {
    if (const json* v = raw(key)) {
      if (!v->is_array() || !std::all_of(v->begin(), v->end(), [](const json& e) { return e.is_number_unsigned(); })) {
        fail(key, "must be an array of non-negative integers");
        return;
      }
      out = v->get<std::vector<std::size_t>>();
    }
  }

  void fail(const std::string& key, const std::string& message) { problems_.push_back(path_ + "." + key + ": " + message); }

  // Reports keys that no get()/has() call asked for.
  void reject_unknown() {
    if (!obj_) return;
    for (const auto& [key, _] : obj_->items()) {
      if (!seen_.count(key)) problems_.push_back(path_ + "." + key + ": unknown field");
    }
  }

  const std::string& path() const { return path_; }

 private:
  const json* obj_ = nullptr;
  std::string path_;
  std::vector<std::string>& problems_;
  std::set<std::string> seen_;
};

const json& child(const json& doc, const char* key) {
  static const json null_value;
  return doc.is_object() && doc.contains(key) ? doc.at(key) : null_value;
}

fs::path resolve(const std::string& p, const fs::path& base) {
  fs::path path(p);
  if (path.is_relative() && !base.empty()) path = base / path;
  return fs::absolute(path).lexically_normal();
}

void collect(std::vector<std::string>& problems, const std::function<void()>& check) {
  try {
    check();
  } catch (const ValidationError& e) {
    std::string msg = e.what();
    // Nested validators report "header:\n  item\n  item"; keep the items.
    const auto nl = msg.find('\n');
    if (nl == std::string::npos) {
      problems.push_back(msg);
      return;
    }
    std::size_t pos = nl + 1;
    while (pos < msg.size()) {
      auto end = msg.find('\n', pos);
      if (end == std::string::npos) end = msg.size();
      std::string line = msg.substr(pos, end - pos);
      line.erase(0, line.find_first_not_of(' '));
      if (!line.empty()) problems.push_back(line);
      pos = end + 1;
    }
  }
}

std::string kind_name(TaskKind k) { return k == TaskKind::kClass ? "class" : "sample"; }
std::string variant_name(LossVariant v) { return v == LossVariant::kClass ? "class" : "sample"; }

std::vector<std::size_t> read_index_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("task.index_file: cannot open " + path.string());
  std::vector<std::size_t> out;
  long long v = 0;
  while (in >> v) {
    if (v < 0) throw ValidationError("task.index_file: negative index in " + path.string());
    out.push_back(static_cast<std::size_t>(v));
  }
  if (!in.eof()) throw ValidationError("task.index_file: non-integer entry in " + path.string());
  return out;
}

}  // namespace

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.dataset.synthetic = SyntheticSpec{};
  c.arch.hidden = {32, 32};
  c.arch.embedding_dim = 16;
  return c;
}

ExperimentConfig parse_config(const json& doc, const fs::path& base_dir) {
  std::vector<std::string> problems;
  ExperimentConfig c = default_config();
  if (!doc.is_object()) throw ValidationError("invalid config:\n  config: must be a JSON object");

  Section top(doc, "config", problems);

  // dataset
  {
    const json& d = child(doc, "dataset");
    Section ds(d, "dataset", problems);
    const bool has_synth = ds.has("synthetic");
    const bool has_csv = ds.has("csv");
    ds.get("standardize", c.dataset.standardize);
    if (has_synth && has_csv) {
      problems.push_back("dataset: exactly one of synthetic or csv must be given, not both");
    } else if (has_csv) {
      c.dataset.synthetic.reset();
      Section cs(d.at("csv"), "dataset.csv", problems);
      std::string train, test;
      if (!cs.has("train")) problems.push_back("dataset.csv.train: required");
      if (!cs.has("test")) problems.push_back("dataset.csv.test: required");
      cs.get("train", train);
      cs.get("test", test);
      cs.reject_unknown();
      CsvSource src;
      if (!train.empty()) {
        src.train = resolve(train, base_dir);
        if (!fs::exists(src.train)) problems.push_back("dataset.csv.train: file not found: " + src.train.string());
      }
      if (!test.empty()) {
        src.test = resolve(test, base_dir);
        if (!fs::exists(src.test)) problems.push_back("dataset.csv.test: file not found: " + src.test.string());
      }
      c.dataset.csv = src;
    } else {
      SyntheticSpec& s = *c.dataset.synthetic;
      Section ss(child(d, "synthetic"), "dataset.synthetic", problems);
      ss.get("num_classes", s.num_classes);
      ss.get("dim", s.dim);
      ss.get("per_class_train", s.per_class_train);
      ss.get("per_class_test", s.per_class_test);
      ss.get("spread", s.spread);
      ss.get("seed", s.seed);
      ss.reject_unknown();
      if (s.num_classes < 2) problems.push_back("dataset.synthetic.num_classes: must be >= 2");
      if (s.dim < 2) problems.push_back("dataset.synthetic.dim: must be >= 2");
      if (s.per_class_train < 1) problems.push_back("dataset.synthetic.per_class_train: must be >= 1");
      if (s.per_class_test < 1) problems.push_back("dataset.synthetic.per_class_test: must be >= 1");
      if (!(s.spread > 0.0)) problems.push_back("dataset.synthetic.spread: must be > 0");
    }
    ds.reject_unknown();
  }

  // architecture
  {
    Section as(child(doc, "architecture"), "architecture", problems);
    as.get("input_dim", c.arch.input_dim);
    as.get("num_classes", c.arch.num_classes);
    as.get("hidden", c.arch.hidden);
    as.get("embedding_dim", c.arch.embedding_dim);
    std::string act = to_string(c.arch.activation);
    as.get("activation", act);
    try {
      c.arch.activation = activation_from_string(act);
    } catch (const Error&) {
      problems.push_back("architecture.activation: must be \"relu\" or \"tanh\"");
    }
    as.reject_unknown();
    if (c.arch.hidden.empty()) problems.push_back("architecture.hidden: needs at least one layer");
    if (std::find(c.arch.hidden.begin(), c.arch.hidden.end(), 0) != c.arch.hidden.end()) {
      problems.push_back("architecture.hidden: widths must be >= 1");
    }
    if (c.arch.embedding_dim < 1) problems.push_back("architecture.embedding_dim: must be >= 1");
  }

  // engine
  {
    Section es(child(doc, "engine"), "engine", problems);
    es.get("batch_size", c.engine.batch_size);
    es.get("omega", c.engine.omega);
    es.get("learning_rate", c.engine.learning_rate);
    es.get("train_learning_rate", c.train_learning_rate);
    es.get("max_epochs", c.engine.max_epochs);
    es.get("max_unlearn_epochs", c.engine.max_unlearn_epochs);
    es.get("eval_every", c.engine.eval_every);
    es.get("seed", c.engine.seed);
    es.get("neggrad_ce_cap_factor", c.engine.neggrad_ce_cap_factor);
    es.get("detach_remaining", c.engine.detach_remaining);
    es.reject_unknown();
    if (!(c.train_learning_rate >= 0.0)) problems.push_back("engine.train_learning_rate must be >= 0");
  }

  // loss
  bool variant_given = false;
  {
    Section ls(child(doc, "loss"), "loss", problems);
    ls.get("temperature", c.engine.loss.temperature);
    ls.get("lambda_ul", c.engine.loss.lambda_ul);
    ls.get("lambda_ce", c.engine.loss.lambda_ce);
    std::string variant;
    ls.get("variant", variant);
    if (!variant.empty()) {
      variant_given = true;
      if (variant == "sample") {
        c.engine.loss.variant = LossVariant::kSample;
      } else if (variant == "class") {
        c.engine.loss.variant = LossVariant::kClass;
      } else {
        problems.push_back("loss.variant: must be \"sample\" or \"class\"");
        variant_given = false;
      }
    }
    ls.reject_unknown();
  }
  collect(problems, [&] { c.engine.validate(); });

  // task
  if (top.has("task")) {
    const json& t = doc.at("task");
    Section ts(t, "task", problems);
    TaskSpec spec;
    std::string kind;
    if (!ts.has("kind")) problems.push_back("task.kind: required (\"class\" or \"sample\")");
    ts.get("kind", kind);
    ts.get("seed", spec.seed);
    ts.get("eval_cap", spec.eval_cap);
    if (kind == "class") {
      spec.kind = TaskKind::kClass;
      if (!ts.has("class_id")) problems.push_back("task.class_id: required for a class task");
      ts.get("class_id", spec.class_id);
      if (spec.class_id < 0) problems.push_back("task.class_id: must be >= 0");
      for (const char* k : {"count", "indices", "index_file"}) {
        if (ts.has(k)) problems.push_back(std::string("task.") + k + ": not valid for a class task");
      }
    } else if (kind == "sample") {
      spec.kind = TaskKind::kSample;
      if (ts.has("class_id")) problems.push_back("task.class_id: not valid for a sample task");
      const int sources = int(ts.has("count")) + int(ts.has("indices")) + int(ts.has("index_file"));
      if (sources != 1) problems.push_back("task: a sample task needs exactly one of count, indices or index_file");
      ts.get("count", spec.count);
      ts.get("indices", spec.indices);
      std::string index_file;
      ts.get("index_file", index_file);
      if (!index_file.empty()) c.index_file = resolve(index_file, base_dir);
      if (ts.has("count") && spec.count == 0) problems.push_back("task.count: must be >= 1");
    } else if (!kind.empty()) {
      problems.push_back("task.kind: must be \"class\" or \"sample\"");
    }
    if (spec.eval_cap < 1) problems.push_back("task.eval_cap: must be >= 1");
    ts.reject_unknown();
    c.task = spec;
    const LossVariant expected = spec.kind == TaskKind::kClass ? LossVariant::kClass : LossVariant::kSample;
    if (variant_given && c.engine.loss.variant != expected && !kind.empty()) {
      problems.push_back("loss.variant: \"" + variant_name(c.engine.loss.variant) + "\" does not match task kind \"" +
                         kind + "\"");
    }
    c.engine.loss.variant = expected;
  }

  // mia
  {
    Section ms(child(doc, "mia"), "mia", problems);
    ms.get("split_seed", c.mia.split_seed);
    ms.get("max_per_side", c.mia.max_per_side);
    ms.get("validation_fraction", c.mia.validation_fraction);
    ms.get("ridge", c.mia.ridge);
    ms.get("max_iterations", c.mia.max_iterations);
    ms.get("label_probability", c.mia.label_probability);
    ms.reject_unknown();
    if (c.mia.max_per_side < 1) problems.push_back("mia.max_per_side: must be >= 1");
    if (!(c.mia.validation_fraction > 0.0 && c.mia.validation_fraction < 1.0)) {
      problems.push_back("mia.validation_fraction: must be in (0, 1)");
    }
    if (!(c.mia.ridge >= 0.0)) problems.push_back("mia.ridge: must be >= 0");
    if (c.mia.max_iterations < 1) problems.push_back("mia.max_iterations: must be >= 1");
  }

  std::string out_dir;
  top.get("output_dir", out_dir);
  if (!out_dir.empty()) c.output_dir = resolve(out_dir, base_dir);
  if (const json* inv = top.raw("invocation")) {
    if (inv->is_object()) {
      c.invocation = *inv;
    } else {
      problems.push_back("config.invocation: must be an object");
    }
  }
  for (const char* k : {"dataset", "architecture", "engine", "loss", "mia"}) top.has(k);
  top.reject_unknown();

  if (!problems.empty()) {
    std::string msg = "invalid config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  const fs::path abs = fs::absolute(path);
  return parse_config(read_json_file(abs), abs.parent_path());
}

json to_json(const ExperimentConfig& c) {
  json dataset = {{"standardize", c.dataset.standardize}};
  if (c.dataset.csv) {
    dataset["csv"] = {{"train", c.dataset.csv->train.string()}, {"test", c.dataset.csv->test.string()}};
  } else if (c.dataset.synthetic) {
    const SyntheticSpec& s = *c.dataset.synthetic;
    dataset["synthetic"] = {{"num_classes", s.num_classes},         {"dim", s.dim},
                            {"per_class_train", s.per_class_train}, {"per_class_test", s.per_class_test},
                            {"spread", s.spread},                   {"seed", s.seed}};
  }
  json doc = {
      {"dataset", dataset},
      {"architecture",
       {{"input_dim", c.arch.input_dim},
        {"num_classes", c.arch.num_classes},
        {"hidden", c.arch.hidden},
        {"embedding_dim", c.arch.embedding_dim},
        {"activation", to_string(c.arch.activation)}}},
      {"engine",
       {{"batch_size", c.engine.batch_size},
        {"omega", c.engine.omega},
        {"learning_rate", c.engine.learning_rate},
        {"train_learning_rate", c.train_learning_rate},
        {"max_epochs", c.engine.max_epochs},
        {"max_unlearn_epochs", c.engine.max_unlearn_epochs},
        {"eval_every", c.engine.eval_every},
        {"seed", c.engine.seed},
        {"neggrad_ce_cap_factor", c.engine.neggrad_ce_cap_factor},
        {"detach_remaining", c.engine.detach_remaining}}},
      {"loss",
       {{"temperature", c.engine.loss.temperature},
        {"lambda_ul", c.engine.loss.lambda_ul},
        {"lambda_ce", c.engine.loss.lambda_ce},
        {"variant", variant_name(c.engine.loss.variant)}}},
      {"mia",
       {{"split_seed", c.mia.split_seed},
        {"max_per_side", c.mia.max_per_side},
        {"validation_fraction", c.mia.validation_fraction},
        {"ridge", c.mia.ridge},
        {"max_iterations", c.mia.max_iterations},
        {"label_probability", c.mia.label_probability}}},
      {"output_dir", c.output_dir.string()},
  };
  if (c.task) {
    const TaskSpec& t = *c.task;
    json task = {{"kind", kind_name(t.kind)}, {"seed", t.seed}, {"eval_cap", t.eval_cap}};
    if (t.kind == TaskKind::kClass) {
      task["class_id"] = t.class_id;
    } else if (c.index_file) {
      task["index_file"] = c.index_file->string();
    } else if (!t.indices.empty()) {
      task["indices"] = t.indices;
    } else {
      task["count"] = t.count;
    }
    doc["task"] = task;
  }
  if (!c.invocation.empty()) doc["invocation"] = c.invocation;
  return doc;
}

void override_seeds(ExperimentConfig& c, std::uint64_t seed) {
  if (c.dataset.synthetic) c.dataset.synthetic->seed = seed;
  c.engine.seed = seed;
  if (c.task) c.task->seed = seed;
  c.mia.split_seed = seed;
}

LoadedData load_data(ExperimentConfig& c) {
  LoadedData d;
  if (c.dataset.csv) {
    d.train = load_csv(c.dataset.csv->train);
    d.test = load_csv(c.dataset.csv->test);
    if (d.train.dim() != d.test.dim()) {
      throw ValidationError("dataset.csv: train has " + std::to_string(d.train.dim()) + " features, test has " +
                            std::to_string(d.test.dim()));
    }
  } else {
    auto [train, test] = generate_synthetic(*c.dataset.synthetic);
    d.train = std::move(train);
    d.test = std::move(test);
  }
  const std::size_t classes = std::max(d.train.num_classes, d.test.num_classes);
  d.train.num_classes = classes;
  d.test.num_classes = classes;
  if (c.dataset.standardize) {
    const Standardizer s = fit_standardizer(d.train);
    d.train = standardize(d.train, s);
    d.test = standardize(d.test, s);
  }

  std::vector<std::string> problems;
  if (c.arch.input_dim == 0) {
    c.arch.input_dim = d.train.dim();
  } else if (c.arch.input_dim != d.train.dim()) {
    problems.push_back("architecture.input_dim: " + std::to_string(c.arch.input_dim) + " but the data has " +
                       std::to_string(d.train.dim()) + " features");
  }
  if (c.arch.num_classes == 0) {
    c.arch.num_classes = classes;
  } else if (c.arch.num_classes != classes) {
    problems.push_back("architecture.num_classes: " + std::to_string(c.arch.num_classes) + " but the data has " +
                       std::to_string(classes) + " classes");
  }
  if (!problems.empty()) {
    std::string msg = "invalid config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }
  return d;
}

UnlearnTask build_task(const ExperimentConfig& c, const LoadedData& data) {
  if (!c.task) throw ValidationError("invalid config:\n  task: required for this command");
  TaskSpec spec = *c.task;
  if (c.index_file) spec.indices = read_index_file(*c.index_file);
  if (spec.kind == TaskKind::kClass && spec.class_id >= static_cast<int>(data.train.num_classes)) {
    throw ValidationError("invalid config:\n  task.class_id: " + std::to_string(spec.class_id) +
                          " is out of range for " + std::to_string(data.train.num_classes) + " classes");
  }
  return make_task(data.train, data.test, spec);
}

EngineConfig training_engine(const ExperimentConfig& c) {
  EngineConfig e = c.engine;
  e.learning_rate = c.train_learning_rate;
  return e;
}

EngineConfig unlearning_engine(const ExperimentConfig& c, TaskKind kind) {
  EngineConfig e = c.engine;
  e.loss.variant = kind == TaskKind::kClass ? LossVariant::kClass : LossVariant::kSample;
  return e;
}

}  // namespace culab::cli
