#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "culab/cli/app.h"
#include "culab/cli/config.h"
#include "culab/data.h"
#include "culab/engine.h"
#include "culab/eval.h"
#include "culab/model.h"
#include "culab/serialize.h"

namespace culab {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path fresh_dir(const std::string& name) {
  // ctest runs each case in its own process, possibly in parallel.
  const fs::path dir = fs::temp_directory_path() / ("culab_cli_test." + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Outcome {
  int code;
  std::string out, err;
};

Outcome culab(std::vector<std::string> args) {
  args.insert(args.begin(), "culab");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

json small_config_json(const fs::path& out_dir, const std::string& kind = "sample") {
  json task = kind == "sample" ? json{{"kind", "sample"}, {"count", 20}, {"seed", 1}}
                               : json{{"kind", "class"}, {"class_id", 1}, {"seed", 1}};
  return {
      {"dataset",
       {{"synthetic",
         {{"num_classes", 4}, {"dim", 6}, {"per_class_train", 60}, {"per_class_test", 30}, {"spread", 0.6}, {"seed", 2}}}}},
      {"architecture", {{"hidden", {16}}, {"embedding_dim", 8}}},
      {"engine",
       {{"batch_size", 32}, {"max_epochs", 10}, {"max_unlearn_epochs", 4}, {"train_learning_rate", 0.1}, {"seed", 3}}},
      {"loss", {{"lambda_ul", 0.01}}},
      {"task", task},
      {"output_dir", out_dir.string()},
  };
}

fs::path write_config(const fs::path& dir, const json& doc, const std::string& name = "config.json") {
  const fs::path p = dir / name;
  std::ofstream(p) << doc.dump(2);
  return p;
}

// Trains once per kind and returns the output directory.
fs::path trained_dir(const std::string& kind) {
  static std::map<std::string, fs::path> cache;
  auto it = cache.find(kind);
  if (it != cache.end()) return it->second;
  const fs::path dir = fresh_dir("trained-" + kind);
  const fs::path cfg = write_config(dir, small_config_json(dir / "train", kind));
  const Outcome r = culab({"train", "--config", cfg.string()});
  EXPECT_EQ(r.code, cli::kExitOk) << r.err;
  return cache.emplace(kind, dir).first->second;
}

json strip_wallclock(json run) {
  run.erase("duration_seconds");
  return run;
}

TEST(GenData, DefaultFlagsWriteCsvWithHeader) {
  const fs::path dir = fresh_dir("gen-default");
  const Outcome r = culab({"gen-data", "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* name : {"train.csv", "test.csv", "manifest.json", "config.echo.json"})
    EXPECT_TRUE(fs::exists(dir / name)) << name;
  const std::string head = slurp(dir / "train.csv").substr(0, 40);
  EXPECT_EQ(head.rfind("f0,f1,", 0), 0u) << head;
  EXPECT_NE(slurp(dir / "train.csv").find(",label\n"), std::string::npos);
}

TEST(GenData, SameSeedIsByteIdentical) {
  const fs::path a = fresh_dir("gen-a"), b = fresh_dir("gen-b"), c = fresh_dir("gen-c");
  ASSERT_EQ(culab({"gen-data", "--out", a.string(), "--seed", "5", "--per-class-train", "20"}).code, 0);
  ASSERT_EQ(culab({"gen-data", "--out", b.string(), "--seed", "5", "--per-class-train", "20"}).code, 0);
  ASSERT_EQ(culab({"gen-data", "--out", c.string(), "--seed", "6", "--per-class-train", "20"}).code, 0);
  EXPECT_EQ(slurp(a / "train.csv"), slurp(b / "train.csv"));
  EXPECT_EQ(slurp(a / "test.csv"), slurp(b / "test.csv"));
  EXPECT_NE(slurp(a / "train.csv"), slurp(c / "train.csv"));
}

TEST(GenData, ManifestReproducesFiles) {
  const fs::path dir = fresh_dir("gen-manifest");
  ASSERT_EQ(culab({"gen-data", "--out", dir.string(), "--classes", "3", "--dim", "5", "--spread", "0.7"}).code, 0);
  const json manifest = read_json_file(dir / "manifest.json");
  const json& s = manifest.at("synthetic");
  SyntheticSpec spec;
  spec.num_classes = s.at("num_classes");
  spec.dim = s.at("dim");
  spec.per_class_train = s.at("per_class_train");
  spec.per_class_test = s.at("per_class_test");
  spec.spread = s.at("spread");
  spec.seed = s.at("seed");
  const auto [train, test] = generate_synthetic(spec);
  const fs::path again = fresh_dir("gen-manifest-again");
  write_csv(train, again / "train.csv");
  write_csv(test, again / "test.csv");
  EXPECT_EQ(slurp(again / "train.csv"), slurp(dir / "train.csv"));
  EXPECT_EQ(slurp(again / "test.csv"), slurp(dir / "test.csv"));
  EXPECT_EQ(manifest.at("train_rows"), train.size());
}

TEST(GenData, RerunFromEchoIsIdentical) {
  const fs::path dir = fresh_dir("gen-echo");
  ASSERT_EQ(culab({"gen-data", "--out", (dir / "a").string(), "--seed", "9", "--classes", "3"}).code, 0);
  const fs::path again = dir / "b";
  ASSERT_EQ(culab({"gen-data", "--config", (dir / "a" / "config.echo.json").string(), "--out", again.string()}).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "train.csv"), slurp(again / "train.csv"));
  EXPECT_EQ(slurp(dir / "a" / "manifest.json"), slurp(again / "manifest.json"));
}

TEST(Train, WritesLoadableCheckpoint) {
  const fs::path dir = trained_dir("sample") / "train";
  ASSERT_TRUE(fs::exists(dir / "model.ckpt"));
  const ModelParameters p = load_checkpoint(dir / "model.ckpt");
  EXPECT_EQ(p.arch.input_dim, 6u);
  EXPECT_EQ(p.arch.num_classes, 4u);
  const json run = read_json_file(dir / "run.json");
  EXPECT_EQ(run.at("method"), "train");
  EXPECT_EQ(run.at("epochs").size(), 10u);
  EXPECT_TRUE(run.contains("duration_seconds"));
  const json echo = read_json_file(dir / "config.echo.json");
  EXPECT_EQ(echo.at("engine").at("seed"), 3);
  EXPECT_EQ(echo.at("architecture").at("input_dim"), 6);
  EXPECT_EQ(echo.at("mia").at("split_seed"), 0);
}

TEST(Train, MissingCsvNamesTheField) {
  const fs::path dir = fresh_dir("missing-csv");
  json doc = small_config_json(dir / "out");
  doc["dataset"] = {{"csv", {{"train", "nope/train.csv"}, {"test", "nope/test.csv"}}}};
  const Outcome r = culab({"train", "--config", write_config(dir, doc).string()});
  EXPECT_EQ(r.code, cli::kExitValidation);
  EXPECT_NE(r.err.find("dataset.csv.train"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("dataset.csv.test"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "out" / "model.ckpt"));
}

TEST(Train, EveryViolatedFieldIsListed) {
  const fs::path dir = fresh_dir("many-errors");
  json doc = small_config_json(dir / "out");
  doc["engine"]["batch_size"] = 1;
  doc["engine"]["omega"] = 9;
  doc["loss"]["temperature"] = -1;
  doc["architecture"]["embedding_dim"] = 0;
  doc["bogus"] = true;
  const Outcome r = culab({"train", "--config", write_config(dir, doc).string()});
  EXPECT_EQ(r.code, cli::kExitValidation);
  for (const char* field : {"batch_size", "omega", "temperature", "embedding_dim", "bogus"})
    EXPECT_NE(r.err.find(field), std::string::npos) << field << "\n" << r.err;
}

TEST(Train, CsvSourceWorks) {
  const fs::path dir = fresh_dir("csv-source");
  ASSERT_EQ(culab({"gen-data", "--out", (dir / "data").string(), "--per-class-train", "30", "--per-class-test", "10"}).code, 0);
  json doc = small_config_json(dir / "out");
  doc["dataset"] = {{"csv", {{"train", "data/train.csv"}, {"test", "data/test.csv"}}}};
  doc["engine"]["max_epochs"] = 2;
  const Outcome r = culab({"train", "--config", write_config(dir, doc).string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_checkpoint(dir / "out" / "model.ckpt").arch.input_dim, 8u);
}

TEST(Unlearn, UnknownMethodIsValidationError) {
  const fs::path base = trained_dir("sample");
  const Outcome r = culab({"unlearn", "--config", (base / "config.json").string(), "--method", "forget-it", "--from",
                           (base / "train" / "model.ckpt").string(), "--out", (base / "bad").string()});
  EXPECT_EQ(r.code, cli::kExitValidation);
  EXPECT_NE(r.err.find("forget-it"), std::string::npos);
}

TEST(Unlearn, ArchitectureMismatchIsValidationError) {
  const fs::path base = trained_dir("sample");
  json doc = small_config_json(base / "mismatch");
  doc["architecture"]["hidden"] = {12};
  const Outcome r = culab({"unlearn", "--config", write_config(base, doc, "mismatch.json").string(), "--method",
                           "contrastive", "--from", (base / "train" / "model.ckpt").string()});
  EXPECT_EQ(r.code, cli::kExitValidation);
  EXPECT_NE(r.err.find("architecture mismatch"), std::string::npos) << r.err;
}

TEST(Unlearn, RetrainWarnsAboutFrom) {
  const fs::path base = trained_dir("sample");
  const Outcome r = culab({"unlearn", "--config", (base / "config.json").string(), "--method", "retrain", "--from",
                           (base / "train" / "model.ckpt").string(), "--out", (base / "retrain").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("retrain ignores --from"), std::string::npos);
  const json run = read_json_file(base / "retrain" / "run.json");
  EXPECT_EQ(run.at("method"), "retrain");
}

TEST(Unlearn, ContrastiveReasonIsClosedEnum) {
  const fs::path base = trained_dir("class");
  const Outcome r = culab({"unlearn", "--config", (base / "config.json").string(), "--method", "contrastive", "--from",
                           (base / "train" / "model.ckpt").string(), "--out", (base / "contrastive").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string reason = read_json_file(base / "contrastive" / "run.json").at("termination_reason");
  EXPECT_TRUE(reason == "condition-met" || reason == "epoch-cap") << reason;
}

TEST(Unlearn, EveryMethodRerunsFromEchoBitExactly) {
  const fs::path base = trained_dir("sample");
  for (const char* method : {"contrastive", "finetune", "neggrad", "retrain"}) {
    const fs::path first = base / (std::string("replay-") + method);
    std::vector<std::string> args{"unlearn", "--config", (base / "config.json").string(), "--method", method,
                                  "--out", first.string()};
    if (std::string(method) != "retrain") {
      args.push_back("--from");
      args.push_back((base / "train" / "model.ckpt").string());
    }
    ASSERT_EQ(culab(args).code, 0) << method;
    const fs::path second = first.string() + "-again";
    ASSERT_EQ(culab({"unlearn", "--config", (first / "config.echo.json").string(), "--out", second.string()}).code, 0)
        << method;
    json a = strip_wallclock(read_json_file(first / "run.json"));
    json b = strip_wallclock(read_json_file(second / "run.json"));
    a.at("config").erase("output_dir");
    b.at("config").erase("output_dir");
    EXPECT_EQ(a, b) << method;
    EXPECT_EQ(slurp(first / "model.ckpt"), slurp(second / "model.ckpt")) << method;
  }
}

TEST(Train, RerunFromEchoIsBitExact) {
  const fs::path base = trained_dir("sample");
  const fs::path again = base / "train-again";
  ASSERT_EQ(culab({"train", "--config", (base / "train" / "config.echo.json").string(), "--out", again.string()}).code, 0);
  EXPECT_EQ(slurp(base / "train" / "model.ckpt"), slurp(again / "model.ckpt"));
  json a = strip_wallclock(read_json_file(base / "train" / "run.json"));
  json b = strip_wallclock(read_json_file(again / "run.json"));
  EXPECT_EQ(a.at("epochs"), b.at("epochs"));
}

// Library-side reconstruction of the data and task described by a config.
UnlearnTask library_task(const fs::path& config) {
  cli::ExperimentConfig c = cli::load_config(config);
  const cli::LoadedData d = cli::load_data(c);
  return cli::build_task(c, d);
}

TEST(Eval, RowsAndDeltas) {
  for (const std::string kind : {"sample", "class"}) {
    const fs::path base = trained_dir(kind);
    const std::string ckpt = (base / "train" / "model.ckpt").string();
    const fs::path plain = base / "eval-plain", ref = base / "eval-ref";
    ASSERT_EQ(culab({"eval", "--config", (base / "config.json").string(), "--model", ckpt, "--out", plain.string()}).code, 0);
    ASSERT_EQ(culab({"eval", "--config", (base / "config.json").string(), "--model", ckpt, "--reference", ckpt,
                     "--before", ckpt, "--out", ref.string()})
                  .code,
              0);
    const json p = read_json_file(plain / "eval.json");
    const json r = read_json_file(ref / "eval.json");
    std::vector<std::string> splits;
    for (const auto& row : p.at("rows")) {
      splits.push_back(row.at("split"));
      EXPECT_FALSE(row.contains("delta") && !row.at("delta").is_null());
    }
    const std::vector<std::string> want = kind == "class" ? std::vector<std::string>{"D_r_ts", "D_u_tr", "D_u_ts"}
                                                          : std::vector<std::string>{"D_ts", "D_u_tr"};
    EXPECT_EQ(splits, want);
    for (const auto& row : r.at("rows")) EXPECT_EQ(row.at("delta").get<double>(), 0.0);
    EXPECT_FALSE(p.at("geometry").contains("before"));
    EXPECT_TRUE(r.at("geometry").contains("before"));
    EXPECT_TRUE(fs::exists(plain / "geometry.csv"));

    const UnlearnTask task = library_task(base / "config.json");
    const ModelParameters model = load_checkpoint(ckpt);
    const EvaluationReport lib = evaluate(model, task);
    for (std::size_t i = 0; i < lib.rows.size(); ++i)
      EXPECT_EQ(p.at("rows")[i].at("accuracy").get<double>(), lib.rows[i].accuracy);
  }
}

TEST(Eval, GeometryCsvHasOneRowPerUnlearningSample) {
  const fs::path base = trained_dir("sample");
  const fs::path out = base / "eval-geometry";
  ASSERT_EQ(culab({"eval", "--config", (base / "config.json").string(), "--model",
                   (base / "train" / "model.ckpt").string(), "--out", out.string()})
                .code,
            0);
  std::ifstream in(out / "geometry.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 1u + 20u);
}

TEST(Mia, SchemaDeterminismAndLibraryAgreement) {
  const fs::path base = trained_dir("sample");
  const std::string ckpt = (base / "train" / "model.ckpt").string();
  const fs::path a = base / "mia-a", b = base / "mia-b";
  ASSERT_EQ(culab({"mia", "--config", (base / "config.json").string(), "--model", ckpt, "--out", a.string()}).code, 0);
  ASSERT_EQ(culab({"mia", "--config", (a / "config.echo.json").string(), "--out", b.string()}).code, 0);
  const json ja = read_json_file(a / "mia.json");
  for (const char* key : {"unlearn_member_rate", "heldout_member_rate", "attack_validation_accuracy", "members_size",
                          "nonmembers_size", "unlearn_size", "heldout_size"})
    EXPECT_TRUE(ja.contains(key)) << key;
  EXPECT_EQ(slurp(a / "mia.json"), slurp(b / "mia.json"));

  const cli::ExperimentConfig c = cli::load_config(base / "config.json");
  const MiaReport lib = run_mia(load_checkpoint(ckpt), library_task(base / "config.json"), c.mia);
  EXPECT_EQ(ja.at("unlearn_member_rate").get<double>(), lib.unlearn_member_rate);
  EXPECT_EQ(ja.at("heldout_member_rate").get<double>(), lib.heldout_member_rate);
  EXPECT_EQ(ja.at("members_size").get<std::size_t>(), lib.members_size);
}

TEST(Commands, DoNotModifyInputs) {
  const fs::path base = trained_dir("sample");
  const std::string before_cfg = slurp(base / "config.json");
  const std::string before_ckpt = slurp(base / "train" / "model.ckpt");
  ASSERT_EQ(culab({"unlearn", "--config", (base / "config.json").string(), "--method", "finetune", "--from",
                   (base / "train" / "model.ckpt").string(), "--out", (base / "untouched").string()})
                .code,
            0);
  EXPECT_EQ(slurp(base / "config.json"), before_cfg);
  EXPECT_EQ(slurp(base / "train" / "model.ckpt"), before_ckpt);
}

TEST(Commands, UsageErrors) {
  EXPECT_EQ(culab({}).code, cli::kExitValidation);
  EXPECT_EQ(culab({"frobnicate"}).code, cli::kExitValidation);
  EXPECT_EQ(culab({"train", "--config", "/definitely/not/here.json"}).code, cli::kExitValidation);
  EXPECT_EQ(culab({"--help"}).code, cli::kExitOk);
  EXPECT_EQ(culab({"eval", "--out", fresh_dir("no-model").string()}).code, cli::kExitValidation);
}

int run_binary(const std::string& args) {
  const int status = std::system((std::string(CULAB_BINARY) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Binary, ExitCodes) {
  const fs::path dir = fresh_dir("binary");
  EXPECT_EQ(run_binary("gen-data --per-class-train 5 --per-class-test 5 --out " + dir.string()), 0);
  EXPECT_EQ(run_binary("unlearn --method nope --from x --out " + dir.string()), 2);
  EXPECT_EQ(run_binary("train --out " + dir.string() + " --bogus-flag"), 2);
  // A corrupt checkpoint is a runtime failure, not a validation one.
  std::ofstream(dir / "broken.ckpt") << "garbage";
  const fs::path cfg = write_config(dir, small_config_json(dir / "out"));
  EXPECT_EQ(run_binary("mia --config " + cfg.string() + " --model " + (dir / "broken.ckpt").string()), 3);
}

}  // namespace
}  // namespace culab
