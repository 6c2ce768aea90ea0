#include "culab/data.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include "culab/error.h"

namespace culab {

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.num_classes = num_classes;
  out.transform = transform;
  if (indices.empty()) return out;
  out.features = features.select_rows(indices);
  out.labels.reserve(indices.size());
  for (auto i : indices) out.labels.push_back(labels[i]);
  return out;
}

void Dataset::validate() const {
  if (empty()) throw ValidationError("dataset is empty");
  if (features.rows() != labels.size()) {
    throw ValidationError("dataset has " + std::to_string(features.rows()) + " feature rows but " +
                          std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw ValidationError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                            " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  if (!features.all_finite()) throw ValidationError("dataset features contain non-finite values");
}

// ---------------------------------------------------------------------------
// Synthetic generator

std::vector<std::vector<double>> synthetic_class_means(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ValidationError("synthetic data needs num_classes >= 2");
  if (spec.dim < 2) throw ValidationError("synthetic data needs dim >= 2");
  if (!(spec.spread > 0.0)) throw ValidationError("synthetic spread must be > 0");

  Rng rng = make_rng(spec.seed, "synthetic.means");
  const double min_dist = 4.0 * spec.spread;
  // Means are drawn around the origin and rejected if too close to an earlier
  // one; the proposal scale grows if rejections persist.
  double scale = 1.5 * spec.spread;
  std::vector<std::vector<double>> means;
  int failures = 0;
  while (means.size() < spec.num_classes) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> m(spec.dim);
    for (auto& v : m) v = dist(rng);
    bool ok = true;
    for (const auto& other : means) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < spec.dim; ++j) d2 += (m[j] - other[j]) * (m[j] - other[j]);
      if (std::sqrt(d2) < min_dist) {
        ok = false;
        break;
      }
    }
    if (ok) {
      means.push_back(std::move(m));
    } else if (++failures % 1000 == 0) {
      scale *= 1.5;
    }
  }
  return means;
}

std::pair<Dataset, Dataset> generate_synthetic(const SyntheticSpec& spec) {
  const auto means = synthetic_class_means(spec);
  auto draw = [&](std::size_t per_class, const char* tag) {
    Rng rng = make_rng(spec.seed, tag);
    std::normal_distribution<double> noise(0.0, 1.0);
    Dataset ds;
    ds.num_classes = spec.num_classes;
    const std::size_t n = per_class * spec.num_classes;
    std::vector<double> values;
    values.reserve(n * spec.dim);
    // Interleave classes so that any prefix of the file is roughly balanced.
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t k = 0; k < spec.num_classes; ++k) {
        for (std::size_t j = 0; j < spec.dim; ++j) values.push_back(means[k][j] + noise(rng));
        ds.labels.push_back(static_cast<int>(k));
      }
    }
    ds.features = Tensor({n, spec.dim}, std::move(values));
    return ds;
  };
  if (spec.per_class_train == 0 || spec.per_class_test == 0) {
    throw ValidationError("synthetic data needs per_class_train and per_class_test >= 1");
  }
  return {draw(spec.per_class_train, "synthetic.train"), draw(spec.per_class_test, "synthetic.test")};
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      cells.push_back(line.substr(start));
      break;
    }
    cells.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return cells;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string() + ": cannot open file");
  const std::string where = path.string() + ":";

  std::string line;
  if (!std::getline(in, line)) throw ParseError(where + "1: missing header");
  auto header = split_commas(trim(line));
  if (header.size() < 2 || trim(header.back()) != "label") {
    throw ParseError(where + "1: header must be f0,...,f{k-1},label");
  }
  const std::size_t k = header.size() - 1;
  for (std::size_t j = 0; j < k; ++j) {
    if (trim(header[j]) != "f" + std::to_string(j)) {
      throw ParseError(where + "1: expected column 'f" + std::to_string(j) + "', found '" +
                       std::string(trim(header[j])) + "'");
    }
  }

  std::vector<double> values;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    auto t = trim(line);
    if (t.empty()) continue;
    auto cells = split_commas(t);
    if (cells.size() != k + 1) {
      throw ParseError(where + std::to_string(line_no) + ": expected " + std::to_string(k + 1) + " columns, found " +
                       std::to_string(cells.size()));
    }
    for (std::size_t j = 0; j < k; ++j) {
      auto cell = trim(cells[j]);
      double v = 0.0;
      auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || p != cell.data() + cell.size() || cell.empty() || !std::isfinite(v)) {
        throw ParseError(where + std::to_string(line_no) + ": non-numeric value '" + std::string(cell) +
                         "' in column f" + std::to_string(j));
      }
      values.push_back(v);
    }
    auto cell = trim(cells[k]);
    long long lab = 0;
    auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), lab);
    if (ec != std::errc() || p != cell.data() + cell.size() || cell.empty()) {
      throw ParseError(where + std::to_string(line_no) + ": non-integer label '" + std::string(cell) + "'");
    }
    if (lab < 0) throw ParseError(where + std::to_string(line_no) + ": negative label " + std::to_string(lab));
    if (lab > 1'000'000) throw ParseError(where + std::to_string(line_no) + ": label too large");
    labels.push_back(static_cast<int>(lab));
  }
  if (labels.empty()) throw ParseError(where + " no data rows");

  Dataset ds;
  ds.features = Tensor({labels.size(), k}, std::move(values));
  ds.num_classes = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
  ds.labels = std::move(labels);
  return ds;
}

void write_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path.string());
  const std::size_t k = data.dim();
  for (std::size_t j = 0; j < k; ++j) out << 'f' << j << ',';
  out << "label\n";
  char buf[64];
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto row = data.features.row(i);
    for (double v : row) {
      // Shortest representation that round-trips exactly.
      auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
      out.write(buf, p - buf);
      out << ',';
    }
    out << data.labels[i] << '\n';
  }
  if (!out) throw Error("failed writing " + path.string());
}

Standardizer fit_standardizer(const Dataset& train) {
  train.validate();
  const std::size_t n = train.size(), k = train.dim();
  Standardizer s;
  s.mean.assign(k, 0.0);
  s.stddev.assign(k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) s.mean[j] += train.features(i, j);
  for (auto& m : s.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double d = train.features(i, j) - s.mean[j];
      s.stddev[j] += d * d;
    }
  for (auto& v : s.stddev) {
    v = std::sqrt(v / static_cast<double>(n));
    if (!(v > 1e-12)) v = 1.0;  // constant column
  }
  return s;
}

Dataset standardize(const Dataset& data, const Standardizer& transform) {
  Dataset out = data;
  out.transform = transform;
  if (data.empty()) return out;
  if (transform.mean.size() != data.dim()) {
    throw DimensionError("standardizer has " + std::to_string(transform.mean.size()) + " columns, data has " +
                         std::to_string(data.dim()));
  }
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t j = 0; j < out.dim(); ++j)
      out.features(i, j) = (out.features(i, j) - transform.mean[j]) / transform.stddev[j];
  return out;
}

// ---------------------------------------------------------------------------
// Tasks

namespace {

std::vector<std::size_t> seeded_subsample(const std::vector<std::size_t>& pool, std::size_t k, std::uint64_t seed,
                                          std::string_view tag) {
  std::vector<std::size_t> v = pool;
  Rng rng = make_rng(seed, tag);
  std::shuffle(v.begin(), v.end(), rng);
  v.resize(std::min(k, v.size()));
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace

UnlearnTask make_task(const Dataset& train, const Dataset& test, const TaskSpec& spec) {
  train.validate();
  test.validate();
  if (train.dim() != test.dim()) throw DimensionError("train and test feature widths differ");
  if (train.num_classes != test.num_classes) throw ValidationError("train and test disagree on num_classes");

  UnlearnTask task;
  task.kind = spec.kind;
  task.train = train;
  task.test = test;
  const std::size_t n = train.size();

  if (spec.kind == TaskKind::kClass) {
    if (spec.class_id < 0 || static_cast<std::size_t>(spec.class_id) >= train.num_classes) {
      throw ValidationError("class_id " + std::to_string(spec.class_id) + " outside [0, " +
                            std::to_string(train.num_classes) + ")");
    }
    task.class_id = spec.class_id;
    for (std::size_t i = 0; i < n; ++i)
      (train.labels[i] == spec.class_id ? task.unlearn_train_idx : task.remain_train_idx).push_back(i);
    for (std::size_t i = 0; i < test.size(); ++i)
      (test.labels[i] == spec.class_id ? task.unlearn_test_idx : task.remain_test_idx).push_back(i);
    if (task.unlearn_train_idx.empty()) {
      throw EmptySetError("class " + std::to_string(spec.class_id) + " has no training samples to unlearn");
    }
    if (task.unlearn_test_idx.empty()) {
      throw EmptySetError("class " + std::to_string(spec.class_id) +
                          " has no test samples; the termination set would be empty");
    }
    task.eval_unlearn_idx = task.unlearn_test_idx;
  } else {
    std::vector<std::size_t> chosen;
    if (!spec.indices.empty()) {
      chosen = spec.indices;
      std::sort(chosen.begin(), chosen.end());
      if (std::adjacent_find(chosen.begin(), chosen.end()) != chosen.end()) {
        throw ValidationError("sample task index list contains duplicates");
      }
      if (chosen.back() >= n) {
        throw ValidationError("sample task index " + std::to_string(chosen.back()) + " out of range for " +
                              std::to_string(n) + " training samples");
      }
    } else {
      if (spec.count == 0) throw EmptySetError("sample task requests zero samples");
      if (spec.count > n) {
        throw ValidationError("sample task count " + std::to_string(spec.count) + " exceeds " + std::to_string(n) +
                              " training samples");
      }
      std::vector<std::size_t> all(n);
      std::iota(all.begin(), all.end(), 0);
      chosen = seeded_subsample(all, spec.count, spec.seed, "task.sample");
    }
    task.unlearn_train_idx = chosen;
    std::size_t c = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (c < chosen.size() && chosen[c] == i) {
        ++c;
      } else {
        task.remain_train_idx.push_back(i);
      }
    }
    std::vector<std::size_t> all_test(test.size());
    std::iota(all_test.begin(), all_test.end(), 0);
    task.eval_unlearn_idx = seeded_subsample(task.unlearn_train_idx, spec.eval_cap, spec.seed, "task.eval_unlearn");
    task.eval_test_idx = seeded_subsample(all_test, spec.eval_cap, spec.seed, "task.eval_test");
  }
  if (task.remain_train_idx.empty()) throw EmptySetError("unlearning task leaves no remaining training samples");

  task.unlearn_train = train.subset(task.unlearn_train_idx);
  task.remain_train = train.subset(task.remain_train_idx);
  task.unlearn_test = test.subset(task.unlearn_test_idx);
  task.remain_test = test.subset(task.remain_test_idx);
  if (spec.kind == TaskKind::kClass) {
    task.eval_unlearn = task.unlearn_test;
  } else {
    task.eval_unlearn = train.subset(task.eval_unlearn_idx);
    task.eval_test = test.subset(task.eval_test_idx);
  }
  task.check_invariants();
  return task;
}

void UnlearnTask::check_invariants() const {
  const std::size_t n = train.size();
  std::vector<int> seen(n, 0);
  for (auto i : unlearn_train_idx) {
    if (i >= n) throw IntegrityError("unlearn index out of range");
    ++seen[i];
  }
  for (auto i : remain_train_idx) {
    if (i >= n) throw IntegrityError("remain index out of range");
    ++seen[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (seen[i] != 1) {
      throw IntegrityError("training index " + std::to_string(i) + " appears " + std::to_string(seen[i]) +
                           " times across unlearn/remain");
    }
  }
  if (kind == TaskKind::kClass) {
    for (auto i : unlearn_train_idx)
      if (train.labels[i] != class_id) throw IntegrityError("unlearn set holds a sample outside the class");
    for (auto i : remain_train_idx)
      if (train.labels[i] == class_id) throw IntegrityError("remain set holds a sample of the unlearned class");
    for (auto i : unlearn_test_idx)
      if (test.labels[i] != class_id) throw IntegrityError("unlearn test set holds a sample outside the class");
    for (auto i : remain_test_idx)
      if (test.labels[i] == class_id) throw IntegrityError("remain test set holds a sample of the unlearned class");
  } else if (unlearn_train_idx.empty()) {
    throw IntegrityError("sample task has an empty unlearning set");
  }
}

// ---------------------------------------------------------------------------
// Batching

std::vector<Batch> batches(const Dataset& view, std::size_t batch_size, std::uint64_t seed, bool drop_last,
                           BatchSource source) {
  if (view.empty()) throw EmptySetError("cannot batch an empty view");
  if (batch_size < 1) throw ConfigurationError("batch size must be >= 1");
  std::vector<std::size_t> order(view.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "batches");
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    if (drop_last && end - start < batch_size) break;
    Batch b;
    b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
    b.features = view.features.select_rows(b.indices);
    for (auto i : b.indices) b.labels.push_back(view.labels[i]);
    b.source = source;
    out.push_back(std::move(b));
  }
  return out;
}

Batch sample_remaining(const UnlearnTask& task, std::size_t batch_size, Rng& rng) {
  const auto& view = task.remain_train;
  if (batch_size < 1) throw ConfigurationError("batch size must be >= 1");
  if (view.size() < batch_size) {
    throw ConfigurationError("remaining set has " + std::to_string(view.size()) + " samples, fewer than batch size " +
                             std::to_string(batch_size));
  }
  // Partial Fisher-Yates over an index pool.
  std::vector<std::size_t> pool(view.size());
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t i = 0; i < batch_size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  Batch b;
  b.source = BatchSource::kRemain;
  b.indices.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(batch_size));
  b.features = view.features.select_rows(b.indices);
  for (auto i : b.indices) b.labels.push_back(view.labels[i]);
  return b;
}

}  // namespace culab
