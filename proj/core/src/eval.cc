#include "culab/eval.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "culab/error.h"
#include "culab/rng.h"

namespace culab {

double accuracy_of_predictions(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (labels.empty()) throw EmptySetError("accuracy of an empty set");
  if (predictions.size() != labels.size()) throw DimensionError("prediction and label counts differ");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double accuracy(const ModelParameters& model, const Dataset& view) {
  if (view.empty()) throw EmptySetError("accuracy of an empty set");
  return accuracy_of_predictions(predict(model, view.features), view.labels);
}

double mean_cross_entropy(const ModelParameters& model, const Dataset& view) {
  if (view.empty()) throw EmptySetError("cross-entropy of an empty set");
  const Tensor logits = forward(model, view.features);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    total += mx + std::log(s) - row[static_cast<std::size_t>(view.labels[i])];
  }
  return total / static_cast<double>(logits.rows());
}

EvaluationReport evaluate(const ModelParameters& model, const UnlearnTask& task, const ModelParameters* reference) {
  EvaluationReport report;
  report.kind = task.kind;
  auto add = [&](std::string name, const Dataset& view) {
    AccuracyRow row;
    row.split = std::move(name);
    row.accuracy = accuracy(model, view);
    if (reference) {
      row.reference = accuracy(*reference, view);
      row.delta = row.accuracy - *row.reference;
    }
    report.rows.push_back(std::move(row));
  };
  if (task.kind == TaskKind::kClass) {
    add("D_r_ts", task.remain_test);
    add("D_u_tr", task.unlearn_train);
    add("D_u_ts", task.unlearn_test);
  } else {
    add("D_ts", task.test);
    add("D_u_tr", task.unlearn_train);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Geometry

std::vector<Centroid> class_centroids(const Tensor& embeddings, const std::vector<int>& labels,
                                      std::size_t num_classes) {
  const std::size_t d = embeddings.cols();
  std::vector<Centroid> out(num_classes);
  for (auto& c : out) c.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& c = out[static_cast<std::size_t>(labels[i])];
    auto row = embeddings.row(i);
    for (std::size_t j = 0; j < d; ++j) c.mean[j] += row[j];
    ++c.count;
  }
  for (auto& c : out) {
    if (c.count == 0) continue;
    double norm2 = 0.0;
    for (auto& v : c.mean) {
      v /= static_cast<double>(c.count);
      norm2 += v * v;
    }
    c.degenerate = std::sqrt(norm2) <= 1e-12;
  }
  return out;
}

std::optional<double> centroid_similarity(std::span<const double> embedding, const Centroid& centroid) {
  if (centroid.count == 0 || centroid.degenerate) return std::nullopt;
  double dot = 0.0, norm2 = 0.0, e2 = 0.0;
  for (std::size_t j = 0; j < embedding.size(); ++j) {
    dot += embedding[j] * centroid.mean[j];
    norm2 += centroid.mean[j] * centroid.mean[j];
    e2 += embedding[j] * embedding[j];
  }
  return dot / (std::sqrt(norm2) * std::sqrt(e2));
}

GeometryDiagnostics embedding_geometry(const ModelParameters& model, const UnlearnTask& task) {
  GeometryDiagnostics g;
  const std::size_t c = task.num_classes();
  g.centroids = class_centroids(encode(model, task.remain_train.features), task.remain_train.labels, c);

  const Tensor z = encode(model, task.unlearn_train.features);
  double own_sum = 0.0, other_sum = 0.0;
  std::size_t own_n = 0, other_n = 0;
  for (std::size_t i = 0; i < task.unlearn_train.size(); ++i) {
    SampleGeometry s;
    s.train_index = task.unlearn_train_idx[i];
    s.label = task.unlearn_train.labels[i];
    s.own_similarity = centroid_similarity(z.row(i), g.centroids[static_cast<std::size_t>(s.label)]);
    for (std::size_t k = 0; k < c; ++k) {
      if (static_cast<int>(k) == s.label) continue;
      auto sim = centroid_similarity(z.row(i), g.centroids[k]);
      if (sim && (!s.max_other_similarity || *sim > *s.max_other_similarity)) s.max_other_similarity = sim;
    }
    if (s.own_similarity) {
      own_sum += *s.own_similarity;
      ++own_n;
    }
    if (s.max_other_similarity) {
      other_sum += *s.max_other_similarity;
      ++other_n;
    }
    g.samples.push_back(s);
  }
  if (own_n) g.mean_own_similarity = own_sum / static_cast<double>(own_n);
  if (other_n) g.mean_max_other_similarity = other_sum / static_cast<double>(other_n);
  return g;
}

// ---------------------------------------------------------------------------
// Membership inference

double AttackModel::probability(std::span<const double> features) const {
  if (features.size() != weights.size()) throw DimensionError("attack feature width mismatch");
  double z = bias;
  for (std::size_t j = 0; j < weights.size(); ++j) z += weights[j] * features[j];
  return 1.0 / (1.0 + std::exp(-z));
}

Tensor attack_features(const ModelParameters& model, const Tensor& x, const std::vector<int>* labels) {
  const Tensor logits = forward(model, x);
  const std::size_t n = logits.rows(), c = logits.cols();
  if (labels && labels->size() != n) throw DimensionError("attack_features: label count does not match rows");
  const std::size_t width = labels ? c + 1 : c;
  Tensor out({n, width});
  std::vector<double> p(c);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      p[j] = std::exp(row[j] - mx);
      s += p[j];
    }
    for (auto& v : p) v /= s;
    if (labels) out(i, c) = p[static_cast<std::size_t>((*labels)[i])];
    std::sort(p.begin(), p.end(), std::greater<>());
    for (std::size_t j = 0; j < c; ++j) out(i, j) = p[j];
  }
  return out;
}

namespace {

// Solves A x = b in place by Gaussian elimination with partial pivoting.
bool solve_linear(std::vector<std::vector<double>> a, std::vector<double>& b) {
  const std::size_t n = b.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    if (std::abs(a[piv][col]) < 1e-300) return false;
    std::swap(a[col], a[piv]);
    std::swap(b[col], b[piv]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r][col] / a[col][col];
      for (std::size_t k = col; k < n; ++k) a[r][k] -= f * a[col][k];
      b[r] -= f * b[col];
    }
  }
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t k = i + 1; k < n; ++k) b[i] -= a[i][k] * b[k];
    b[i] /= a[i][i];
  }
  return true;
}

double log1pexp(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

struct LogisticFit {
  std::vector<double> beta;  // weights..., bias
};

LogisticFit fit_logistic(const std::vector<std::vector<double>>& x, const std::vector<int>& y, double ridge,
                         std::size_t max_iterations) {
  const std::size_t n = x.size(), k = x.front().size() + 1;
  std::vector<double> beta(k, 0.0);
  auto linear = [&](std::size_t i, const std::vector<double>& b) {
    double z = b[k - 1];
    for (std::size_t j = 0; j + 1 < k; ++j) z += b[j] * x[i][j];
    return z;
  };
  auto objective = [&](const std::vector<double>& b) {
    double f = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double z = linear(i, b);
      f += y[i] ? log1pexp(-z) : log1pexp(z);
    }
    f /= static_cast<double>(n);
    for (std::size_t j = 0; j + 1 < k; ++j) f += 0.5 * ridge * b[j] * b[j];
    return f;
  };

  double f = objective(beta);
  for (std::size_t it = 0; it < max_iterations; ++it) {
    std::vector<double> grad(k, 0.0);
    std::vector<std::vector<double>> hess(k, std::vector<double>(k, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      const double p = 1.0 / (1.0 + std::exp(-linear(i, beta)));
      const double r = p - y[i];
      const double w = p * (1.0 - p);
      for (std::size_t a = 0; a < k; ++a) {
        const double xa = a + 1 < k ? x[i][a] : 1.0;
        grad[a] += r * xa;
        for (std::size_t b = 0; b < k; ++b) hess[a][b] += w * xa * (b + 1 < k ? x[i][b] : 1.0);
      }
    }
    for (std::size_t a = 0; a < k; ++a) {
      grad[a] /= static_cast<double>(n);
      for (auto& h : hess[a]) h /= static_cast<double>(n);
      hess[a][a] += a + 1 < k ? ridge : 1e-12;
    }
    std::vector<double> step = grad;
    if (!solve_linear(hess, step)) break;
    // Backtracking keeps every accepted iterate a descent step.
    double t = 1.0;
    std::vector<double> next(k);
    double f_next = f;
    for (int tries = 0; tries < 40; ++tries, t *= 0.5) {
      for (std::size_t a = 0; a < k; ++a) next[a] = beta[a] - t * step[a];
      f_next = objective(next);
      if (f_next <= f) break;
    }
    double max_step = 0.0;
    for (std::size_t a = 0; a < k; ++a) max_step = std::max(max_step, std::abs(next[a] - beta[a]));
    if (f_next > f) break;
    beta = next;
    f = f_next;
    if (max_step < 1e-10) break;
  }
  return {beta};
}

}  // namespace

AttackTraining fit_attack(const Tensor& features, const std::vector<int>& member_labels, const MiaConfig& cfg) {
  const std::size_t n = member_labels.size();
  if (n < 4 || features.rows() != n) throw EmptySetError("attack training needs at least 4 labeled rows");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(cfg.split_seed, "mia.split");
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<double>(n)));
  n_val = std::clamp<std::size_t>(n_val, 1, n - 2);

  std::vector<std::vector<double>> xs;
  std::vector<int> ys;
  for (std::size_t i = n_val; i < n; ++i) {
    auto row = features.row(order[i]);
    xs.emplace_back(row.begin(), row.end());
    ys.push_back(member_labels[order[i]]);
  }
  auto fit = fit_logistic(xs, ys, cfg.ridge, cfg.max_iterations);

  AttackTraining out;
  out.model.weights.assign(fit.beta.begin(), fit.beta.end() - 1);
  out.model.bias = fit.beta.back();
  out.train_size = xs.size();
  out.validation_size = n_val;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n_val; ++i) {
    const bool member = out.model.is_member(features.row(order[i]));
    correct += (member ? 1 : 0) == member_labels[order[i]] ? 1 : 0;
  }
  out.validation_accuracy = static_cast<double>(correct) / static_cast<double>(n_val);
  return out;
}

MiaAttack mia_train(const ModelParameters& model, const UnlearnTask& task, const MiaConfig& cfg) {
  const std::size_t m =
      std::min({cfg.max_per_side, task.remain_train.size() / 2, task.test.size() / 2});
  if (m < 2) {
    throw EmptySetError("membership attack needs at least 4 remaining and 4 test samples");
  }
  MiaAttack attack;
  std::vector<std::size_t> remain(task.remain_train.size());
  std::iota(remain.begin(), remain.end(), 0);
  Rng rng = make_rng(cfg.split_seed, "mia.members");
  std::shuffle(remain.begin(), remain.end(), rng);
  attack.member_idx.assign(remain.begin(), remain.begin() + static_cast<std::ptrdiff_t>(m));
  attack.heldout_member_idx.assign(remain.begin() + static_cast<std::ptrdiff_t>(m),
                                   remain.begin() + static_cast<std::ptrdiff_t>(2 * m));

  std::vector<std::size_t> test(task.test.size());
  std::iota(test.begin(), test.end(), 0);
  Rng nrng = make_rng(cfg.split_seed, "mia.nonmembers");
  std::shuffle(test.begin(), test.end(), nrng);
  attack.nonmember_idx.assign(test.begin(), test.begin() + static_cast<std::ptrdiff_t>(m));

  const Dataset members = task.remain_train.subset(attack.member_idx);
  const Dataset nonmembers = task.test.subset(attack.nonmember_idx);
  const Tensor fm = attack_features(model, members.features, cfg.label_probability ? &members.labels : nullptr);
  const Tensor fn = attack_features(model, nonmembers.features, cfg.label_probability ? &nonmembers.labels : nullptr);
  std::vector<double> values(fm.values().begin(), fm.values().end());
  values.insert(values.end(), fn.values().begin(), fn.values().end());
  const Tensor features({2 * m, fm.cols()}, std::move(values));
  std::vector<int> labels(2 * m, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(m), 1);
  attack.training = fit_attack(features, labels, cfg);
  return attack;
}

double member_rate_of_predictions(const std::vector<bool>& predictions) {
  if (predictions.empty()) throw EmptySetError("member rate of an empty set");
  const auto members = std::count(predictions.begin(), predictions.end(), true);
  return static_cast<double>(members) / static_cast<double>(predictions.size());
}

double mia_member_rate(const AttackModel& attack, const ModelParameters& model, const Dataset& samples,
                       bool label_probability) {
  if (samples.empty()) throw EmptySetError("member rate of an empty set");
  const Tensor f = attack_features(model, samples.features, label_probability ? &samples.labels : nullptr);
  std::vector<bool> preds(f.rows());
  for (std::size_t i = 0; i < f.rows(); ++i) preds[i] = attack.is_member(f.row(i));
  return member_rate_of_predictions(preds);
}

MiaReport run_mia(const ModelParameters& model, const UnlearnTask& task, const MiaConfig& cfg) {
  auto attack = mia_train(model, task, cfg);
  const Dataset heldout = task.remain_train.subset(attack.heldout_member_idx);
  MiaReport r;
  r.unlearn_member_rate = mia_member_rate(attack.training.model, model, task.unlearn_train, cfg.label_probability);
  r.heldout_member_rate = mia_member_rate(attack.training.model, model, heldout, cfg.label_probability);
  r.attack_validation_accuracy = attack.training.validation_accuracy;
  r.members_size = attack.member_idx.size();
  r.nonmembers_size = attack.nonmember_idx.size();
  r.unlearn_size = task.unlearn_train.size();
  r.heldout_size = heldout.size();
  return r;
}

}  // namespace culab
