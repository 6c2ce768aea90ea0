#include "culab/engine.h"

#include <chrono>
#include <cmath>

#include "culab/error.h"
#include "culab/eval.h"
#include "culab/rng.h"

namespace culab {

void EngineConfig::validate() const {
  std::vector<std::string> problems;
  if (batch_size < 2) problems.push_back("engine.batch_size must be >= 2");
  if (omega < 1 || omega > 4) problems.push_back("engine.omega must be in [1, 4]");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) problems.push_back("engine.learning_rate must be >= 0");
  if (eval_every < 1) problems.push_back("engine.eval_every must be >= 1");
  if (!(neggrad_ce_cap_factor > 0.0)) problems.push_back("engine.neggrad_ce_cap_factor must be > 0");
  try {
    loss.validate();
  } catch (const ValidationError& e) {
    problems.push_back(e.what());
  }
  if (!problems.empty()) {
    std::string msg = "invalid engine config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }
}

std::string to_string(TerminationReason r) {
  switch (r) {
    case TerminationReason::kConditionMet:
      return "condition-met";
    case TerminationReason::kEpochCap:
      return "epoch-cap";
    case TerminationReason::kError:
      return "error";
  }
  return "error";
}

bool termination_class(double eval_accuracy, std::size_t num_classes) {
  return eval_accuracy <= 1.0 / static_cast<double>(num_classes);
}

bool termination_sample(double unlearn_accuracy, double test_accuracy) { return unlearn_accuracy <= test_accuracy; }

bool check_termination_class(const ModelParameters& model, const Dataset& eval_set, std::size_t num_classes) {
  if (eval_set.empty()) throw EmptySetError("class termination check needs a non-empty evaluation set");
  return termination_class(accuracy(model, eval_set), num_classes);
}

bool check_termination_sample(const ModelParameters& model, const Dataset& unlearn_eval, const Dataset& test_eval) {
  if (unlearn_eval.empty() || test_eval.empty()) {
    throw EmptySetError("sample termination check needs non-empty evaluation sets");
  }
  return termination_sample(accuracy(model, unlearn_eval), accuracy(model, test_eval));
}

bool check_termination(const ModelParameters& model, const UnlearnTask& task) {
  return task.kind == TaskKind::kClass ? check_termination_class(model, task.eval_unlearn, task.num_classes())
                                       : check_termination_sample(model, task.eval_unlearn, task.eval_test);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void apply_step(ModelParameters& params, const std::vector<Tensor>& grads, double step) {
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    auto w = params.tensors[t].value.values();
    auto g = grads[t].values();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= step * g[i];
  }
}

// One CE gradient step on a batch; `sign` = +1 descends, -1 ascends.
double ce_step(ModelParameters& params, const Batch& batch, double lr, double sign) {
  ad::Tape tape;
  auto model = bind(tape, params);
  auto logits = head(model, encode(model, tape.constant(batch.features)));
  auto ce = loss_ce(logits, batch.labels);
  auto grads = tape.grad(ce, model.params);
  apply_step(params, grads, sign * lr);
  return ce.value().item();
}

void require_compatible(const ModelParameters& params, const UnlearnTask& task) {
  if (params.arch.input_dim != task.train.dim()) {
    throw DimensionError("model input_dim " + std::to_string(params.arch.input_dim) + " does not match data width " +
                         std::to_string(task.train.dim()));
  }
  if (params.arch.num_classes != task.num_classes()) {
    throw DimensionError("model has " + std::to_string(params.arch.num_classes) + " classes, task has " +
                         std::to_string(task.num_classes()));
  }
}

// Fills the evaluation fields of `m` and returns whether the task's
// termination predicate holds.
bool evaluate_termination(const ModelParameters& params, const UnlearnTask& task, EpochMetrics& m) {
  m.eval_unlearn_acc = accuracy(params, task.eval_unlearn);
  if (task.kind == TaskKind::kClass) {
    m.terminated = termination_class(*m.eval_unlearn_acc, task.num_classes());
  } else {
    m.eval_test_acc = accuracy(params, task.eval_test);
    m.terminated = termination_sample(*m.eval_unlearn_acc, *m.eval_test_acc);
  }
  return m.terminated;
}

std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
  return derive_seed(seed + epoch, "epoch");
}

RunResult train_from(ModelParameters params, const Dataset& data, const EngineConfig& cfg, std::string method) {
  const auto start = Clock::now();
  RunResult result;
  result.record.method = std::move(method);
  data.validate();
  if (data.dim() != params.arch.input_dim) {
    throw DimensionError("training data width " + std::to_string(data.dim()) + " does not match input_dim " +
                         std::to_string(params.arch.input_dim));
  }
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    double ce_sum = 0.0;
    auto epoch_batches = batches(data, cfg.batch_size, epoch_seed(cfg.seed, epoch));
    for (std::size_t b = 0; b < epoch_batches.size(); ++b) {
      double ce = 0.0;
      try {
        ce = ce_step(params, epoch_batches[b], cfg.learning_rate, 1.0);
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                              ": " + e.what());
      }
      if (!std::isfinite(ce)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
      }
      ce_sum += ce;
      ++m.steps;
    }
    m.mean_ce = ce_sum / static_cast<double>(m.steps);
    m.mean_total = m.mean_ce;
    result.record.batches_processed += m.steps;
    result.record.epochs.push_back(m);
  }
  result.record.reason = TerminationReason::kEpochCap;
  result.params = std::move(params);
  result.record.duration_seconds = seconds_since(start);
  return result;
}

}  // namespace

RunResult train(const ModelArchitecture& arch, const Dataset& train_data, const EngineConfig& cfg) {
  cfg.validate();
  return train_from(init_parameters(arch, cfg.seed), train_data, cfg, "train");
}

RunResult retrain(const ModelArchitecture& arch, const UnlearnTask& task, const EngineConfig& cfg) {
  cfg.validate();
  return train_from(init_parameters(arch, cfg.seed), task.remain_train, cfg, "retrain");
}

RunResult unlearn_contrastive(const ModelParameters& initial, const UnlearnTask& task, const EngineConfig& cfg) {
  cfg.validate();
  require_compatible(initial, task);
  const LossVariant expected = task.kind == TaskKind::kClass ? LossVariant::kClass : LossVariant::kSample;
  if (cfg.loss.variant != expected) {
    throw ConfigurationError(task.kind == TaskKind::kClass ? "class task requires the class loss variant"
                                                           : "sample task requires the sample loss variant");
  }
  const auto start = Clock::now();
  RunResult result;
  result.record.method = "contrastive";
  ModelParameters params = initial;
  Rng remaining_rng = make_rng(cfg.seed, "unlearn.remaining");

  for (std::size_t epoch = 1; epoch <= cfg.max_unlearn_epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    double ce_sum = 0.0, ul_sum = 0.0, total_sum = 0.0;
    std::size_t ul_steps = 0;
    auto unlearn_batches =
        batches(task.unlearn_train, cfg.batch_size, epoch_seed(cfg.seed, epoch), false, BatchSource::kUnlearn);
    for (const auto& xu : unlearn_batches) {
      for (std::size_t rep = 0; rep < cfg.omega; ++rep) {
        Batch xr = sample_remaining(task, cfg.batch_size, remaining_rng);
        ad::Tape tape;
        auto model = bind(tape, params);
        auto zu = encode(model, tape.constant(xu.features));
        auto zr = encode(model, tape.constant(xr.features));
        auto ce = loss_ce(head(model, zr), xr.labels);
        auto sets = build_contrast_sets(xu.labels, zu, xr.labels, cfg.detach_remaining ? tape.constant(zr.value()) : zr);
        ad::Var total;
        if (valid_anchor_count(sets, cfg.loss.variant) > 0) {
          auto ul = loss_ul(sets, cfg.loss);
          total = loss_combined(ul, ce, cfg.loss);
          ul_sum += ul.value().item();
          ++ul_steps;
        } else {
          // Every anchor was excluded for this draw; only the CE term remains.
          total = ad::scale(ce, cfg.loss.lambda_ce);
          ++m.skipped_ul_steps;
        }
        if (!std::isfinite(total.value().item())) {
          throw DivergenceError("non-finite unlearning loss at epoch " + std::to_string(epoch));
        }
        auto grads = tape.grad(total, model.params);
        apply_step(params, grads, cfg.learning_rate);
        ce_sum += ce.value().item();
        total_sum += total.value().item();
        ++m.steps;
      }
    }
    if (ul_steps == 0) {
      throw ConfigurationError("unlearnable configuration: no remaining batch in epoch " + std::to_string(epoch) +
                               " produced a valid anchor");
    }
    m.mean_ce = ce_sum / static_cast<double>(m.steps);
    m.mean_ul = ul_sum / static_cast<double>(ul_steps);
    m.mean_total = total_sum / static_cast<double>(m.steps);
    result.record.batches_processed += m.steps;

    const bool evaluate = epoch % cfg.eval_every == 0;
    const bool done = evaluate && evaluate_termination(params, task, m);
    result.record.epochs.push_back(m);
    if (done) {
      result.record.reason = TerminationReason::kConditionMet;
      result.params = std::move(params);
      result.record.duration_seconds = seconds_since(start);
      return result;
    }
  }
  result.record.reason = TerminationReason::kEpochCap;
  result.params = std::move(params);
  result.record.duration_seconds = seconds_since(start);
  return result;
}

RunResult unlearn_finetune(const ModelParameters& initial, const UnlearnTask& task, const EngineConfig& cfg) {
  cfg.validate();
  require_compatible(initial, task);
  const auto start = Clock::now();
  RunResult result;
  result.record.method = "finetune";
  ModelParameters params = initial;
  for (std::size_t epoch = 1; epoch <= cfg.max_unlearn_epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    double ce_sum = 0.0;
    for (const auto& b : batches(task.remain_train, cfg.batch_size, epoch_seed(cfg.seed, epoch))) {
      const double ce = ce_step(params, b, cfg.learning_rate, 1.0);
      if (!std::isfinite(ce)) throw DivergenceError("non-finite finetune loss at epoch " + std::to_string(epoch));
      ce_sum += ce;
      ++m.steps;
    }
    m.mean_ce = ce_sum / static_cast<double>(m.steps);
    m.mean_total = m.mean_ce;
    result.record.batches_processed += m.steps;
    const bool done = epoch % cfg.eval_every == 0 && evaluate_termination(params, task, m);
    result.record.epochs.push_back(m);
    if (done) {
      result.record.reason = TerminationReason::kConditionMet;
      result.params = std::move(params);
      result.record.duration_seconds = seconds_since(start);
      return result;
    }
  }
  result.record.reason = TerminationReason::kEpochCap;
  result.params = std::move(params);
  result.record.duration_seconds = seconds_since(start);
  return result;
}

RunResult unlearn_neggrad(const ModelParameters& initial, const UnlearnTask& task, const EngineConfig& cfg) {
  cfg.validate();
  require_compatible(initial, task);
  const auto start = Clock::now();
  RunResult result;
  result.record.method = "neggrad";
  ModelParameters params = initial;
  const double ce_cap = cfg.neggrad_ce_cap_factor * std::log(static_cast<double>(task.num_classes()));

  auto finish = [&](TerminationReason reason, std::string detail) {
    result.record.reason = reason;
    result.record.detail = std::move(detail);
    result.params = std::move(params);
    result.record.duration_seconds = seconds_since(start);
    return std::move(result);
  };

  for (std::size_t epoch = 1; epoch <= cfg.max_unlearn_epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    double ce_sum = 0.0;
    for (const auto& b :
         batches(task.unlearn_train, cfg.batch_size, epoch_seed(cfg.seed, epoch), false, BatchSource::kUnlearn)) {
      double ce = 0.0;
      try {
        ce = ce_step(params, b, cfg.learning_rate, -1.0);
      } catch (const NumericError& e) {
        result.record.epochs.push_back(m);
        return finish(TerminationReason::kError, std::string("divergence: ") + e.what());
      }
      ce_sum += ce;
      ++m.steps;
    }
    m.mean_ce = ce_sum / static_cast<double>(m.steps);
    m.mean_total = -m.mean_ce;
    result.record.batches_processed += m.steps;

    m.eval_unlearn_ce = mean_cross_entropy(params, task.eval_unlearn);
    if (!std::isfinite(*m.eval_unlearn_ce) || *m.eval_unlearn_ce > ce_cap) {
      result.record.epochs.push_back(m);
      return finish(TerminationReason::kError, "divergence guard: CE on unlearning eval set " +
                                                   std::to_string(*m.eval_unlearn_ce) + " exceeds cap " +
                                                   std::to_string(ce_cap));
    }
    const bool done = epoch % cfg.eval_every == 0 && evaluate_termination(params, task, m);
    result.record.epochs.push_back(m);
    if (done) return finish(TerminationReason::kConditionMet, "");
  }
  return finish(TerminationReason::kEpochCap, "");
}

}  // namespace culab
