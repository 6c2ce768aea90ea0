#include "culab/losses.h"

#include <cmath>
#include <string>

#include "culab/error.h"

namespace culab {

void LossConfig::validate() const {
  std::vector<std::string> problems;
  if (!(temperature > 0.0) || !std::isfinite(temperature)) problems.push_back("loss.temperature must be > 0");
  if (!(lambda_ul >= 0.0)) problems.push_back("loss.lambda_ul must be >= 0");
  if (!(lambda_ce >= 0.0)) problems.push_back("loss.lambda_ce must be >= 0");
  if (!(lambda_ul + lambda_ce > 0.0)) problems.push_back("loss.lambda_ul + loss.lambda_ce must be > 0");
  if (!problems.empty()) {
    std::string msg = "invalid loss config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ValidationError(msg);
  }
}

ContrastSets build_contrast_sets(std::span<const int> anchor_labels, ad::Var anchor_embeddings,
                                 std::span<const int> remaining_labels, ad::Var remaining_embeddings) {
  if (anchor_embeddings.value().rows() != anchor_labels.size() ||
      remaining_embeddings.value().rows() != remaining_labels.size()) {
    throw DimensionError("build_contrast_sets: label counts do not match embedding rows");
  }
  if (anchor_embeddings.value().cols() != remaining_embeddings.value().cols()) {
    throw DimensionError("build_contrast_sets: anchor " + shape_string(anchor_embeddings.shape()) +
                         " and remaining " + shape_string(remaining_embeddings.shape()) +
                         " embeddings differ in width");
  }
  ContrastSets sets;
  sets.anchor_embeddings = anchor_embeddings;
  sets.remaining_embeddings = remaining_embeddings;
  sets.anchors.resize(anchor_labels.size());
  for (std::size_t i = 0; i < anchor_labels.size(); ++i) {
    for (std::size_t j = 0; j < remaining_labels.size(); ++j) {
      (remaining_labels[j] == anchor_labels[i] ? sets.anchors[i].positives : sets.anchors[i].negatives).push_back(j);
    }
  }
  return sets;
}

std::size_t valid_anchor_count(const ContrastSets& sets, LossVariant variant) {
  std::size_t n = 0;
  for (const auto& a : sets.anchors) {
    if (a.negatives.empty()) continue;
    if (variant == LossVariant::kSample && a.positives.empty()) continue;
    ++n;
  }
  return n;
}

namespace {

// Scaled similarity matrix S = Z_u Z_r^T / tau, [|X^u| x |X^r|].
ad::Var similarities(const ContrastSets& sets, double temperature) {
  return ad::scale(ad::matmul(sets.anchor_embeddings, ad::transpose(sets.remaining_embeddings)), 1.0 / temperature);
}

}  // namespace

ad::Var loss_ul_sample(const ContrastSets& sets, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("temperature must be > 0");
  if (valid_anchor_count(sets, LossVariant::kSample) == 0) {
    throw NoValidAnchorError("no anchor has both positives and negatives in the remaining batch");
  }
  ad::Var s = similarities(sets, temperature);
  const std::size_t m = s.value().rows(), n = s.value().cols();
  // Per anchor: -(1/|N|) sum_N s_ia + logsumexp_P s_ip
  Tensor neg_weights({m, n});
  Tensor pos_mask({m, n});
  Tensor anchor_mask({m, 1});
  for (std::size_t i = 0; i < m; ++i) {
    const auto& a = sets.anchors[i];
    if (a.negatives.empty() || a.positives.empty()) continue;
    const double w = -1.0 / static_cast<double>(a.negatives.size());
    for (auto j : a.negatives) neg_weights(i, j) = w;
    for (auto j : a.positives) pos_mask(i, j) = 1.0;
    anchor_mask(i, 0) = 1.0;
  }
  ad::Var neg_term = ad::weighted_sum(s, neg_weights);
  ad::Var pos_term = ad::weighted_sum(ad::row_logsumexp(s, pos_mask), anchor_mask);
  return ad::add(neg_term, pos_term);
}

ad::Var loss_ul_class(const ContrastSets& sets, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("temperature must be > 0");
  if (valid_anchor_count(sets, LossVariant::kClass) == 0) {
    throw NoValidAnchorError("no anchor has negatives in the remaining batch");
  }
  ad::Var s = similarities(sets, temperature);
  const std::size_t m = s.value().rows(), n = s.value().cols();
  // Per anchor: -(1/|N|) sum_N s_ia + log|N|; the log|N| term is constant.
  Tensor neg_weights({m, n});
  double constant = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const auto& a = sets.anchors[i];
    if (a.negatives.empty()) continue;
    const double w = -1.0 / static_cast<double>(a.negatives.size());
    for (auto j : a.negatives) neg_weights(i, j) = w;
    constant += std::log(static_cast<double>(a.negatives.size()));
  }
  ad::Var neg_term = ad::weighted_sum(s, neg_weights);
  return ad::add(neg_term, s.tape().constant(Tensor::scalar(constant)));
}

ad::Var loss_ul(const ContrastSets& sets, const LossConfig& cfg) {
  return cfg.variant == LossVariant::kClass ? loss_ul_class(sets, cfg.temperature)
                                            : loss_ul_sample(sets, cfg.temperature);
}

ad::Var loss_ce(ad::Var logits, std::span<const int> labels) {
  const Tensor& x = logits.value();
  const std::size_t m = x.rows(), c = x.cols();
  if (labels.size() != m) {
    throw DimensionError("loss_ce: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_string(logits.shape()));
  }
  Tensor pick({m, c});
  const double inv = 1.0 / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw ValidationError("loss_ce: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(c) + ")");
    }
    pick(i, static_cast<std::size_t>(labels[i])) = -inv;
  }
  // mean_i [ logsumexp(x_i) - x_{i,y_i} ]; row_logsumexp subtracts the row max.
  ad::Var lse = ad::weighted_sum(ad::row_logsumexp(logits), Tensor({m, 1}, inv));
  return ad::add(lse, ad::weighted_sum(logits, pick));
}

ad::Var loss_combined(ad::Var ul, ad::Var ce, const LossConfig& cfg) {
  return ad::add(ad::scale(ul, cfg.lambda_ul), ad::scale(ce, cfg.lambda_ce));
}

}  // namespace culab
