#pragma once

#include <span>
#include <vector>

#include "culab/autodiff.h"

namespace culab {

enum class LossVariant { kSample, kClass };

struct LossConfig {
  double temperature = 0.5;
  double lambda_ul = 1.0;
  double lambda_ce = 1.0;
  LossVariant variant = LossVariant::kSample;

  void validate() const;
};

// Positives and negatives for one anchor, as row indices into the remaining
// batch.
struct AnchorSets {
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
};

struct ContrastSets {
  std::vector<AnchorSets> anchors;
  ad::Var anchor_embeddings;     // [|X^u| x d]
  ad::Var remaining_embeddings;  // [|X^r| x d]
};

// Partitions the remaining batch for each anchor by label equality.
ContrastSets build_contrast_sets(std::span<const int> anchor_labels, ad::Var anchor_embeddings,
                                 std::span<const int> remaining_labels, ad::Var remaining_embeddings);

// Sample-unlearning contrastive loss. For each anchor i with non-empty
// positive set P and negative set N:
//   -1/|N| * sum_{a in N} log( exp(z_i.z_a/tau) / sum_{p in P} exp(z_i.z_p/tau) )
// summed over anchors. Anchors with an empty P or N are skipped. Throws
// NoValidAnchorError if every anchor is skipped.
ad::Var loss_ul_sample(const ContrastSets& sets, double temperature);

// Class-unlearning contrastive loss; the positive-set denominator is
// replaced by the constant |N|:
//   -1/|N| * sum_{a in N} log( exp(z_i.z_a/tau) / |N| )
ad::Var loss_ul_class(const ContrastSets& sets, double temperature);

ad::Var loss_ul(const ContrastSets& sets, const LossConfig& cfg);

// Number of anchors that contribute to the loss for the given variant.
std::size_t valid_anchor_count(const ContrastSets& sets, LossVariant variant);

// Mean cross-entropy of integer labels under row-softmax of logits.
ad::Var loss_ce(ad::Var logits, std::span<const int> labels);

ad::Var loss_combined(ad::Var ul, ad::Var ce, const LossConfig& cfg);

}  // namespace culab
