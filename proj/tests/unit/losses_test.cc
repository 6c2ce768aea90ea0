#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "culab/error.h"
#include "culab/losses.h"
#include "support/oracles.h"

namespace culab {
namespace {

using testing::finite_difference;
using testing::max_relative_error;
using testing::naive_ce;
using testing::naive_ul_class;
using testing::naive_ul_sample;
using testing::random_labels;
using testing::random_tensor;
using testing::unit_rows;

double ul_value(const Tensor& za, const std::vector<int>& la, const Tensor& zr, const std::vector<int>& lr,
                LossVariant variant, double tau) {
  ad::Tape tape;
  const auto sets = build_contrast_sets(la, tape.input(za), lr, tape.input(zr));
  return variant == LossVariant::kSample ? loss_ul_sample(sets, tau).value().item()
                                         : loss_ul_class(sets, tau).value().item();
}

Tensor rows_of(std::initializer_list<std::initializer_list<double>> rows) { return Tensor::matrix(rows); }

TEST(ContrastSets, PartitionByLabel) {
  ad::Tape tape;
  const auto sets = build_contrast_sets(std::vector<int>{1}, tape.input(Tensor({1, 2})), std::vector<int>{1, 1, 2},
                                        tape.input(Tensor({3, 2})));
  ASSERT_EQ(sets.anchors.size(), 1u);
  EXPECT_EQ(sets.anchors[0].positives, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(sets.anchors[0].negatives, (std::vector<std::size_t>{2}));
}

TEST(ContrastSets, NoMatchingLabelGivesEmptyPositives) {
  ad::Tape tape;
  const auto sets = build_contrast_sets(std::vector<int>{0}, tape.input(Tensor({1, 2})), std::vector<int>{1, 2, 3},
                                        tape.input(Tensor({3, 2})));
  EXPECT_TRUE(sets.anchors[0].positives.empty());
  EXPECT_EQ(sets.anchors[0].negatives.size(), 3u);
}

TEST(ContrastSets, EveryAnchorPartitionsTheWholeBatch) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto la = random_labels(rng, 6, 3);
    const auto lr = random_labels(rng, 8, 3);
    ad::Tape tape;
    const auto sets = build_contrast_sets(la, tape.input(Tensor({6, 4})), lr, tape.input(Tensor({8, 4})));
    for (std::size_t i = 0; i < la.size(); ++i) {
      const auto& a = sets.anchors[i];
      EXPECT_EQ(a.positives.size() + a.negatives.size(), lr.size());
      std::vector<std::size_t> all = a.positives;
      all.insert(all.end(), a.negatives.begin(), a.negatives.end());
      std::sort(all.begin(), all.end());
      std::vector<std::size_t> want(lr.size());
      std::iota(want.begin(), want.end(), 0);
      EXPECT_EQ(all, want);
      for (auto p : a.positives) EXPECT_EQ(lr[p], la[i]);
      for (auto n : a.negatives) EXPECT_NE(lr[n], la[i]);
    }
  }
}

TEST(ContrastSets, WidthMismatchIsDimensionError) {
  ad::Tape tape;
  EXPECT_THROW(build_contrast_sets(std::vector<int>{0}, tape.input(Tensor({1, 3})), std::vector<int>{0},
                                   tape.input(Tensor({1, 4}))),
               DimensionError);
  EXPECT_THROW(build_contrast_sets(std::vector<int>{0, 1}, tape.input(Tensor({1, 3})), std::vector<int>{0},
                                   tape.input(Tensor({1, 3}))),
               DimensionError);
}

TEST(SampleLoss, PositiveAlignedNegativeOrthogonal) {
  const Tensor za = rows_of({{1, 0}});
  const Tensor zr = rows_of({{1, 0}, {0, 1}});
  EXPECT_NEAR(ul_value(za, {0}, zr, {0, 1}, LossVariant::kSample, 1.0), 1.0, 1e-15);
}

TEST(SampleLoss, EqualSimilaritiesGiveZero) {
  for (double s : {-0.7, 0.0, 0.3, 1.0}) {
    for (double tau : {0.1, 0.5, 2.0}) {
      const Tensor za = rows_of({{1, 0}});
      const Tensor zr = rows_of({{s, std::sqrt(1 - s * s)}, {s, -std::sqrt(1 - s * s)}});
      EXPECT_NEAR(ul_value(za, {0}, zr, {0, 1}, LossVariant::kSample, tau), 0.0, 1e-12) << s << " " << tau;
    }
  }
}

TEST(SampleLoss, TemperatureScalesPairDifference) {
  const Tensor za = rows_of({{1, 0}});
  const Tensor zr = rows_of({{0.8, 0.6}, {0.6, -0.8}});
  const double sp = 0.8, sn = 0.6;
  double prev = 1e300;
  for (double tau : {0.1, 0.25, 0.5, 1.0, 4.0}) {
    const double v = ul_value(za, {0}, zr, {0, 1}, LossVariant::kSample, tau);
    EXPECT_NEAR(v, (sp - sn) / tau, 1e-12);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(ClassLoss, ClosedForms) {
  const Tensor za = rows_of({{1, 0, 0}});
  EXPECT_NEAR(ul_value(za, {0}, rows_of({{0, 1, 0}}), {1}, LossVariant::kClass, 1.0), 0.0, 1e-15);
  EXPECT_NEAR(ul_value(za, {0}, rows_of({{0, 1, 0}, {0, 0, 1}}), {1, 2}, LossVariant::kClass, 1.0), std::log(2.0),
              1e-15);
  EXPECT_NEAR(ul_value(za, {0}, rows_of({{1, 0, 0}}), {1}, LossVariant::kClass, 1.0), -1.0, 1e-15);
}

TEST(ClassLoss, IgnoresPositives) {
  const Tensor za = rows_of({{1, 0, 0}});
  const double without = ul_value(za, {0}, rows_of({{0, 1, 0}}), {1}, LossVariant::kClass, 1.0);
  const double with = ul_value(za, {0}, rows_of({{0, 1, 0}, {1, 0, 0}}), {1, 0}, LossVariant::kClass, 1.0);
  EXPECT_EQ(without, with);
}

struct RandomBatch {
  Tensor za, zr;
  std::vector<int> la, lr;
};

RandomBatch random_batch(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> b(1, 8), d(2, 16);
  std::uniform_int_distribution<int> c(2, 4);
  const std::size_t nb = b(rng), nr = b(rng) + 1, dim = d(rng);
  const int classes = c(rng);
  return {unit_rows(rng, nb, dim), unit_rows(rng, nr, dim), random_labels(rng, nb, classes),
          random_labels(rng, nr, classes)};
}

TEST(Losses, MatchNaiveDoubleLoopOracle) {
  std::mt19937_64 rng(2024);
  int checked_sample = 0, checked_class = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto r = random_batch(rng);
    for (double tau : {0.1, 0.5, 1.0}) {
      const double want_s = naive_ul_sample(r.za, r.la, r.zr, r.lr, tau);
      try {
        EXPECT_NEAR(ul_value(r.za, r.la, r.zr, r.lr, LossVariant::kSample, tau), want_s, 1e-9);
        ++checked_sample;
      } catch (const NoValidAnchorError&) {
        EXPECT_EQ(want_s, 0.0);
      }
      const double want_c = naive_ul_class(r.za, r.la, r.zr, r.lr, tau);
      try {
        EXPECT_NEAR(ul_value(r.za, r.la, r.zr, r.lr, LossVariant::kClass, tau), want_c, 1e-9);
        ++checked_class;
      } catch (const NoValidAnchorError&) {
        EXPECT_EQ(want_c, 0.0);
      }
    }
  }
  EXPECT_GE(checked_sample, 300);
  EXPECT_GE(checked_class, 400);
}

TEST(SampleLoss, GradientSignsOnPairSimilarities) {
  ad::Tape tape;
  const Tensor za = rows_of({{1, 0}});
  const Tensor zr = rows_of({{0.6, 0.8}, {0.0, 1.0}});
  ad::Var a = tape.input(za), r = tape.input(zr);
  const auto sets = build_contrast_sets(std::vector<int>{0}, a, std::vector<int>{0, 1}, r);
  ad::Var loss = loss_ul_sample(sets, 0.5);
  const auto grads = tape.grad(loss, std::vector<ad::Var>{r});
  // dL/dz_p = (dL/ds_p) z_i / tau and dL/dz_n = (dL/ds_n) z_i / tau, so the
  // component along z_i carries the sign of the similarity derivative.
  EXPECT_GT(grads[0](0, 0), 0.0);
  EXPECT_LT(grads[0](1, 0), 0.0);
  EXPECT_EQ(grads[0](0, 1), 0.0);
  EXPECT_EQ(grads[0](1, 1), 0.0);
}

TEST(Losses, PermutationInvariant) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    auto r = random_batch(rng);
    std::vector<std::size_t> pa(r.la.size()), pr(r.lr.size());
    std::iota(pa.begin(), pa.end(), 0);
    std::iota(pr.begin(), pr.end(), 0);
    std::shuffle(pa.begin(), pa.end(), rng);
    std::shuffle(pr.begin(), pr.end(), rng);
    std::vector<int> la2, lr2;
    for (auto i : pa) la2.push_back(r.la[i]);
    for (auto i : pr) lr2.push_back(r.lr[i]);
    const Tensor za2 = r.za.select_rows(pa), zr2 = r.zr.select_rows(pr);
    for (auto variant : {LossVariant::kSample, LossVariant::kClass}) {
      try {
        const double base = ul_value(r.za, r.la, r.zr, r.lr, variant, 0.5);
        EXPECT_NEAR(ul_value(za2, la2, zr2, lr2, variant, 0.5), base, 1e-12);
      } catch (const NoValidAnchorError&) {
        EXPECT_THROW(ul_value(za2, la2, zr2, lr2, variant, 0.5), NoValidAnchorError);
      }
    }
  }
}

TEST(Losses, ExcludedAnchorsContributeZero) {
  // Class variant: an anchor whose label fills the whole batch has no negatives.
  const Tensor two = rows_of({{0.8, 0.6}, {0.6, 0.8}});
  const Tensor same = rows_of({{1, 0}, {0.6, 0.8}});
  const double alone = ul_value(rows_of({{0.8, 0.6}}), {1}, same, {0, 0}, LossVariant::kClass, 0.5);
  const double padded = ul_value(two, {1, 0}, same, {0, 0}, LossVariant::kClass, 0.5);
  EXPECT_TRUE(std::isfinite(padded));
  EXPECT_EQ(padded, alone);

  // Sample variant: an anchor whose label is absent from the batch has no positives.
  const Tensor zr = rows_of({{1, 0}, {0, 1}, {0.6, 0.8}});
  const std::vector<int> lr{0, 1, 0};
  const double s_alone = ul_value(rows_of({{0.8, 0.6}}), {0}, zr, lr, LossVariant::kSample, 0.5);
  const double s_padded = ul_value(two, {0, 3}, zr, lr, LossVariant::kSample, 0.5);
  EXPECT_EQ(s_padded, s_alone);

  const Tensor one = rows_of({{0.8, 0.6}});
  EXPECT_THROW(ul_value(one, {0}, rows_of({{1, 0}}), {0}, LossVariant::kClass, 0.5), NoValidAnchorError);
  EXPECT_THROW(ul_value(one, {0}, rows_of({{1, 0}}), {0}, LossVariant::kSample, 0.5), NoValidAnchorError);
  EXPECT_THROW(ul_value(one, {0}, rows_of({{1, 0}}), {1}, LossVariant::kSample, 0.5), NoValidAnchorError);
}

TEST(Losses, ValidAnchorCount) {
  ad::Tape tape;
  const auto sets = build_contrast_sets(std::vector<int>{0, 1, 2}, tape.input(Tensor({3, 2})),
                                        std::vector<int>{0, 0, 1}, tape.input(Tensor({3, 2})));
  EXPECT_EQ(valid_anchor_count(sets, LossVariant::kSample), 2u);
  EXPECT_EQ(valid_anchor_count(sets, LossVariant::kClass), 3u);
}

double ce_value(const Tensor& logits, const std::vector<int>& labels) {
  ad::Tape tape;
  return loss_ce(tape.input(logits), labels).value().item();
}

TEST(CrossEntropy, UniformLogits) {
  EXPECT_NEAR(ce_value(Tensor({3, 4}, 0.7), {0, 1, 3}), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, SaturatesNearZero) {
  Tensor logits({2, 3});
  logits(0, 1) = 30.0;
  logits(1, 2) = 30.0;
  const double v = ce_value(logits, {1, 2});
  EXPECT_GE(v, 0.0);
  EXPECT_LT(v, 1e-12);
}

TEST(CrossEntropy, StableForHugeLogits) {
  Tensor logits({1, 3});
  logits(0, 0) = 1000.0;
  logits(0, 1) = 999.0;
  EXPECT_NEAR(ce_value(logits, {1}), 1.0 + std::log(1.0 + std::exp(-1.0) + std::exp(-1000.0)), 1e-12);
}

TEST(CrossEntropy, MatchesDirectFormula) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + trial % 9, c = 2 + trial % 5;
    const Tensor logits = random_tensor(rng, {m, c}, -5, 5);
    const auto labels = random_labels(rng, m, static_cast<int>(c));
    EXPECT_NEAR(ce_value(logits, labels), naive_ce(logits, labels), 1e-10);
  }
}

TEST(CrossEntropy, RejectsBadLabels) {
  EXPECT_THROW(ce_value(Tensor({2, 3}), {0, 3}), ValidationError);
  EXPECT_THROW(ce_value(Tensor({2, 3}), {0}), DimensionError);
}

TEST(Combined, WeightedSum) {
  ad::Tape tape;
  ad::Var ul = tape.input(Tensor::scalar(2.0)), ce = tape.input(Tensor::scalar(3.0));
  LossConfig cfg;
  cfg.lambda_ul = 1.0;
  cfg.lambda_ce = 1.0;
  EXPECT_EQ(loss_combined(ul, ce, cfg).value().item(), 5.0);
  cfg.lambda_ce = 0.0;
  cfg.lambda_ul = 0.7;
  EXPECT_EQ(loss_combined(ul, ce, cfg).value().item(), 0.7 * 2.0);
  cfg.lambda_ul = 0.0;
  cfg.lambda_ce = 0.3;
  EXPECT_EQ(loss_combined(ul, ce, cfg).value().item(), 0.3 * 3.0);
}

TEST(LossConfig, Validation) {
  LossConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.temperature = 0.0;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = {};
  cfg.lambda_ul = 0.0;
  cfg.lambda_ce = 0.0;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg.lambda_ul = -1.0;
  EXPECT_THROW(cfg.validate(), ValidationError);
}

// Gradient checks run through row normalization so the embeddings stay on
// the unit sphere as they would inside the model.
struct GradCase {
  Tensor ua, ur, logits;
  std::vector<int> la, lr;
};

GradCase grad_case(std::mt19937_64& rng) {
  GradCase g;
  for (;;) {
    const auto r = random_batch(rng);
    g.ua = random_tensor(rng, r.za.shape(), -1, 1);
    g.ur = random_tensor(rng, r.zr.shape(), -1, 1);
    g.la = r.la;
    g.lr = r.lr;
    ad::Tape tape;
    const auto sets = build_contrast_sets(g.la, tape.input(g.ua), g.lr, tape.input(g.ur));
    if (valid_anchor_count(sets, LossVariant::kSample) > 0) break;
  }
  g.logits = random_tensor(rng, {g.lr.size(), 3}, -3, 3);
  return g;
}

enum class Objective { kSample, kClass, kCe, kCombined };

double objective(const GradCase& g, Objective which, const Tensor& ua, const Tensor& ur, const Tensor& logits,
                 std::vector<Tensor>* grads) {
  ad::Tape tape;
  ad::Var a = tape.input(ua), r = tape.input(ur), l = tape.input(logits);
  const auto sets = build_contrast_sets(g.la, ad::l2_normalize_rows(a), g.lr, ad::l2_normalize_rows(r));
  ad::Var out;
  LossConfig cfg;
  cfg.lambda_ul = 0.3;
  cfg.lambda_ce = 1.7;
  std::vector<int> ce_labels(g.lr.size());
  for (std::size_t i = 0; i < g.lr.size(); ++i) ce_labels[i] = g.lr[i] % 3;
  switch (which) {
    case Objective::kSample: out = loss_ul_sample(sets, 0.5); break;
    case Objective::kClass: out = loss_ul_class(sets, 0.5); break;
    case Objective::kCe: out = loss_ce(l, ce_labels); break;
    case Objective::kCombined: out = loss_combined(loss_ul_sample(sets, 0.5), loss_ce(l, ce_labels), cfg); break;
  }
  if (grads) *grads = tape.grad(out, std::vector<ad::Var>{a, r, l});
  return out.value().item();
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 25; ++trial) {
    const GradCase g = grad_case(rng);
    for (auto which : {Objective::kSample, Objective::kClass, Objective::kCe, Objective::kCombined}) {
      std::vector<Tensor> analytic;
      objective(g, which, g.ua, g.ur, g.logits, &analytic);
      const Tensor fa = finite_difference([&](const Tensor& x) { return objective(g, which, x, g.ur, g.logits, nullptr); }, g.ua);
      const Tensor fr = finite_difference([&](const Tensor& x) { return objective(g, which, g.ua, x, g.logits, nullptr); }, g.ur);
      const Tensor fl = finite_difference([&](const Tensor& x) { return objective(g, which, g.ua, g.ur, x, nullptr); }, g.logits);
      EXPECT_LE(max_relative_error(analytic[0], fa, 1e-6), 1e-4) << "trial " << trial;
      EXPECT_LE(max_relative_error(analytic[1], fr, 1e-6), 1e-4) << "trial " << trial;
      EXPECT_LE(max_relative_error(analytic[2], fl, 1e-6), 1e-4) << "trial " << trial;
    }
  }
}

}  // namespace
}  // namespace culab
