#include "support.hpp"

#include "exagree/audit.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace exagree;
using exagree::testing::synth_task;
using exagree::testing::two_feature_task;

// --- attribution ------------------------------------------------------------

TEST(Attribution, RankOfExamples) {
  EXPECT_EQ(rank_of(from_std({0.9, -0.5, 0.1})).ranks, (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(rank_of(from_std({0.5, 0.5})).ranks, (std::vector<int>{1, 2}));
  EXPECT_EQ(rank_of(from_std({-0.1, 0.7, 0.3})).ranks, (std::vector<int>{3, 1, 2}));
  const Ranking flat = rank_of(from_std({0.2, -0.2, 0.2}));
  EXPECT_EQ(flat.ranks, (std::vector<int>{1, 2, 3}));
  EXPECT_TRUE(flat.degenerate);
  EXPECT_FALSE(rank_of(from_std({0.2, 0.1})).degenerate);
}

TEST(Attribution, RankingOrderRoundTrip) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const Ranking r = exagree::testing::random_ranking(9, rng);
    EXPECT_TRUE(is_permutation(r.ranks));
    EXPECT_EQ(Ranking::from_order(r.order()).ranks, r.ranks);
    // Magnitudes p+1-rank reproduce the ranking.
    Vector mag(9);
    for (int j = 0; j < 9; ++j) mag[j] = 10.0 - r.ranks[static_cast<std::size_t>(j)];
    EXPECT_EQ(rank_of(mag).ranks, r.ranks);
  }
}

TEST(Attribution, GroundTruthIsCoefficients) {
  const LinearModel m{from_std({2, -1, 0.5}), 0.0};
  const AttributionVector gt = ground_truth_lr(m);
  EXPECT_EQ(gt.values, m.weights);
  EXPECT_EQ(rank_of(gt).ranks, (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(rank_of(ground_truth_lr({from_std({1, -1, 1}), 0.0})).ranks, (std::vector<int>{1, 2, 3}));
  EXPECT_TRUE(rank_of(ground_truth_lr({Vector::Zero(3), 0.0})).degenerate);
}

TEST(Attribution, PermutationFisOnLinearModels) {
  const auto pos = two_feature_task(3.0, 0.0);
  const AttributionVector a = permutation_fis(pos.lr, pos.val, 5, 1);
  EXPECT_GT(std::abs(a.values[0]), std::abs(a.values[1]));
  EXPECT_GT(a.values[0], 0.0);

  const auto neg = two_feature_task(-3.0, 0.0);
  const AttributionVector b = permutation_fis(neg.lr, neg.val, 5, 1);
  EXPECT_LT(b.values[0], 0.0);
  EXPECT_THROW(permutation_fis(neg.lr, neg.val, 0, 1), Error);
}

TEST(Attribution, SignsFollowLinearCoefficients) {
  const auto& t = synth_task();
  const AttributionVector a = permutation_fis(t.lr, t.val, 5, 2);
  for (Index j = 0; j < t.lr.p(); ++j)
    if (t.lr.weights[j] != 0.0 && a.values[j] != 0.0) EXPECT_EQ(a.values[j] > 0, t.lr.weights[j] > 0) << "feature " << j;
}

TEST(Attribution, MaskedOutFeatureHasZeroImportance) {
  const auto& t = synth_task();
  const MlpModel mlp = train_mlp(t.ds, t.sp, {8, 16}, {0.1, 300, 5});
  for (Index j : {Index{0}, Index{3}, Index{7}}) {
    Vector mask = ones(8);
    mask[j] = 0.0;
    EXPECT_EQ(permutation_fis(Masked<LinearModel>(t.lr, mask), t.val, 3, 4).values[j], 0.0);
    EXPECT_EQ(permutation_fis(Masked<MlpModel>(mlp, mask), t.val, 3, 4).values[j], 0.0);
  }
}

TEST(Attribution, PermutationFisIsDeterministic) {
  const auto& t = synth_task();
  EXPECT_EQ(permutation_fis(t.lr, t.val, 3, 8).values, permutation_fis(t.lr, t.val, 3, 8).values);
  EXPECT_NE(permutation_fis(t.lr, t.val, 3, 8).values, permutation_fis(t.lr, t.val, 3, 9).values);
}

TEST(Attribution, BaselinesOnLinearModel) {
  const auto& t = synth_task();
  BaselineParams bp;
  const Vector mean_x = t.val.X.colwise().mean().transpose();

  EXPECT_TRUE(explain_baseline(BaselineKind::vanilla_grad, t.lr, t.val, bp, 0).values.isApprox(t.lr.weights, 1e-12));
  const Vector ig = explain_baseline(BaselineKind::integrated_gradients, t.lr, t.val, bp, 0).values;
  EXPECT_TRUE(ig.isApprox(t.lr.weights.cwiseProduct(mean_x), 1e-9));
  const Vector gxi = explain_baseline(BaselineKind::grad_x_input, t.lr, t.val, bp, 0).values;
  EXPECT_TRUE(gxi.isApprox(ig, 1e-9));
  // Noise on the input does not change a linear gradient.
  EXPECT_TRUE(explain_baseline(BaselineKind::smoothgrad, t.lr, t.val, bp, 4).values.isApprox(t.lr.weights, 1e-12));

  const Vector r1 = explain_baseline(BaselineKind::random, t.lr, t.val, bp, 17).values;
  EXPECT_EQ(r1, explain_baseline(BaselineKind::random, t.lr, t.val, bp, 17).values);
  EXPECT_NE(r1, explain_baseline(BaselineKind::random, t.lr, t.val, bp, 18).values);
  EXPECT_THROW(baseline_from_string("lime"), Error);
}

TEST(Attribution, IntegratedGradientsCompletenessForLinearLogit) {
  const auto& t = synth_task();
  for (Index i = 0; i < 20; ++i) {
    const Vector x = t.val.X.row(i).transpose();
    const Vector ig = integrated_gradients(t.lr, x, 50);
    EXPECT_NEAR(ig.sum(), t.lr.logit(x) - t.lr.logit(Vector::Zero(x.size())), 1e-9);
  }
}

TEST(Attribution, IntegratedGradientsOnMlpApproachesCompleteness) {
  const auto& t = synth_task();
  const MlpModel m = train_mlp(t.ds, t.sp, {8, 16}, {0.1, 300, 5});
  const Vector x = t.val.X.row(0).transpose();
  const Vector ig = integrated_gradients(m, x, 2000);
  EXPECT_NEAR(ig.sum(), m.logits(x.transpose())[0] - m.logits(Vector::Zero(8).transpose())[0], 1e-2);
}

TEST(Attribution, AttributionDatasetRowsAlign) {
  const auto& t = synth_task();
  ASSERT_EQ(t.datt.masks.rows(), t.sample.size());
  EXPECT_EQ(t.datt.masks, t.sample.masks);
  EXPECT_TRUE(t.datt.attributions.allFinite());
  EXPECT_EQ(Vector(t.datt.attributions.row(0).transpose()), permutation_fis(t.lr, t.val, 5, 14).values);
  for (Index i = 1; i < 6; ++i) {
    const Masked<LinearModel> m(t.lr, t.sample.masks.row(i).transpose());
    EXPECT_EQ(Vector(t.datt.attributions.row(i).transpose()), permutation_fis(m, t.val, 5, 14).values);
  }
}

TEST(Attribution, AttributionDatasetZeroMaskColumn) {
  const auto& t = synth_task();
  RashomonSample s;
  s.masks = Matrix::Ones(3, 8);
  s.masks(1, 2) = 0.0;
  s.masks(2, 5) = 0.0;
  const AttributionDataset d = build_attribution_dataset(s, t.lr, t.val, 2, 1, RowSeeding::per_row);
  EXPECT_EQ(d.attributions(1, 2), 0.0);
  EXPECT_EQ(d.attributions(2, 5), 0.0);
}

TEST(Attribution, ExplainerRegistryCoversAll) {
  const auto& t = synth_task();
  const ReferenceModel ref = t.lr;
  for (const auto& name : explainer_names()) {
    const AttributionVector a = explain(name, ref, t.val, {});
    EXPECT_EQ(a.method, name);
    EXPECT_EQ(a.size(), 8);
    EXPECT_TRUE(a.values.allFinite());
  }
}

// --- rashomon ---------------------------------------------------------------

TEST(Rashomon, BoundExamples) {
  EXPECT_NEAR(rashomon_bound(0.40, 0.05), 0.42, 1e-15);
  EXPECT_EQ(rashomon_bound(0.37, 0.0), 0.37);
  EXPECT_EQ(rashomon_bound(0.0, 0.05), 0.0);
  EXPECT_THROW(rashomon_bound(0.4, -0.01), Error);
}

TEST(Rashomon, IdentityRowAndMembershipSoundness) {
  const auto& t = synth_task();
  const RashomonSample& s = t.sample;
  const double lstar = model_loss(t.lr, t.val.X, t.val.y);
  EXPECT_EQ(Vector(s.masks.row(0).transpose()), ones(8));
  EXPECT_EQ(s.losses[0], lstar);
  EXPECT_EQ(s.bound, rashomon_bound(lstar, 0.05));
  EXPECT_EQ(s.size(), 200);
  EXPECT_FALSE(s.partial);
  for (Index i = 0; i < s.size(); ++i) {
    const Vector m = s.masks.row(i).transpose();
    EXPECT_LE(masked_loss(t.lr, m, t.val), s.bound + kMembershipSlack) << "row " << i;
    EXPECT_TRUE(is_in_rashomon(m, t.lr, t.val, s.bound));
    EXPECT_GE(m.minCoeff(), 0.0);
    EXPECT_LE(m.maxCoeff(), 2.0);
  }
  // Boundary line search pushes masks near the bound.
  int near = 0;
  for (Index i = 1; i < s.size(); ++i) near += s.losses[i] >= 0.95 * s.bound;
  EXPECT_GT(near, s.size() / 2);
}

TEST(Rashomon, MembershipExamples) {
  const auto& t = synth_task();
  EXPECT_TRUE(is_in_rashomon(ones(8), t.lr, t.val, t.sample.bound));
  EXPECT_FALSE(is_in_rashomon(Vector::Zero(8), t.lr, t.val, t.sample.bound));
  EXPECT_TRUE(is_in_rashomon(Vector(t.sample.masks.row(17).transpose()), t.lr, t.val, t.sample.bound));
  EXPECT_THROW(is_in_rashomon(ones(7), t.lr, t.val, t.sample.bound), Error);
}

TEST(Rashomon, EpsilonZeroRejectsAlmostEverything) {
  const auto& t = synth_task();
  RashomonConfig rc;
  rc.epsilon = 0.0;
  rc.exploration = Exploration::rejection;
  rc.n_samples = 200;
  rc.max_attempts = 400;
  rc.seed = 3;
  const RashomonSample s = sample_masks(t.lr, t.val, rc);
  EXPECT_TRUE(s.partial);
  EXPECT_LE(s.size() - 1, 4);  // acceptance rate near zero
  for (Index i = 0; i < s.size(); ++i) EXPECT_LE(s.losses[i], s.reference_loss + kMembershipSlack);
}

TEST(Rashomon, RejectionSamplingIsSoundAndDeterministic) {
  const auto& t = synth_task();
  RashomonConfig rc;
  rc.exploration = Exploration::rejection;
  rc.proposal_radius = 0.15;
  rc.n_samples = 40;
  rc.seed = 8;
  const RashomonSample a = sample_masks(t.lr, t.val, rc), b = sample_masks(t.lr, t.val, rc);
  EXPECT_EQ(a.masks, b.masks);
  EXPECT_GT(a.size(), 1);
  for (Index i = 0; i < a.size(); ++i) EXPECT_TRUE(is_in_rashomon(Vector(a.masks.row(i).transpose()), t.lr, t.val, a.bound));
}

TEST(Rashomon, AcceptedSetsNestAcrossEpsilon) {
  const auto& t = synth_task();
  std::vector<std::set<std::int64_t>> accepted;
  for (double eps : {0.05, 0.1, 0.2}) {
    RashomonConfig rc;
    rc.epsilon = eps;
    rc.exploration = Exploration::rejection;
    rc.proposal_radius = 0.8;
    rc.n_samples = 100000;  // never reached: every run sees the same proposals
    rc.max_attempts = 300;
    rc.seed = 19;
    const RashomonSample s = sample_masks(t.lr, t.val, rc);
    accepted.emplace_back(s.proposal_index.begin(), s.proposal_index.end());
  }
  EXPECT_GT(accepted[0].size(), 1u);
  for (std::size_t i = 0; i + 1 < accepted.size(); ++i) {
    EXPECT_TRUE(std::includes(accepted[i + 1].begin(), accepted[i + 1].end(), accepted[i].begin(), accepted[i].end()));
    EXPECT_LT(accepted[i].size(), accepted[i + 1].size());
  }
}

TEST(Rashomon, ConstrainedSwapIsImpossible) {
  // Feature 1 dominates feature 0 so strongly that no mask inside a tight
  // Rashomon set can reverse their order.
  const auto task = two_feature_task(0.3, 3.0, 41);
  RashomonConfig rc;
  rc.epsilon = 0.01;
  rc.n_samples = 150;
  rc.seed = 5;
  const RashomonSample s = sample_masks(task.lr, task.val, rc);
  const AttributionDataset d = build_attribution_dataset(s, task.lr, task.val, 5, 6);
  const AttributionRange range = attribution_ranges(d.attributions.cwiseAbs());
  EXPECT_LT(range.max[0], range.min[1]);
  for (Index i = 0; i < s.size(); ++i) EXPECT_EQ(rank_of(Vector(d.attributions.row(i).transpose())).ranks[1], 1) << "row " << i;
}

TEST(Rashomon, Validation) {
  const auto& t = synth_task();
  RashomonConfig rc;
  rc.epsilon = -0.1;
  EXPECT_THROW(sample_masks(t.lr, t.val, rc), Error);
  rc.epsilon = 0.05;
  rc.n_samples = 0;
  EXPECT_THROW(sample_masks(t.lr, t.val, rc), Error);
  EXPECT_EQ(rashomon_config_from_json(to_json(RashomonConfig{})).n_samples, 500);
}
