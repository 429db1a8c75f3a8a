#include "support.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace exagree;
using exagree::testing::synth_task;

namespace {

double rel_error(const Matrix& analytic, const Matrix& numeric) {
  return (analytic - numeric).cwiseAbs().maxCoeff() / std::max(1e-8, analytic.cwiseAbs().maxCoeff());
}

Matrix fd_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& x, double h = 1e-5) {
  const Vector f0 = f(x);
  Matrix J(f0.size(), x.size());
  for (Index k = 0; k < x.size(); ++k) {
    Vector xp = x, xm = x;
    xp[k] += h;
    xm[k] -= h;
    J.col(k) = (f(xp) - f(xm)) / (2 * h);
  }
  return J;
}

Vector distinct_values(int p, Rng& rng, double spacing = 1e-3) {
  // Random magnitudes on a grid, so every pair is at least `spacing` apart.
  std::vector<int> slots(static_cast<std::size_t>(4 * p));
  std::iota(slots.begin(), slots.end(), 0);
  std::shuffle(slots.begin(), slots.end(), rng);
  std::uniform_real_distribution<double> jitter(0.0, 0.2 * spacing);
  Vector v(p);
  for (int j = 0; j < p; ++j) v[j] = slots[static_cast<std::size_t>(j)] * spacing + jitter(rng);
  return v;
}

AttributionDataset identity_task(Index rows, Index p, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  AttributionDataset d;
  d.masks.resize(rows, p);
  for (Index i = 0; i < d.masks.size(); ++i) d.masks.data()[i] = u(rng);
  d.attributions = d.masks;
  return d;
}

}  // namespace

// --- dman -------------------------------------------------------------------

TEST(Dman, LearnsIdentityMapping) {
  DmanConfig cfg;
  cfg.seed = 2;
  cfg.lr = 1e-3;
  const DmanModel m = train_dman(identity_task(400, 5, 1), cfg);
  EXPECT_GE(m.report().valid_r2, 0.99);
  EXPECT_EQ(m.layer_sizes(), (std::vector<int>{5, 100, 100, 5}));
  EXPECT_LT((m.forward(ones(5)) - ones(5)).cwiseAbs().maxCoeff(), 0.05);
  // A ReLU surrogate's Jacobian is piecewise constant, so the slope of the
  // learned map is read off as the mean Jacobian over a small box around 1.
  Rng rng(4);
  std::uniform_real_distribution<double> jitter(-0.1, 0.1);
  Matrix mean_jac = Matrix::Zero(5, 5);
  for (int k = 0; k < 200; ++k) {
    Vector x = ones(5);
    for (Index j = 0; j < 5; ++j) x[j] += jitter(rng);
    mean_jac += m.jacobian(x) / 200.0;
  }
  EXPECT_LT((mean_jac - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff(), 0.1);
}

TEST(Dman, ZeroEpochsReportsInitialization) {
  DmanConfig cfg;
  cfg.epochs = 0;
  const DmanModel m = train_dman(identity_task(40, 3, 2), cfg);
  EXPECT_EQ(m.report().epochs, 0);
  EXPECT_GT(m.report().valid_mse, 0.0);
  EXPECT_TRUE(std::isfinite(m.report().train_mse));
  EXPECT_EQ(m.report().valid_rows, 4);
}

TEST(Dman, SyntheticPipelineFitsWell) {
  const auto& t = synth_task();
  EXPECT_GE(t.dman.report().valid_r2, 0.9);
  EXPECT_EQ(t.dman.report().valid_rows, 20);
}

TEST(Dman, ForwardIsPureAndValidatesInput) {
  const auto& t = synth_task();
  const Vector m = t.sample.masks.row(5).transpose();
  EXPECT_EQ(t.dman.forward(m), t.dman.forward(m));
  EXPECT_TRUE(t.dman.forward(m).allFinite());
  Vector bad = m;
  bad[1] = std::nan("");
  EXPECT_THROW(t.dman.forward(bad), Error);
  EXPECT_THROW(t.dman.forward(ones(7)), Error);
  EXPECT_EQ(Vector(t.dman.forward_batch(m.transpose()).row(0).transpose()), t.dman.forward(m));
}

TEST(Dman, RejectsTooFewRows) {
  EXPECT_THROW(train_dman(identity_task(19, 3, 2), DmanConfig{}), Error);
}

TEST(Dman, JacobianMatchesFiniteDifferences) {
  Rng rng(7);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  std::uniform_int_distribution<int> width(2, 20);
  double worst = 0.0;
  int cases = 0;
  for (int trial = 0; cases < 60 && trial < 200; ++trial) {
    const int p = width(rng);
    const DmanModel m = DmanModel::random(p, 100, 500 + static_cast<std::uint64_t>(trial));
    Vector x(p);
    for (int j = 0; j < p; ++j) x[j] = u(rng);
    if (m.min_abs_preactivation(x) < 1e-4) continue;  // a ReLU kink within reach of the step
    worst = std::max(worst, rel_error(m.jacobian(x), fd_jacobian([&](const Vector& v) { return m.forward(v); }, x)));
    ++cases;
  }
  EXPECT_GE(cases, 50);
  EXPECT_LT(worst, 1e-4);

  // Trained surrogate, sampled masks.
  const auto& t = synth_task();
  for (Index i = 0; i < 20; ++i) {
    const Vector x = t.sample.masks.row(i).transpose();
    if (t.dman.min_abs_preactivation(x) < 1e-4) continue;
    EXPECT_LT(rel_error(t.dman.jacobian(x), fd_jacobian([&](const Vector& v) { return t.dman.forward(v); }, x)), 1e-4);
  }
}

TEST(Dman, ZeroModelHasZeroJacobian) {
  const DmanModel m = DmanModel::zeros(4);
  EXPECT_TRUE(m.jacobian(ones(4)).isZero());
  EXPECT_TRUE(m.forward(ones(4)).isZero());
}

TEST(Dman, SerializationRoundTrip) {
  const auto& t = synth_task();
  const auto s = DmanIo::serialize(t.dman);
  const DmanModel back = DmanIo::deserialize(s.manifest, params_from_bytes(params_to_bytes(s.params), s.params.size()));
  EXPECT_EQ(back.forward_batch(t.sample.masks), t.dman.forward_batch(t.sample.masks));
  EXPECT_EQ(back.report().valid_r2, t.dman.report().valid_r2);
  EXPECT_EQ(s.manifest["layer_sizes"], nlohmann::json({8, 100, 100, 8}));
}

TEST(Dman, TrainingIsDeterministic) {
  DmanConfig cfg;
  cfg.epochs = 50;
  cfg.seed = 9;
  const auto d = identity_task(60, 4, 3);
  EXPECT_EQ(train_dman(d, cfg).parameters(), train_dman(d, cfg).parameters());
}

// --- diffsort: plans and swaps ----------------------------------------------

TEST(Diffsort, PlanShapes) {
  const auto p2 = build_plan(2);
  EXPECT_EQ(p2.n_padded, 2);
  EXPECT_EQ(p2.comparator_count(), 1u);
  const auto p4 = build_plan(4);
  EXPECT_EQ(p4.layers.size(), 3u);
  EXPECT_EQ(p4.comparator_count(), 6u);
  EXPECT_EQ(build_plan(13).n_padded, 16);
  EXPECT_EQ(build_plan(1).comparator_count(), 0u);
  EXPECT_THROW(build_plan(0), Error);
  for (int p : {3, 8, 13, 32}) {
    for (const auto& layer : build_plan(p).layers) {
      std::vector<int> used;
      for (const auto& c : layer) {
        used.push_back(c.top);
        used.push_back(c.bottom);
      }
      std::sort(used.begin(), used.end());
      EXPECT_EQ(std::adjacent_find(used.begin(), used.end()), used.end()) << "overlapping comparators for p = " << p;
    }
  }
}

TEST(Diffsort, HardPlanSortsEveryBinaryInput) {
  // 0-1 principle: a comparator network sorts everything iff it sorts all 0/1 inputs.
  for (int p : {2, 4, 8}) {
    const auto plan = build_plan(p);
    for (int bits = 0; bits < (1 << p); ++bits) {
      std::vector<int> x(static_cast<std::size_t>(p));
      for (int j = 0; j < p; ++j) x[static_cast<std::size_t>(j)] = (bits >> j) & 1;
      for (const auto& layer : plan.layers)
        for (const auto& c : layer)
          if (x[static_cast<std::size_t>(c.top)] < x[static_cast<std::size_t>(c.bottom)])
            std::swap(x[static_cast<std::size_t>(c.top)], x[static_cast<std::size_t>(c.bottom)]);
      EXPECT_TRUE(std::is_sorted(x.rbegin(), x.rend())) << "p = " << p << ", input " << bits;
    }
  }
}

TEST(Diffsort, CauchySwapExamples) {
  const SoftSwap s = cauchy_swap(0.2, 0.8, 10.0);
  EXPECT_NEAR(s.alpha, 0.0526, 1e-4);
  EXPECT_NEAR(s.alpha, std::atan(-6.0) / std::numbers::pi + 0.5, 1e-15);
  EXPECT_NEAR(s.top, 0.7684, 1e-4);
  EXPECT_EQ(s.top + s.bottom, 0.2 + 0.8);

  const SoftSwap eq = cauchy_swap(0.3, 0.3, 10.0);
  EXPECT_EQ(eq.alpha, 0.5);
  EXPECT_EQ(eq.top, 0.3);
  EXPECT_EQ(eq.bottom, 0.3);

  const SoftSwap hard = cauchy_swap(0.9, 0.1, 1e12);
  EXPECT_NEAR(hard.alpha, 1.0, 1e-9);
  EXPECT_NEAR(hard.top, 0.9, 1e-9);
  EXPECT_NEAR(hard.bottom, 0.1, 1e-9);
  EXPECT_THROW(cauchy_swap(0.1, 0.2, 0.0), Error);
}

// --- diffsort: soft sort ----------------------------------------------------

TEST(Diffsort, TwoValueClosedForm) {
  const auto plan = build_plan(2);
  const SoftPermutation sp = soft_sort(from_std({0.2, 0.8}), plan, 10.0);
  const double alpha = std::atan(10.0 * (0.2 - 0.8)) / std::numbers::pi + 0.5;
  // Input 0 lands at position 1 with probability alpha.
  EXPECT_NEAR(sp.soft_ranks[0], alpha + 2 * (1 - alpha), 1e-12);
  EXPECT_NEAR(sp.soft_ranks[1], (1 - alpha) + 2 * alpha, 1e-12);
  EXPECT_NEAR(sp.soft_ranks[0], 1.947, 1e-3);
  EXPECT_NEAR(sp.soft_ranks[1], 1.053, 1e-3);
}

TEST(Diffsort, HardLimitRanks) {
  const SoftPermutation sp = soft_sort(from_std({3, 1, 2}), build_plan(3), 1e6);
  std::vector<int> rounded;
  for (Index j = 0; j < 3; ++j) rounded.push_back(static_cast<int>(std::lround(sp.soft_ranks[j])));
  EXPECT_EQ(rounded, (std::vector<int>{1, 3, 2}));
}

TEST(Diffsort, HardLimitMatchesRankOfAcrossSizes) {
  Rng rng(2024);
  std::uniform_int_distribution<int> size(2, 32);
  for (int trial = 0; trial < 300; ++trial) {
    const int p = size(rng);
    const Vector v = distinct_values(p, rng);
    const SoftPermutation sp = soft_sort(v, build_plan(p), 1e6);
    std::vector<int> rounded;
    for (int j = 0; j < p; ++j) rounded.push_back(static_cast<int>(std::lround(sp.soft_ranks[j])));
    ASSERT_EQ(rounded, rank_of(v).ranks) << "p = " << p;
  }
}

TEST(Diffsort, RowStochasticAndSumConserving) {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int p : {3, 7, 16, 20}) {
    Vector v(p);
    for (int j = 0; j < p; ++j) v[j] = u(rng);
    const auto plan = build_plan(p);
    const SoftPermutation sp = soft_sort(v, plan, 10.0);
    EXPECT_LT((sp.matrix.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-9);
    EXPECT_LT((sp.matrix.colwise().sum().array() - 1.0).abs().maxCoeff(), 1e-9);
    const double total = v.sum() + (plan.n_padded - p) * -1.0;
    for (double s : sp.layer_sums) EXPECT_NEAR(s, total, 1e-12);
    EXPECT_GE(sp.soft_ranks.minCoeff(), 1.0 - 1e-12);
    EXPECT_LE(sp.soft_ranks.maxCoeff(), plan.n_padded + 1e-12);
  }
}

TEST(Diffsort, PermutationEquivarianceInHardLimit) {
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const int p = 9;
    const Vector v = distinct_values(p, rng, 1e-2);
    std::vector<int> sigma(p);
    std::iota(sigma.begin(), sigma.end(), 0);
    std::shuffle(sigma.begin(), sigma.end(), rng);
    Vector pv(p);
    for (int j = 0; j < p; ++j) pv[j] = v[sigma[static_cast<std::size_t>(j)]];
    const auto plan = build_plan(p);
    const Vector r = soft_sort(v, plan, 1e6).soft_ranks, pr = soft_sort(pv, plan, 1e6).soft_ranks;
    for (int j = 0; j < p; ++j) EXPECT_NEAR(pr[j], r[sigma[static_cast<std::size_t>(j)]], 1e-3);
  }
}

TEST(Diffsort, JacobianTwoValueClosedForm) {
  const double a = 0.2, b = 0.8, beta = 10.0;
  const Matrix J = soft_sort_gradient(from_std({a, b}), build_plan(2), beta);
  // r0 = 2 - alpha, r1 = 1 + alpha, alpha = atan(beta (a - b)) / pi + 1/2.
  const double z = beta * (a - b);
  const double dalpha = beta / (std::numbers::pi * (1 + z * z));
  EXPECT_NEAR(J(0, 0), -dalpha, 1e-12);
  EXPECT_NEAR(J(0, 1), dalpha, 1e-12);
  EXPECT_NEAR(J(1, 0), dalpha, 1e-12);
  EXPECT_NEAR(J(1, 1), -dalpha, 1e-12);
}

TEST(Diffsort, JacobianEqualInputsSymmetric) {
  const Matrix J = soft_sort_gradient(from_std({0.4, 0.4}), build_plan(2), 10.0);
  EXPECT_DOUBLE_EQ(J(0, 0), J(1, 1));
  EXPECT_DOUBLE_EQ(J(0, 1), J(1, 0));
}

TEST(Diffsort, JacobianMatchesFiniteDifferences) {
  Rng rng(31);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> size(2, 20);
  double worst = 0.0;
  for (int trial = 0; trial < 60; ++trial) {
    const int p = trial < 10 ? 8 : size(rng);
    Vector v(p);
    for (int j = 0; j < p; ++j) v[j] = u(rng);
    const auto plan = build_plan(p);
    worst = std::max(worst, rel_error(soft_sort_gradient(v, plan, 10.0),
                                      fd_jacobian([&](const Vector& x) { return soft_sort(x, plan, 10.0).soft_ranks; }, v)));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Diffsort, OwnRankNeverWorsensAsValueGrows) {
  Rng rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int p = 2 + trial % 15;
    Vector v(p);
    for (int j = 0; j < p; ++j) v[j] = u(rng);
    const auto plan = build_plan(p);
    const Matrix J = soft_sort_gradient(v, plan, 10.0);
    const Matrix F = fd_jacobian([&](const Vector& x) { return soft_sort(x, plan, 10.0).soft_ranks; }, v);
    for (int j = 0; j < p; ++j) {
      EXPECT_LE(J(j, j), 1e-12);
      EXPECT_LE(F(j, j), 1e-9);
    }
  }
}

// --- Spearman ---------------------------------------------------------------

TEST(Spearman, AdjacentSwapExamplesAndBounds) {
  const Ranking ref{{1, 2, 3, 4, 5}};
  EXPECT_EQ(spearman_exact(Ranking{{1, 3, 2, 5, 4}}, ref), 0.8);
  EXPECT_EQ(spearman_exact(Ranking{{2, 1, 3, 5, 4}}, ref), 0.8);
  EXPECT_EQ(spearman_exact(ref, ref), 1.0);
  EXPECT_EQ(spearman_exact(Ranking{{5, 4, 3, 2, 1}}, ref), -1.0);
  EXPECT_THROW(spearman_exact(Ranking{{1, 2}}, ref), Error);
}

TEST(Spearman, ExactIsSymmetricAndBounded) {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    const auto a = exagree::testing::random_ranking(7, rng), b = exagree::testing::random_ranking(7, rng);
    EXPECT_EQ(spearman_exact(a, b), spearman_exact(b, a));
    EXPECT_GE(spearman_exact(a, b), -1.0);
    EXPECT_LE(spearman_exact(a, b), 1.0);
  }
}

TEST(Spearman, SoftExamples) {
  const Ranking target{{2, 1, 4, 3}};
  EXPECT_NEAR(spearman_soft(from_std({2, 1, 4, 3}), target).value, 1.0, 1e-15);
  EXPECT_NEAR(spearman_soft(from_std({3, 4, 1, 2}), target).value, -1.0, 1e-15);
  EXPECT_THROW(spearman_soft(from_std({2, 2, 2, 2}), target), Error);
  try {
    spearman_soft(from_std({2, 2, 2, 2}), target);
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("degenerate ranking"), std::string::npos);
  }
}

TEST(Spearman, SoftHardLimitMatchesExact) {
  Rng rng(12);
  for (int t = 0; t < 100; ++t) {
    const int p = 2 + t % 20;
    const Vector v = distinct_values(p, rng, 1.0);
    const Ranking target = exagree::testing::random_ranking(static_cast<std::size_t>(p), rng);
    const Vector soft = soft_sort(v, build_plan(p), 1e6).soft_ranks;
    std::vector<int> rounded;
    for (int j = 0; j < p; ++j) rounded.push_back(static_cast<int>(std::lround(soft[j])));
    EXPECT_NEAR(spearman_soft(soft, target).value, spearman_exact(Ranking{rounded}, target), 1e-6);
  }
}

TEST(Spearman, SoftGradientMatchesFiniteDifferences) {
  Rng rng(13);
  std::uniform_real_distribution<double> u(1.0, 8.0);
  for (int t = 0; t < 50; ++t) {
    const int p = 3 + t % 10;
    Vector r(p);
    for (int j = 0; j < p; ++j) r[j] = u(rng);
    const Ranking target = exagree::testing::random_ranking(static_cast<std::size_t>(p), rng);
    const Vector g = spearman_soft(r, target).gradient;
    const Matrix fd = fd_jacobian([&](const Vector& x) { return Vector::Constant(1, spearman_soft(x, target).value); }, r);
    EXPECT_LT(rel_error(g.transpose(), fd), 1e-4);
  }
}
