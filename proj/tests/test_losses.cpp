#include <gtest/gtest.h>

#include "support.hpp"

using namespace pavlm;
using namespace testing_support;

namespace {

double lca(const Matrix<double>& p, const Matrix<double>& t, loss::ContrastiveOptions o = {}) {
  ad::Tape<double> tape;
  return loss::contrastive_batch_average(tape.constant(p), tape.constant(t), o).scalar();
}

double bce(const Matrix<double>& m, const Matrix<double>& g) {
  ad::Tape<double> tape;
  return loss::bce_pointwise(tape.constant(m), g).scalar();
}

double dice(const Matrix<double>& m, const Matrix<double>& g, double smooth = 1e-6) {
  ad::Tape<double> tape;
  return loss::dice_loss(tape.constant(m), g, smooth).scalar();
}

double aff(const Matrix<double>& m, const Matrix<double>& g, double lambda) {
  ad::Tape<double> tape;
  return loss::affordance_loss(tape.constant(m), g, lambda).scalar();
}

double lq(const Matrix<double>& logits, std::vector<int> targets) {
  ad::Tape<double> tape;
  return loss::query_loss(tape.constant(logits), targets).scalar();
}

Matrix<double> col(std::initializer_list<double> v) {
  Matrix<double> m(static_cast<Index>(v.size()), 1);
  Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

}  // namespace

TEST(ContrastiveLoss, IdenticalSingletonGivesEpsTimesRootWidth) {
  Matrix<double> p(1, 4);
  p << 0.3, -1, 2, 0.5;
  EXPECT_NEAR(lca(p, p), 2e-8, 1e-20);
}

TEST(ContrastiveLoss, SingletonBatchHasNoMismatchedTerm) {
  Rng rng(1);
  const Matrix<double> p = random_matrix(1, 3, rng), t = random_matrix(1, 3, rng);
  RowVector<double> d = p.row(0) - t.row(0);
  d.array() += 1e-8;
  EXPECT_NEAR(lca(p, t), d.norm(), 1e-15);
}

TEST(ContrastiveLoss, MatchesDirectFormulaForTwoRows) {
  Rng rng(2);
  const Matrix<double> p = random_matrix(2, 3, rng, -0.4, 0.4), t = random_matrix(2, 3, rng, -0.4, 0.4);
  auto dist = [&](Index i, Index j) {
    double s = 0;
    for (Index c = 0; c < 3; ++c) s += std::pow(p(i, c) - t(j, c) + 1e-8, 2);
    return std::sqrt(s);
  };
  const double matched = (dist(0, 0) + dist(1, 1)) / 2;
  const double mismatched = (std::max(0.0, 1 - dist(0, 1)) + std::max(0.0, 1 - dist(1, 0))) / 2;
  EXPECT_NEAR(lca(p, t), matched + mismatched, 1e-14);
  EXPECT_GT(mismatched, 0.0);
}

TEST(ContrastiveLoss, OtherNormOrdersAndMargins) {
  Matrix<double> p(2, 2), t(2, 2);
  p << 0, 0, 1, 1;
  t << 0, 0, 0, 1;
  loss::ContrastiveOptions o;
  o.p = 1;
  o.margin = 3;
  // L1 distances (eps ignored at 1e-14): matched 0 and 1; mismatched d(0,1)=1, d(1,0)=2
  EXPECT_NEAR(lca(p, t, o), (0 + 1) / 2.0 + ((3 - 1) + (3 - 2)) / 2.0, 1e-7);
}

TEST(ContrastiveLoss, SymmetricUnderJointRowPermutation) {
  Rng rng(3);
  const Matrix<double> p = random_matrix(5, 4, rng, -0.3, 0.3), t = random_matrix(5, 4, rng, -0.3, 0.3);
  const std::vector<Index> perm{3, 0, 4, 1, 2};
  Matrix<double> pp(5, 4), tp(5, 4);
  for (Index i = 0; i < 5; ++i) {
    pp.row(i) = p.row(perm[static_cast<std::size_t>(i)]);
    tp.row(i) = t.row(perm[static_cast<std::size_t>(i)]);
  }
  EXPECT_NEAR(lca(p, t), lca(pp, tp), 1e-14);
}

TEST(ContrastiveLoss, RejectsWidthMismatch) {
  ad::Tape<double> tape;
  EXPECT_THROW(loss::contrastive_batch_average(tape.constant(Matrix<double>::Zero(2, 3)),
                                               tape.constant(Matrix<double>::Zero(2, 4))),
               InvalidArgument);
}

TEST(BceLoss, HalfEverywhereIsLn2) {
  const Matrix<double> h = Matrix<double>::Constant(7, 1, 0.5);
  EXPECT_NEAR(bce(h, h), std::log(2.0), 1e-12);
}

TEST(BceLoss, PerfectBinaryPredictionNearZero) {
  const auto g = col({1, 0, 0, 1, 1});
  EXPECT_LT(bce(g, g), 1e-6);
  EXPECT_GE(bce(g, g), 0.0);
}

TEST(BceLoss, SoftTargetsMatchDirectSum) {
  const auto m = col({0.2, 0.7, 0.9, 0.4}), g = col({0.0, 0.5, 1.0, 0.25});
  double s = 0;
  for (Index i = 0; i < 4; ++i) s -= g(i, 0) * std::log(m(i, 0)) + (1 - g(i, 0)) * std::log(1 - m(i, 0));
  EXPECT_NEAR(bce(m, g), s / 4, 1e-14);
}

TEST(BceLoss, RejectsLengthMismatch) {
  EXPECT_THROW(bce(col({0.5, 0.5}), col({1})), InvalidArgument);
}

TEST(DiceLoss, PerfectOverlapNearZero) {
  const auto g = col({1, 0, 1, 1});
  EXPECT_LT(dice(g, g), 1e-6);
}

TEST(DiceLoss, EmptyEmptyIsZero) {
  EXPECT_EQ(dice(col({0, 0, 0}), col({0, 0, 0})), 0.0);
}

TEST(DiceLoss, DisjointPair) {
  const double smooth = 1e-6;
  EXPECT_NEAR(dice(col({1, 0}), col({0, 1}), smooth), 1 - smooth / (2 + smooth), 1e-15);
}

TEST(DiceLoss, RejectsLengthMismatch) {
  EXPECT_THROW(dice(col({0.5}), col({1, 0})), InvalidArgument);
}

TEST(AffordanceLoss, LambdaZeroIsBce) {
  const auto m = col({0.2, 0.7, 0.9}), g = col({0, 1, 1});
  EXPECT_EQ(aff(m, g, 0.0), bce(m, g));
}

TEST(AffordanceLoss, PerfectPredictionNearZero) {
  const auto g = col({1, 0, 1, 0});
  EXPECT_LT(aff(g, g, 1.0), 1e-5);
}

TEST(AffordanceLoss, SumOfComponents) {
  Rng rng(4);
  const Matrix<double> m = random_matrix(8, 1, rng, 0.05, 0.95), g = random_matrix(8, 1, rng, 0, 1);
  EXPECT_NEAR(aff(m, g, 1.0), bce(m, g) + dice(m, g), 1e-14);
  EXPECT_NEAR(aff(m, g, 2.5), bce(m, g) + 2.5 * dice(m, g), 1e-14);
  ad::Tape<double> tape;
  EXPECT_THROW(loss::affordance_loss(tape.constant(m), g, -1.0), InvalidArgument);
}

TEST(QueryLoss, UniformLogitsGiveLn18) {
  EXPECT_NEAR(lq(Matrix<double>::Zero(1, 18), {5}), std::log(18.0), 1e-12);
}

TEST(QueryLoss, SaturationDecreasesMonotonicallyTowardZero) {
  double prev = std::numeric_limits<double>::infinity();
  for (double z : {0.0, 1.0, 5.0, 10.0, 20.0, 40.0}) {
    Matrix<double> l = Matrix<double>::Zero(1, 18);
    l(0, 2) = z;
    const double v = lq(l, {2});
    EXPECT_LT(v, prev);
    EXPECT_NEAR(v, std::log1p(17 * std::exp(-z)), 1e-15);
    prev = v;
  }
  Matrix<double> l = Matrix<double>::Zero(1, 18);
  l(0, 2) = 40;
  EXPECT_LT(lq(l, {2}), 1e-15);
}

TEST(QueryLoss, ThreeClassHandSoftmax) {
  Matrix<double> l(1, 3);
  l << 0.5, -1.25, 2.0;
  const double z = std::exp(0.5) + std::exp(-1.25) + std::exp(2.0);
  EXPECT_NEAR(lq(l, {0}), -std::log(std::exp(0.5) / z), 1e-12);
  EXPECT_NEAR(lq(l, {1}), -std::log(std::exp(-1.25) / z), 1e-12);
}

TEST(QueryLoss, RejectsOutOfRangeTarget) {
  EXPECT_THROW(lq(Matrix<double>::Zero(1, 18), {18}), InvalidArgument);
  EXPECT_THROW(lq(Matrix<double>::Zero(1, 18), {-1}), InvalidArgument);
}

TEST(LossProperties, NonNegativeOnRandomInputs) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix<double> m = random_matrix(10, 1, rng, 0, 1), g = random_matrix(10, 1, rng, 0, 1);
    EXPECT_GE(bce(m, g), 0.0);
    EXPECT_GE(dice(m, g), 0.0);
    EXPECT_GE(aff(m, g, 1.0), 0.0);
    EXPECT_GE(lca(random_matrix(3, 4, rng), random_matrix(3, 4, rng)), 0.0);
    EXPECT_GE(lq(random_matrix(2, 18, rng, -5, 5), {0, 17}), 0.0);
  }
}

TEST(LossProperties, PointwiseLossesInvariantUnderPointPermutation) {
  Rng rng(6);
  const Matrix<double> m = random_matrix(9, 1, rng, 0.01, 0.99), g = random_matrix(9, 1, rng, 0, 1);
  Matrix<double> mp = m, gp = g;
  const std::vector<Index> perm{8, 2, 5, 0, 7, 1, 3, 6, 4};
  for (Index i = 0; i < 9; ++i) {
    mp(i, 0) = m(perm[static_cast<std::size_t>(i)], 0);
    gp(i, 0) = g(perm[static_cast<std::size_t>(i)], 0);
  }
  EXPECT_NEAR(bce(m, g), bce(mp, gp), 1e-14);
  EXPECT_NEAR(dice(m, g), dice(mp, gp), 1e-14);
}

TEST(LossGradients, AllLossesMatchFiniteDifferences) {
  Rng rng(7);
  ParamStore<double> store;
  auto& p = store.add("p", random_matrix(4, 5, rng, -0.3, 0.3));
  auto& t = store.add("t", random_matrix(4, 5, rng, -0.3, 0.3));
  auto& m = store.add("m", random_matrix(12, 1, rng, -2, 2));
  auto& l = store.add("l", random_matrix(3, 18, rng, -2, 2));
  const Matrix<double> g = random_matrix(12, 1, rng, 0, 1);
  const std::vector<int> targets{4, 0, 17};
  for (double pn : {1.5, 2.0, 3.0}) {
    loss::ContrastiveOptions o;
    o.p = pn;
    auto r = check_gradients(store, [&](ad::Tape<double>& tape) {
      return loss::contrastive_batch_average(tape.param(p), tape.param(t), o);
    });
    EXPECT_EQ(r.failures, 0) << "p=" << pn << " " << r.worst;
  }
  auto r = check_gradients(store, [&](ad::Tape<double>& tape) {
    return loss::bce_pointwise(ad::sigmoid(tape.param(m)), g);
  });
  EXPECT_EQ(r.failures, 0) << r.worst;
  r = check_gradients(store, [&](ad::Tape<double>& tape) { return loss::dice_loss(ad::sigmoid(tape.param(m)), g); });
  EXPECT_EQ(r.failures, 0) << r.worst;
  r = check_gradients(store, [&](ad::Tape<double>& tape) {
    return loss::affordance_loss(ad::sigmoid(tape.param(m)), g, 0.7);
  });
  EXPECT_EQ(r.failures, 0) << r.worst;
  r = check_gradients(store, [&](ad::Tape<double>& tape) { return loss::query_loss(tape.param(l), targets); });
  EXPECT_EQ(r.failures, 0) << r.worst;
}
