#include <gtest/gtest.h>

#include "support.hpp"

using namespace pavlm;
using namespace testing_support;

namespace {

struct Fixture {
  ParamStore<double> store;
  Rng rng{11};
  DecoderConfig cfg;
  std::unique_ptr<AffordanceDecoder<double>> dec;

  explicit Fixture(Index d_out = 3, Index d_q = 2, Index hidden = 4) {
    cfg.embed_dim = d_out;
    cfg.query_dim = d_q;
    cfg.hidden = hidden;
    dec = std::make_unique<AffordanceDecoder<double>>(store, cfg, rng);
  }

  void set_running(const Matrix<double>& mean, const Matrix<double>& var) {
    store.at("decoder.bn.running_mean").value = mean;
    store.at("decoder.bn.running_var").value = var;
    store.at("decoder.bn.batches_tracked").value(0, 0) = 1;
  }

  Matrix<double> run(const Matrix<double>& emb, const Matrix<double>& pts, const Matrix<double>& q, Mode mode) {
    ad::Tape<double> tape;
    return dec->decode(tape, tape.constant(emb), pts, tape.constant(q), mode).value();
  }
};

}  // namespace

TEST(Decoder, ZeroWeightsGiveOneHalf) {
  Fixture f;
  for (auto& [name, p] : f.store) p.value.setZero();
  f.set_running(Matrix<double>::Zero(1, 4), Matrix<double>::Ones(1, 4));
  Rng rng(1);
  const Matrix<double> out = f.run(random_matrix(6, 3, rng), random_matrix(6, 3, rng), random_matrix(1, 2, rng), Mode::eval);
  ASSERT_EQ(out.rows(), 6);
  ASSERT_EQ(out.cols(), 1);
  for (Index i = 0; i < 6; ++i) EXPECT_EQ(out(i, 0), 0.5);
}

TEST(Decoder, OutputInUnitIntervalWithOneValuePerPoint) {
  Fixture f(8, 4, 16);
  Rng rng(2);
  randomize(f.store, rng, 1.0);
  for (Index n : {1, 5, 64}) {
    const Matrix<double> out =
        f.run(random_matrix(n, 8, rng, -3, 3), random_matrix(n, 3, rng), random_matrix(1, 4, rng, -3, 3), Mode::train);
    ASSERT_EQ(out.rows(), n);
    EXPECT_GE(out.minCoeff(), 0.0);
    EXPECT_LE(out.maxCoeff(), 1.0);
  }
}

TEST(Decoder, EvalModeMatchesHandComputation) {
  Fixture f(3, 2, 4);
  Rng rng(3);
  randomize(f.store, rng, 0.5);
  const Matrix<double> mean = random_matrix(1, 4, rng, -0.2, 0.2);
  const Matrix<double> var = random_matrix(1, 4, rng, 0.5, 2.0);
  f.set_running(mean, var);
  const Matrix<double> emb = random_matrix(4, 3, rng), pts = random_matrix(4, 3, rng), q = random_matrix(1, 2, rng);
  const Matrix<double> out = f.run(emb, pts, q, Mode::eval);

  const auto& w1 = f.store.at("decoder.conv1.weight").value;
  const auto& b1 = f.store.at("decoder.conv1.bias").value;
  const auto& gain = f.store.at("decoder.bn.gain").value;
  const auto& shift = f.store.at("decoder.bn.shift").value;
  const auto& w2 = f.store.at("decoder.conv2.weight").value;
  const auto& b2 = f.store.at("decoder.conv2.bias").value;
  for (Index i = 0; i < 4; ++i) {
    double in[8] = {emb(i, 0), emb(i, 1), emb(i, 2), pts(i, 0), pts(i, 1), pts(i, 2), q(0, 0), q(0, 1)};
    double z = b2(0, 0);
    for (Index h = 0; h < 4; ++h) {
      double a = b1(0, h);
      for (Index k = 0; k < 8; ++k) a += w1(h, k) * in[k];
      double nrm = gain(0, h) * (a - mean(0, h)) / std::sqrt(var(0, h) + 1e-5) + shift(0, h);
      z += w2(0, h) * std::max(0.0, nrm);
    }
    EXPECT_NEAR(out(i, 0), 1 / (1 + std::exp(-z)), 1e-10) << "point " << i;
  }
}

TEST(Decoder, EvalModeIsPerPoint) {
  Fixture f(3, 2, 4);
  Rng rng(4);
  randomize(f.store, rng);
  f.set_running(random_matrix(1, 4, rng, -0.1, 0.1), random_matrix(1, 4, rng, 0.5, 1.5));
  const Matrix<double> emb = random_matrix(10, 3, rng), pts = random_matrix(10, 3, rng), q = random_matrix(1, 2, rng);
  const Matrix<double> all = f.run(emb, pts, q, Mode::eval);
  for (Index i = 0; i < 10; ++i) {
    const Matrix<double> one = f.run(emb.middleRows(i, 1), pts.middleRows(i, 1), q, Mode::eval);
    EXPECT_NEAR(one(0, 0), all(i, 0), 1e-14);
  }
}

TEST(Decoder, UninitializedRunningStatsRejectedInEval) {
  Fixture f;
  Rng rng(5);
  EXPECT_FALSE(f.dec->has_running_stats());
  EXPECT_THROW(f.run(random_matrix(3, 3, rng), random_matrix(3, 3, rng), random_matrix(1, 2, rng), Mode::eval),
               InvalidArgument);
}

TEST(Decoder, RunningStatsFollowMomentum) {
  Fixture f(3, 2, 4);
  Rng rng(6);
  randomize(f.store, rng);
  const Matrix<double> emb = random_matrix(7, 3, rng), pts = random_matrix(7, 3, rng), q = random_matrix(1, 2, rng);
  f.run(emb, pts, q, Mode::train);
  EXPECT_TRUE(f.dec->has_running_stats());

  const auto& w1 = f.store.at("decoder.conv1.weight").value;
  const auto& b1 = f.store.at("decoder.conv1.bias").value;
  Matrix<double> x(7, 8);
  x << emb, pts, q.replicate(7, 1);
  const Matrix<double> h = (x * w1.transpose()).rowwise() + RowVector<double>(b1.row(0));
  const auto& rm = f.store.at("decoder.bn.running_mean").value;
  const auto& rv = f.store.at("decoder.bn.running_var").value;
  for (Index c = 0; c < 4; ++c) {
    const double mu = h.col(c).mean();
    const double unbiased = (h.col(c).array() - mu).square().sum() / 6.0;
    EXPECT_NEAR(rm(0, c), 0.1 * mu, 1e-12);
    EXPECT_NEAR(rv(0, c), 0.9 + 0.1 * unbiased, 1e-12);
  }
}

TEST(Decoder, TrainModeWithoutUpdateLeavesStatsAlone) {
  Fixture f;
  Rng rng(7);
  ad::Tape<double> tape;
  f.dec->decode(tape, tape.constant(random_matrix(5, 3, rng)), random_matrix(5, 3, rng),
                tape.constant(random_matrix(1, 2, rng)), Mode::train, false);
  EXPECT_FALSE(f.dec->has_running_stats());
  EXPECT_EQ(f.store.at("decoder.bn.running_mean").value, Matrix<double>::Zero(1, 4));
}

TEST(Decoder, ShapeErrors) {
  Fixture f;
  Rng rng(8);
  EXPECT_THROW(f.run(random_matrix(4, 3, rng), random_matrix(5, 3, rng), random_matrix(1, 2, rng), Mode::train),
               InvalidArgument);
  EXPECT_THROW(f.run(random_matrix(4, 2, rng), random_matrix(4, 3, rng), random_matrix(1, 2, rng), Mode::train),
               InvalidArgument);
  EXPECT_THROW(f.run(random_matrix(4, 3, rng), random_matrix(4, 3, rng), random_matrix(1, 3, rng), Mode::train),
               InvalidArgument);
}

TEST(Decoder, BatchedDecodeMatchesConcatenatedStatistics) {
  Fixture f(3, 2, 4);
  Rng rng(9);
  randomize(f.store, rng);
  const Matrix<double> e1 = random_matrix(3, 3, rng), p1 = random_matrix(3, 3, rng), q1 = random_matrix(1, 2, rng);
  const Matrix<double> e2 = random_matrix(5, 3, rng), p2 = random_matrix(5, 3, rng), q2 = random_matrix(1, 2, rng);
  ad::Tape<double> tape;
  std::vector<DecoderInput<double>> in{{tape.constant(e1), p1, tape.constant(q1)},
                                       {tape.constant(e2), p2, tape.constant(q2)}};
  auto maps = f.dec->decode_batch(tape, in, Mode::train, false);
  ASSERT_EQ(maps.size(), 2u);
  EXPECT_EQ(maps[0].rows(), 3);
  EXPECT_EQ(maps[1].rows(), 5);
  // Batch statistics couple the clouds: decoding the second alone differs.
  const Matrix<double> alone = f.run(e2, p2, q2, Mode::train);
  EXPECT_GT((alone - maps[1].value()).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Decoder, GradientsMatchFiniteDifferences) {
  Fixture f(3, 2, 4);
  Rng rng(10);
  randomize(f.store, rng, 0.5);
  auto& emb = f.store.add("input.emb", random_matrix(6, 3, rng));
  auto& q = f.store.add("input.q", random_matrix(1, 2, rng));
  const Matrix<double> pts = random_matrix(6, 3, rng);
  const Matrix<double> target = random_matrix(6, 1, rng, 0, 1);
  for (Mode mode : {Mode::train, Mode::eval}) {
    if (mode == Mode::eval) f.set_running(random_matrix(1, 4, rng, -0.1, 0.1), random_matrix(1, 4, rng, 0.5, 1.5));
    auto r = check_gradients(f.store, [&](ad::Tape<double>& tape) {
      auto out = f.dec->decode(tape, tape.param(emb), pts, tape.param(q), mode, false);
      return loss::affordance_loss(out, target, 1.0);
    });
    EXPECT_EQ(r.failures, 0) << r.worst;
    EXPECT_GT(r.checked, 40);
  }
}
