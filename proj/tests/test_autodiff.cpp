#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "come/autodiff.hpp"
#include "support.hpp"

using namespace come;
using come::testing::fd_error;
using come::testing::random_matrix;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(Elementwise, AddSubMulScale) {
  EXPECT_EQ(vals(add(Tensor::vector({1, 2}), Tensor::vector({3, 4}))), (std::vector<double>{4, 6}));
  EXPECT_EQ(vals(mul(Tensor::vector({2, 3}), Tensor::vector({0, 1}))), (std::vector<double>{0, 3}));
  EXPECT_EQ(vals(scale(Tensor::vector({1, 1}), 0.0)), (std::vector<double>{0, 0}));
  EXPECT_EQ(vals(sub(Tensor::vector({5, 1}), Tensor::vector({2, 2}))), (std::vector<double>{3, -1}));
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
  try {
    add(Tensor::vector({1, 2, 3}), Tensor::vector({1, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2]"), std::string::npos) << msg;
  }
}

TEST(Elementwise, BiasBroadcastAlongLastAxis) {
  const Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(vals(add(a, Tensor::vector({10, 20, 30}))), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  Rng rng(1);
  const Tensor bias = random_matrix(rng, 1, 3);
  const Tensor b = reshape(bias, {3});
  EXPECT_LT(fd_error([&](const Tensor& x) { return sum(mul(add(a, x), add(a, x))); }, b), 1e-6);
}

TEST(Matmul, IdentityAndRowVector) {
  const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(vals(matmul(eye, m)), vals(m));
  EXPECT_EQ(vals(matmul(Tensor::matrix(1, 2, {1, 0}), Tensor::matrix(2, 1, {5, 7}))), (std::vector<double>{5}));
  EXPECT_THROW(matmul(m, Tensor::matrix(3, 1, {1, 2, 3})), ShapeError);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(2);
  const Tensor a = random_matrix(rng, 3, 4), b = random_matrix(rng, 4, 2);
  const Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += static_cast<long double>(a.at(i, k)) * b.at(k, j);
      EXPECT_NEAR(c.at(i, j), static_cast<double>(s), 1e-12);
    }
}

TEST(Unary, ExpLogRelu) {
  EXPECT_EQ(exp(Tensor::vector({0}))[0], 1.0);
  EXPECT_NEAR(log(exp(Tensor::vector({1.5})))[0], 1.5, 1e-12);
  EXPECT_EQ(vals(relu(Tensor::vector({-2, 0, 3}))), (std::vector<double>{0, 0, 3}));
}

TEST(Unary, LogDomainErrorNamesIndex) {
  try {
    log(Tensor::vector({1.0, 2.0, -0.5}));
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("index 2"), std::string::npos) << e.what();
  }
}

TEST(Unary, ReluGradientAtZeroIsZero) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::vector({-1.0, 0.0, 2.0}));
  const Tensor g = tape.backward(sum(relu(x))).wrt(x);
  EXPECT_EQ(vals(g), (std::vector<double>{0, 0, 1}));
}

TEST(Reductions, LogSumExp) {
  EXPECT_NEAR(logsumexp(Tensor::vector({0, 0}))[0], std::log(2.0), 1e-15);
  EXPECT_NEAR(logsumexp(Tensor::vector({1000, 1000}))[0], 1000 + std::log(2.0), 1e-12);
  const long double oracle = std::log(std::exp(3.0L) + std::exp(4.0L));
  EXPECT_NEAR(logsumexp(Tensor::vector({3, 4}))[0], static_cast<double>(oracle), 1e-12);
  EXPECT_NEAR(logsumexp(Tensor::vector({3, 4}))[0], 4.313262, 1e-6);
}

TEST(Reductions, LogSumExpSandwich) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const Tensor x = random_matrix(rng, 1, 1 + rng.below(10), 5.0);
    const Tensor v = reshape(x, {x.size()});
    const double mx = *std::max_element(v.values().begin(), v.values().end());
    const double l = logsumexp(v)[0];
    EXPECT_GE(l, mx);
    EXPECT_LE(l, mx + std::log(static_cast<double>(v.size())) + 1e-12);
  }
}

TEST(Reductions, Softmax) {
  const Tensor u = softmax(Tensor::vector({0, 0, 0}));
  for (double p : u.values()) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
  const Tensor s = softmax(Tensor::vector({std::log(2.0), 0}));
  EXPECT_NEAR(s[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(s[1], 1.0 / 3.0, 1e-15);
  Rng rng(4);
  const Tensor x = random_matrix(rng, 4, 6, 3.0);
  const Tensor a = softmax(x, 1), b = softmax(add_scalar(x, 17.25), 1);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Reductions, PNorm) {
  EXPECT_DOUBLE_EQ(p_norm(Tensor::vector({3, 4}), 2)[0], 5.0);
  EXPECT_DOUBLE_EQ(p_norm(Tensor::vector({1, 1, 1, 1}), 1)[0], 4.0);
  EXPECT_THROW(p_norm(Tensor::vector({1, 2}), 0.5), std::invalid_argument);
  Tape tape;
  const Tensor z = tape.variable(Tensor::vector({0, 0, 0}));
  const Tensor gz = tape.backward(sum(p_norm(z, 2))).wrt(z);
  for (double g : gz.values()) EXPECT_EQ(g, 0.0);
}

TEST(Reductions, NormInequality) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng.below(12);
    const Tensor x = reshape(random_matrix(rng, 1, n, 2.0), {n});
    for (double p : {1.0, 1.5, 2.0, 3.0})
      for (double q : {p, p + 0.5, p + 2.0}) {
        const double lhs = p_norm(x, p)[0];
        const double rhs = std::pow(static_cast<double>(n), 1.0 / p - 1.0 / q) * p_norm(x, q)[0];
        EXPECT_LE(lhs, rhs * (1 + 1e-12));
      }
  }
}

TEST(Detach, ValueTransparentAndStopsGradient) {
  Rng rng(6);
  const Tensor v = reshape(random_matrix(rng, 1, 5), {5});
  EXPECT_EQ(vals(detach(v)), vals(v));
  Tape tape;
  const Tensor x = tape.variable(v);
  const Gradients g = tape.backward(sum(mul(detach(x), x)));
  const Tensor gx = g.wrt(x);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(gx[i], v[i]);  // x, not 2x
  Tape tape2;
  const Tensor y = tape2.variable(v);
  const Tensor s = add(sum(detach(y)), scale(sum(y), 0.0));
  const Tensor gy = tape2.backward(s).wrt(y);
  for (double gi : gy.values()) EXPECT_EQ(gi, 0.0);
}

TEST(Backward, SimpleCases) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::vector({1, 2, 3}));
  EXPECT_EQ(vals(tape.backward(sum(x)).wrt(x)), (std::vector<double>{1, 1, 1}));
  Tape tape2;
  const Tensor y = tape2.variable(Tensor::vector({1, 2}));
  EXPECT_EQ(vals(tape2.backward(sum(mul(y, y))).wrt(y)), (std::vector<double>{2, 4}));
}

TEST(Backward, NonScalarLossThrows) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::vector({1, 2}));
  EXPECT_THROW(tape.backward(mul(x, x)), ShapeError);
}

TEST(Backward, UnreachableLeafGetsZeros) {
  Tape tape;
  const Tensor x = tape.variable(Tensor::vector({1, 2}));
  const Tensor y = tape.variable(Tensor::vector({3, 4, 5}));
  const Gradients g = tape.backward(sum(x));
  EXPECT_EQ(vals(g.wrt(y)), (std::vector<double>{0, 0, 0}));
}

TEST(Backward, RepeatedPassesBitIdentical) {
  Rng rng(7);
  Tape tape;
  const Tensor x = tape.variable(random_matrix(rng, 3, 4));
  const Tensor loss = sum(logsumexp(mul(x, x), 1));
  EXPECT_EQ(vals(tape.backward(loss).wrt(x)), vals(tape.backward(loss).wrt(x)));
}

TEST(Backward, TwoLayerMlpMatchesFiniteDifferences) {
  Rng rng(8);
  const Tensor in = random_matrix(rng, 5, 4);
  const Tensor w2 = random_matrix(rng, 6, 3);
  const Tensor w1 = random_matrix(rng, 4, 6, 1.0, 1e-3);
  auto loss = [&](const Tensor& w) {
    return mean(logsumexp(matmul(relu(matmul(in, w)), w2), 1));
  };
  EXPECT_LT(fd_error(loss, w1), 1e-6);
}

// Every differentiable op against central differences at 100 random points.
TEST(Backward, EveryOpMatchesFiniteDifferences) {
  Rng rng(9);
  const std::vector<std::size_t> idx = {2, 0, 1};
  const std::vector<std::size_t> pick = {2, 0};
  for (int t = 0; t < 100; ++t) {
    const Tensor a = random_matrix(rng, 3, 4, 1.0, 1e-2);
    const Tensor b = random_matrix(rng, 3, 4, 1.0, 1e-2);
    const Tensor pos = exp(random_matrix(rng, 3, 4));
    const Tensor row = reshape(random_matrix(rng, 1, 3, 1.0, 1e-1), {3});
    const Tensor w = random_matrix(rng, 4, 2);
    auto wsum = [&](const Tensor& y) {  // weighted sum so no output entry is trivial
      std::vector<double> c(y.size());
      for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.3 + 0.1 * static_cast<double>(i % 7);
      return sum(mul(y, Tensor(y.shape(), c)));
    };
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(add(x, b)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(sub(b, x)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(mul(x, b)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(scale(x, -1.7)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(add_scalar(x, 0.4)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(matmul(x, w)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(exp(x)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(log(x)); }, pos), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(relu(x)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(sqrt(x)); }, pos), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(reciprocal(x)); }, pos), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(clamp(x, -0.5, 0.5)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(sum(x, 1)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(mean(x, 0)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return mean(x); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(logsumexp(x, 1)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(softmax(x, 1)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(softmax(x, 0)); }, a), 1e-6);
    for (double p : {1.0, 2.0, 3.5}) EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(p_norm(x, p, 1)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(mul_rows(a, x)); }, row), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(div_rows(x, row)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(div_rows(a, x)); }, row), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(sub_rows(x, row)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(concat_cols(x, row)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(gather(x, idx)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(take_rows(x, pick)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(log_softmax_rows(x)); }, a), 1e-6);
    EXPECT_LT(fd_error([&](const Tensor& x) { return wsum(reshape(x, {12})); }, a), 1e-6);
  }
}

TEST(Gather, PicksOneEntryPerRow) {
  const Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  const std::vector<std::size_t> idx = {2, 0};
  EXPECT_EQ(vals(gather(a, idx)), (std::vector<double>{3, 4}));
  const std::vector<std::size_t> bad = {3, 0};
  EXPECT_THROW(gather(a, bad), std::out_of_range);
}
