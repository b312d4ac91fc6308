#include <gtest/gtest.h>

#include <cmath>

#include "lape/grad_check.hpp"
#include "lape/ops.hpp"
#include "test_util.hpp"

namespace lape {
namespace {

using testing::random_leaf;

Tensor<double> mat(std::initializer_list<std::initializer_list<double>> rows, bool grad = false) {
  Mat<double> m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index r = 0;
  for (const auto& row : rows) {
    Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return Tensor<double>(m, grad);
}

TEST(Matmul, IdentityAndAnnihilator) {
  const auto a = mat({{1, 2}, {3, 4}});
  const auto eye = mat({{1, 0}, {0, 1}});
  EXPECT_EQ(matmul(eye, a).value(), a.value());
  EXPECT_EQ(matmul(a, eye).value(), a.value());
  EXPECT_TRUE(matmul(a, Tensor<double>::zeros({2, 2})).value().isZero(0));
}

TEST(Matmul, ForwardAndBackwardMatchNaiveLoops) {
  auto a = random_leaf({3, 4}, 1);
  auto b = random_leaf({4, 2}, 2);
  const Mat<double> g = testing::random_matrix(3, 2, 3);
  Tape<double> tape;
  Tensor<double> out;
  {
    TapeScope<double> scope(tape);
    out = matmul(a, b);
    tape.backward(sum(mul(out, Tensor<double>(g))));
  }
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 2; ++j) {
      double s = 0;
      for (Index k = 0; k < 4; ++k) s += a.value()(i, k) * b.value()(k, j);
      EXPECT_NEAR(out.value()(i, j), s, 1e-14);
    }
  // dA = G B^T, dB = A^T G
  for (Index i = 0; i < 3; ++i)
    for (Index k = 0; k < 4; ++k) {
      double s = 0;
      for (Index j = 0; j < 2; ++j) s += g(i, j) * b.value()(k, j);
      EXPECT_NEAR(a.grad()(i, k), s, 1e-14);
    }
  for (Index k = 0; k < 4; ++k)
    for (Index j = 0; j < 2; ++j) {
      double s = 0;
      for (Index i = 0; i < 3; ++i) s += a.value()(i, k) * g(i, j);
      EXPECT_NEAR(b.grad()(k, j), s, 1e-14);
    }
}

TEST(Matmul, ShapeMismatchNamesShapes) {
  try {
    matmul(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({2, 3}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(LayerNorm, KnownValues) {
  const auto x = mat({{1, -1}});
  const auto id = layer_norm(x, Tensor<double>::ones({2}), Tensor<double>::zeros({2}), 0.0);
  EXPECT_NEAR(id.value()(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(id.value()(0, 1), -1.0, 1e-15);

  // normalized [-3,-1,1,3]/sqrt(5), then *2 + 1; digits from 40-digit arithmetic
  const auto y = layer_norm(mat({{1, 2, 3, 4}}), Tensor<double>::full({4}, 2.0), Tensor<double>::ones({4}), 0.0);
  const double expect[] = {-1.683281572999747635691008, 0.1055728090000841214363305, 1.894427190999915878563669,
                           3.683281572999747635691008};
  for (Index i = 0; i < 4; ++i) EXPECT_NEAR(y.value()(0, i), expect[i], 1e-14);
}

TEST(LayerNorm, ZeroGammaCollapsesToBeta) {
  const auto x = Tensor<double>(testing::random_matrix(5, 6, 4));
  const auto beta = Tensor<double>(Shape{6}, testing::random_matrix(1, 6, 5));
  const auto y = layer_norm(x, Tensor<double>::zeros({6}), beta, 1e-6);
  for (Index i = 0; i < 5; ++i) EXPECT_EQ(y.value().row(i), beta.value().row(0));
}

TEST(LayerNorm, NormalizedRowsHaveZeroMeanUnitVariance) {
  const auto x = Tensor<double>(testing::random_matrix(20, 6, 6, 3.0));
  const Mat<double> n = normalize(x, 0.0).value();
  for (Index i = 0; i < n.rows(); ++i) {
    EXPECT_LT(std::abs(n.row(i).mean()), 1e-12);
    EXPECT_NEAR(n.row(i).squaredNorm() / 6.0, 1.0, 1e-9);
  }
}

TEST(LayerNorm, WidthMismatchIsDimensionError) {
  EXPECT_THROW(layer_norm(Tensor<double>::zeros({2, 3}), Tensor<double>::ones({4}), Tensor<double>::zeros({4}), 0.0),
               DimensionError);
}

TEST(Softmax, KnownValues) {
  const auto s = softmax_last(mat({{1, 2, 3}, {0, 0, 0}}));
  // exp(k) / sum, 40-digit arithmetic
  EXPECT_NEAR(s.value()(0, 0), 0.0900305731703804579980221, 1e-15);
  EXPECT_NEAR(s.value()(0, 1), 0.2447284710547976524729596, 1e-15);
  EXPECT_NEAR(s.value()(0, 2), 0.6652409557748218895290183, 1e-15);
  for (Index j = 0; j < 3; ++j) EXPECT_NEAR(s.value()(1, j), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(softmax_last(mat({{7.5}})).value()(0, 0), 1.0);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  const Mat<double> x = testing::random_matrix(10, 7, 8, 4.0);
  const Mat<double> a = softmax_last(Tensor<double>(x)).value();
  const Mat<double> b = softmax_last(Tensor<double>(Mat<double>(x.array() + 3.25))).value();
  for (Index i = 0; i < x.rows(); ++i) EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-12);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Gelu, KnownValues) {
  const auto g = gelu(mat({{0.0, 1.0, -0.5, 30.0}}));
  EXPECT_EQ(g.value()(0, 0), 0.0);
  // x * Phi(x) with 40-digit erf
  EXPECT_NEAR(g.value()(0, 1), 0.8413447460685429485852325, 1e-15);
  EXPECT_NEAR(g.value()(0, 2), -0.1542687693629934481811477, 1e-15);
  EXPECT_NEAR(g.value()(0, 3) / 30.0, 1.0, 1e-15);
}

TEST(Backward, SumGivesOnesAndUnusedLeafGetsZeros) {
  auto x = random_leaf({3, 4}, 9);
  auto y = random_leaf({3, 4}, 10);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(sum(x));
  }
  EXPECT_TRUE((x.grad().array() == 1.0).all());
  EXPECT_TRUE(y.grad().isZero(0));
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Backward, NonScalarLossIsContractError) {
  auto x = random_leaf({2, 2}, 11);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  const auto y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  auto x = random_leaf({2, 3}, 12);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    const auto y = add(x, x);
    tape.backward(sum(mul(y, x)));  // sum 2x^2
  }
  EXPECT_LT((x.grad() - 4.0 * x.value()).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(GradCheck, TrivialFunctions) {
  auto x = Tensor<double>::scalar(3.0, true);
  const auto r = grad_check([&] { return mul(x, x); }, {{"x", x}}, 1e-6);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
  EXPECT_NEAR(x.grad()(0, 0), 6.0, 1e-12);

  auto c = Tensor<double>::scalar(2.0, true);
  const auto k = grad_check([&] { return Tensor<double>::scalar(1.5); }, {{"c", c}}, 1e-6);
  EXPECT_TRUE(k.passed);
  EXPECT_EQ(k.max_rel_error, 0.0);
}

TEST(GradCheck, NonFiniteIsReportedNotThrown) {
  auto x = Tensor<double>::scalar(0.0, true);
  const auto r = grad_check(
      [&] {
        Mat<double> v(1, 1);
        v(0, 0) = 1.0 / x.value()(0, 0);
        return Tensor<double>(Shape{}, v);
      },
      {{"x", x}}, 1e-3);
  EXPECT_FALSE(r.passed);
  EXPECT_FALSE(r.finite);
}

TEST(GradCheck, DetectsWrongGradient) {
  auto x = random_leaf({2, 2}, 13);
  // value of 3*sum(x) but gradient of 2*sum(x)
  const auto r = grad_check(
      [&] {
        const auto wrong = scale(x, 2.0);
        Mat<double> extra(1, 1);
        extra(0, 0) = x.value().sum();
        return add(sum(wrong), Tensor<double>(Shape{}, extra));
      },
      {{"x", x}}, 1e-3);
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.worst_leaf, "x");
}

// Every differentiable op at sizes up to 4x5x6 (stored 20x6).
class OpGradients : public ::testing::Test {
 protected:
  Mat<double> weights(Index r, Index c) { return testing::random_matrix(r, c, 99); }
  void check(const std::function<Tensor<double>()>& f, std::vector<NamedTensor<double>> leaves) {
    const auto r = grad_check(f, std::move(leaves), 1e-3);
    EXPECT_TRUE(r.passed) << r.worst_leaf << "[" << r.worst_index << "] rel " << r.max_rel_error << " analytic "
                          << r.worst_analytic << " numeric " << r.worst_numeric;
  }
};

TEST_F(OpGradients, Elementwise) {
  auto a = random_leaf({4, 5, 6}, 20);
  auto b = random_leaf({4, 5, 6}, 21);
  const Tensor<double> w(Shape{4, 5, 6}, weights(20, 6));
  check([&] { return sum(mul(add(a, b), w)); }, {{"a", a}, {"b", b}});
  check([&] { return sum(mul(sub(a, b), w)); }, {{"a", a}, {"b", b}});
  check([&] { return sum(mul(mul(a, b), w)); }, {{"a", a}, {"b", b}});
  check([&] { return mean(mul(scale(a, -1.5), w)); }, {{"a", a}});
  check([&] { return sum(mul(gelu(a), w)); }, {{"a", a}});
}

TEST_F(OpGradients, MatmulTranspose) {
  auto a = random_leaf({5, 6}, 22);
  auto b = random_leaf({6, 3}, 23);
  const Tensor<double> w(weights(3, 5));
  check([&] { return sum(mul(transpose(matmul(a, b)), w)); }, {{"a", a}, {"b", b}});
}

TEST_F(OpGradients, ChannelOps) {
  auto x = random_leaf({20, 6}, 24);
  auto g = random_leaf({6}, 25);
  auto bias = random_leaf({6}, 26);
  auto s = Tensor<double>::scalar(0.7, true);
  const Tensor<double> w(weights(20, 6));
  check([&] { return sum(mul(add_bias(mul_channels(x, g), bias), w)); }, {{"x", x}, {"g", g}, {"b", bias}});
  check([&] { return sum(mul(scale_by(x, s), w)); }, {{"x", x}, {"s", s}});
}

TEST_F(OpGradients, Normalization) {
  auto x = random_leaf({20, 6}, 27);
  auto g = random_leaf({6}, 28);
  auto b = random_leaf({6}, 29);
  const Tensor<double> w(weights(20, 6));
  check([&] { return sum(mul(layer_norm(x, g, b, 1e-6), w)); }, {{"x", x}, {"g", g}, {"b", b}});
  check([&] { return sum(mul(normalize(x, 0.0), w)); }, {{"x", x}});
}

TEST_F(OpGradients, SoftmaxAndCrossEntropy) {
  auto x = random_leaf({20, 6}, 30);
  const Tensor<double> w(weights(20, 6));
  check([&] { return sum(mul(softmax_last(x), w)); }, {{"x", x}});
  const std::vector<int> labels{0, 5, 2, 3, 1, 4, 0, 0, 1, 2, 3, 4, 5, 5, 4, 3, 2, 1, 0, 1};
  check([&] { return cross_entropy(x, std::span<const int>(labels)); }, {{"x", x}});
}

TEST_F(OpGradients, SequenceOps) {
  auto x = random_leaf({6, 4}, 31);  // 2 sequences of 3 tokens
  auto tok = random_leaf({4}, 32);
  auto pe = random_leaf({4, 4}, 33);
  const Tensor<double> w(weights(8, 4));
  check([&] { return sum(mul(add_per_sequence(prepend_token(x, tok, 2), pe), w)); },
        {{"x", x}, {"tok", tok}, {"pe", pe}});
  const Tensor<double> w2(weights(2, 4));
  check([&] { return sum(mul(take_rows(x, 3, 1), w2)); }, {{"x", x}});
}

TEST(CrossEntropy, MatchesDirectFormula) {
  const auto logits = mat({{1.0, 2.0, 0.5}, {-1.0, 0.0, 3.0}});
  const std::vector<int> labels{1, 0};
  const double got = cross_entropy(logits, std::span<const int>(labels)).item();
  const double l0 = -2.0 + std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5));
  const double l1 = 1.0 + std::log(std::exp(-1.0) + std::exp(0.0) + std::exp(3.0));
  EXPECT_NEAR(got, 0.5 * (l0 + l1), 1e-14);
  const std::vector<int> bad{1, 3};
  EXPECT_THROW(cross_entropy(logits, std::span<const int>(bad)), ContractError);
}

TEST(Rng, DeterministicAndSplitmixReference) {
  // splitmix64 from state 0: first output of the reference generator
  std::uint64_t s = 0;
  EXPECT_EQ(splitmix64(s), 0xe220a8397b1dcdafULL);
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
}

}  // namespace
}  // namespace lape
