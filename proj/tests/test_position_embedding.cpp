#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "lape/correlation.hpp"
#include "test_util.hpp"

namespace lape {
namespace {

TEST(Sinusoidal1D, KnownValues) {
  const auto pe = make_sinusoidal_1d<double>(3, 4);
  const Mat<double>& w = pe.absolute->value();
  ASSERT_EQ(w.rows(), 4);
  EXPECT_TRUE(w.row(0).isZero(0));  // class token
  EXPECT_EQ(w(1, 0), 0.0);
  EXPECT_EQ(w(1, 1), 1.0);
  EXPECT_EQ(w(1, 2), 0.0);
  EXPECT_EQ(w(1, 3), 1.0);
  // patch position 1: sin 1, cos 1, sin 1e-2, cos 1e-2 (30-digit values)
  EXPECT_NEAR(w(2, 0), 0.8414709848078965066525, 1e-15);
  EXPECT_NEAR(w(2, 1), 0.5403023058681397174009, 1e-15);
  EXPECT_NEAR(w(2, 2), 0.009999833334166664682542, 1e-15);
  EXPECT_NEAR(w(2, 3), 0.9999500004166652777803, 1e-15);
}

TEST(Sinusoidal1D, PairsOnUnitCircleAndBounded) {
  const auto pe = make_sinusoidal_1d<double>(196, 192);
  const Mat<double>& w = pe.absolute->value();
  EXPECT_LE(w.cwiseAbs().maxCoeff(), 1.0);
  for (Index p = 1; p < w.rows(); ++p)
    for (Index i = 0; i < 96; ++i)
      EXPECT_NEAR(w(p, 2 * i) * w(p, 2 * i) + w(p, 2 * i + 1) * w(p, 2 * i + 1), 1.0, 1e-12);
  EXPECT_FALSE(pe.absolute->requires_grad());
}

TEST(Sinusoidal1D, OddWidthRejected) { EXPECT_THROW(make_sinusoidal_1d<double>(4, 5), ContractError); }

TEST(Sinusoidal2D, RowAndColumnHalves) {
  const Index h = 3, w = 4, d = 16;
  const auto pe = make_sinusoidal_2d<double>(h, w, d);
  const Mat<double>& m = pe.absolute->value();
  EXPECT_TRUE(m.row(0).isZero(0));
  for (Index a = 0; a < h * w; ++a)
    for (Index b = 0; b < h * w; ++b) {
      if (a / w == b / w) {
        EXPECT_EQ(m.row(1 + a).head(d / 2), m.row(1 + b).head(d / 2));
      }
      if (a % w == b % w) {
        EXPECT_EQ(m.row(1 + a).tail(d / 2), m.row(1 + b).tail(d / 2));
      }
    }
  EXPECT_THROW(make_sinusoidal_2d<double>(2, 2, 18), ContractError);
}

TEST(Sinusoidal2D, SameRowSimilarityFollowsHalfWidth1D) {
  const Index h = 4, w = 6, d = 24;
  const auto pe = make_sinusoidal_2d<double>(h, w, d);
  const auto c = cosine_similarity_matrix(patch_rows(pe.absolute->value()), h, w);
  // Direct evaluation: both halves have squared norm d/4, the row half is
  // shared, so s = 1/2 + (1/2) * s_1d(k) with the 1-D sinusoid of width d/2.
  for (Index k = 0; k < w; ++k) {
    double dot = 0.0;
    for (Index i = 0; i < d / 4; ++i) {
      const double f = std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d / 2));
      dot += std::cos(static_cast<double>(k) / f);  // sin 0 sin(k/f) + cos 0 cos(k/f)
    }
    const double s1d = dot / static_cast<double>(d / 4);
    EXPECT_NEAR(c.s(0, k), 0.5 + 0.5 * s1d, 1e-12) << "k=" << k;
  }
}

TEST(Learnable, DeterministicAndStatistics) {
  const auto a = make_learnable<double>(999, 100, 5);
  const auto b = make_learnable<double>(999, 100, 5);
  EXPECT_TRUE(testing::bitwise_equal(a.absolute->value(), b.absolute->value()));
  EXPECT_TRUE(a.absolute->requires_grad());
  const Mat<double>& v = a.absolute->value();
  ASSERT_EQ(v.size(), 100000);
  const double mean = v.mean();
  const double sd = std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size() - 1));
  EXPECT_LT(std::abs(mean), 3.0 * 0.02 / std::sqrt(1e5));
  EXPECT_NEAR(sd, 0.02, 0.02 * 0.02);
}

TEST(RelativeTable, IndexProperties) {
  const Index h = 3, w = 5;
  const Index center = (h - 1) * (2 * w - 1) + (w - 1);
  for (Index i = 0; i < h * w; ++i) EXPECT_EQ(relative_index(i, i, h, w), center);
  std::map<std::pair<Index, Index>, Index> by_offset;
  std::set<Index> seen;
  for (Index i = 0; i < h * w; ++i)
    for (Index j = 0; j < h * w; ++j) {
      const std::pair<Index, Index> off{i / w - j / w, i % w - j % w};
      const Index k = relative_index(i, j, h, w);
      auto [it, fresh] = by_offset.emplace(off, k);
      if (!fresh) {
        EXPECT_EQ(it->second, k);
      }
      seen.insert(k);
    }
  EXPECT_EQ(seen.size(), by_offset.size());  // injective over offsets
  const auto t = make_relative_table<double>(h, w, 3, 1);
  EXPECT_EQ(t.relative_table->rows(), (2 * h - 1) * (2 * w - 1));
  EXPECT_EQ(t.relative_table->cols(), 3);
  EXPECT_FALSE(t.absolute.has_value());
}

TEST(RelativeTable, TwoByTwoCoversEveryRow) {
  std::vector<int> hits(9, 0);
  const auto map = relative_index_map(2, 2);
  ASSERT_EQ(map.size(), 16u);
  for (const Index k : map) {
    ASSERT_GE(k, 0);
    ASSERT_LT(k, 9);
    ++hits[static_cast<std::size_t>(k)];
  }
  // offsets (dr, dc) in {-1,0,1}^2: 4 pairs at (0,0), 2 at each axis offset, 1 at each diagonal
  const std::vector<int> expect{1, 2, 1, 2, 4, 2, 1, 2, 1};
  EXPECT_EQ(hits, expect);
}

TEST(PeLayerNorm, IdentityOnStandardRowAndScaleInvariance) {
  const auto p = LayerNormParams<double>::identity(2, 0.0);
  Mat<double> row(1, 2);
  row << 1.0, -1.0;
  EXPECT_EQ(apply_pe_ln(Tensor<double>(row), p).value(), row);

  const Mat<double> w = testing::random_matrix(17, 12, 3);
  LayerNormParams<double> q{Tensor<double>(Shape{12}, testing::random_matrix(1, 12, 4)),
                            Tensor<double>(Shape{12}, testing::random_matrix(1, 12, 5)), 0.0};
  const Mat<double> base = apply_pe_ln(Tensor<double>(w), q).value();
  for (double c : {0.5, 2.0, 10.0})
    EXPECT_LT((apply_pe_ln(Tensor<double>(Mat<double>(c * w)), q).value() - base).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_THROW(apply_pe_ln(Tensor<double>(w), LayerNormParams<double>::identity(5, 0.0)), DimensionError);
}

TEST(PeCache, EntriesBitwiseEqualRecompute) {
  const auto omega = *make_learnable<double>(16, 8, 1).absolute;
  std::vector<LayerNormParams<double>> params;
  for (int l = 0; l < 3; ++l)
    params.push_back({Tensor<double>(Shape{8}, testing::random_matrix(1, 8, 10 + l), true),
                      Tensor<double>(Shape{8}, testing::random_matrix(1, 8, 20 + l), true), 1e-6});
  EXPECT_TRUE(build_pe_cache(omega, params, 0).empty());
  const auto cache = build_pe_cache(omega, params, 2);
  EXPECT_EQ(cache.layers(), 2);
  for (Index l = 0; l < 2; ++l)
    EXPECT_TRUE(testing::bitwise_equal(cache.at(l).value(), apply_pe_ln(omega, params[l]).value()));
  EXPECT_THROW(cache.at(2), ContractError);
  EXPECT_THROW(build_pe_cache(omega, params, 4), ContractError);
}

TEST(PeCache, MutationAfterBuildIsDetected) {
  auto omega = *make_learnable<double>(4, 8, 1).absolute;
  std::vector<LayerNormParams<double>> params{LayerNormParams<double>::identity(8, 1e-6),
                                              LayerNormParams<double>::identity(8, 1e-6)};
  const auto cache = build_pe_cache(omega, params, 2);
  EXPECT_NO_THROW(cache.at(1));
  params[1].gamma.mutable_value()(0, 0) = 2.0;
  EXPECT_NO_THROW(cache.at(0));
  EXPECT_THROW(cache.at(1), StaleCacheError);
  omega.mutable_value()(0, 0) = 1.0;
  EXPECT_THROW(cache.at(0), StaleCacheError);
}

}  // namespace
}  // namespace lape
