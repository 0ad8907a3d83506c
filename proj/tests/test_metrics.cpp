#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "lrsc/metrics.hpp"

using namespace lrsc;
using fixtures::gaussian;

namespace {

Decomposition factors(std::mt19937_64& rng, Eigen::Index n, Eigen::Index p, std::shared_ptr<const DenseMatrix> common,
                      Eigen::Index individual, std::size_t q) {
  Decomposition d;
  d.layer = "x";
  const Eigen::Index mc = common ? common->rows() : 0;
  d.u = mc + individual > 0 ? qr_thin(gaussian(rng, n, mc + individual)).q : DenseMatrix(n, 0);
  d.v_common = common ? common : std::make_shared<const DenseMatrix>(0, p);
  d.v_individual = gaussian(rng, individual, p);
  d.s = top_q_project(gaussian(rng, n, p), q);
  d.rank_budget = std::size_t(mc + individual);
  d.card_budget = q;
  return d;
}

LayerTensor conv_from_rows(const std::string& name, const DenseMatrix& rows, std::size_t k, std::size_t depth) {
  return reconstruct_layer(rows, LayerShape::conv(k, k, depth, std::size_t(rows.rows())), name);
}

}  // namespace

TEST(CompressionRate, Examples) {
  EXPECT_EQ(format_rate(compression_rate(138e6, 9e6)), "15.3");
  EXPECT_EQ(format_rate(compression_rate(138344128, 9e6)), "15.4");
  EXPECT_EQ(compression_rate(5, 5), 1.0);
  EXPECT_EQ(format_rate(compression_rate(7e6, 0.95e6)), "7.4");
  EXPECT_EQ(format_rate(compression_rate(7e6, 1.3e6)), "5.4");
  EXPECT_THROW(compression_rate(10, 0), PreconditionError);
}

TEST(CompressionRate, Chains) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(1.0, 1e7);
  for (int i = 0; i < 100; ++i) {
    const double a = u(rng), b = u(rng), c = u(rng);
    EXPECT_NEAR(compression_rate(a, b) * compression_rate(b, c) / compression_rate(a, c), 1.0, 1e-12);
  }
}

TEST(ParameterCount, SingleLayerClosedForm) {
  std::mt19937_64 rng(2);
  GroupDecomposition gd;
  gd.members.push_back(factors(rng, 100, 100, nullptr, 10, 100));
  const auto c = parameter_count(gd);
  EXPECT_EQ(c.total_original, 10000u);
  EXPECT_EQ(c.total_compressed, 2100u);
  EXPECT_EQ(c.per_layer[0].closed_form, 2100.0);
  EXPECT_EQ(c.per_layer[0].compressed, 2100.0);
  EXPECT_EQ(format_rate(c.rate()), "4.8");
  EXPECT_NEAR(c.rate(), 10000.0 / 2100.0, 1e-15);
}

TEST(ParameterCount, SharedBlockCountedOnce) {
  std::mt19937_64 rng(3);
  GroupDecomposition gd;
  gd.v_common = std::make_shared<const DenseMatrix>(gaussian(rng, 2, 4));
  gd.members.push_back(factors(rng, 4, 4, gd.v_common, 1, 0));
  gd.members.push_back(factors(rng, 4, 4, gd.v_common, 1, 0));
  const auto c = parameter_count(gd);
  EXPECT_EQ(c.total_compressed, 40u);
  EXPECT_EQ(c.per_layer[0].compressed, 20.0);  // 4*3 + 1*4 + 8/2
  EXPECT_EQ(c.per_layer[0].closed_form, (1.0 + 2.0 / 2.0) * 8.0);
}

TEST(ParameterCount, InvariantUnderMemberOrder) {
  std::mt19937_64 rng(4);
  GroupDecomposition gd;
  gd.v_common = std::make_shared<const DenseMatrix>(gaussian(rng, 3, 12));
  gd.members.push_back(factors(rng, 8, 12, gd.v_common, 2, 5));
  gd.members.push_back(factors(rng, 10, 12, gd.v_common, 1, 9));
  gd.members.push_back(factors(rng, 6, 12, gd.v_common, 3, 0));
  const auto a = parameter_count(gd);
  std::reverse(gd.members.begin(), gd.members.end());
  const auto b = parameter_count(gd);
  EXPECT_EQ(a.total_compressed, b.total_compressed);
  EXPECT_EQ(a.total_original, b.total_original);
  double rows = 0.0;
  for (const auto& r : a.per_layer) rows += r.compressed;
  EXPECT_NEAR(rows, double(a.total_compressed), 1e-9);
}

TEST(ReconstructionError, ExactZeroAndSvdTail) {
  std::mt19937_64 rng(5);
  const DenseMatrix w = gaussian(rng, 12, 9);
  Decomposition exact;
  exact.u = DenseMatrix(12, 0);
  exact.v_individual = DenseMatrix(0, 9);
  exact.s = SparseMatrix::from_dense(w);
  EXPECT_EQ(reconstruction_error(w, exact), 0.0);

  Decomposition zero;
  zero.u = DenseMatrix(12, 0);
  zero.v_individual = DenseMatrix(0, 9);
  zero.s = SparseMatrix(12, 9);
  EXPECT_EQ(reconstruction_error(w, zero), 1.0);
  EXPECT_EQ(reconstruction_error(DenseMatrix::Zero(12, 9), zero), 0.0);

  const auto svd = truncated_svd(w, 3);
  Decomposition low;
  low.u = svd.u;
  low.v_individual = svd.singular.asDiagonal() * svd.v.transpose();
  low.s = SparseMatrix(12, 9);
  Eigen::JacobiSVD<DenseMatrix> full(w);
  const Vector sv = full.singularValues();
  EXPECT_NEAR(reconstruction_error(w, low), sv.tail(sv.size() - 3).norm() / sv.norm(), 1e-12);

  EXPECT_THROW(reconstruction_error(DenseMatrix::Zero(3, 3), zero), PreconditionError);
}

TEST(OutputError, CalibrationPairs) {
  std::mt19937_64 rng(6);
  const DenseMatrix w = gaussian(rng, 5, 4), x = gaussian(rng, 4, 20);
  Decomposition d;
  d.u = DenseMatrix(5, 0);
  d.v_individual = DenseMatrix(0, 4);
  d.s = SparseMatrix::from_dense(w);
  EXPECT_NEAR(output_error({x, w * x}, d), 0.0, 1e-15);
  d.s = SparseMatrix(5, 4);
  EXPECT_EQ(output_error({x, w * x}, d), 1.0);
}

TEST(ApplyCompressed, SeparatePaths) {
  std::mt19937_64 rng(7);
  auto d = factors(rng, 9, 7, std::make_shared<const DenseMatrix>(gaussian(rng, 2, 7)), 2, 0);
  const Vector x = gaussian(rng, 7, 1);
  EXPECT_LE((apply_compressed(d, x) - d.u * (d.v() * x)).norm(), 1e-12);

  Decomposition sparse_only;
  sparse_only.u = DenseMatrix(9, 0);
  sparse_only.v_individual = DenseMatrix(0, 7);
  sparse_only.s = top_q_project(gaussian(rng, 9, 7), 6);
  EXPECT_EQ(apply_compressed(sparse_only, x), sparse_only.s.apply(x));

  EXPECT_THROW(apply_compressed(d, Vector::Ones(3)), PreconditionError);
}

TEST(ApplyCompressed, MatchesDenseOnRandomProbes) {
  std::mt19937_64 rng(8);
  const auto d = factors(rng, 40, 30, std::make_shared<const DenseMatrix>(gaussian(rng, 3, 30)), 4, 50);
  const DenseMatrix dense = d.dense();
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Vector x = gaussian(rng, 30, 1);
    const Vector ref = dense * x;
    worst = std::max(worst, (apply_compressed(d, x) - ref).norm() / ref.norm());
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(FindCorrespondences, SeparatedClusters) {
  DenseMatrix a(2, 1), b(2, 1);
  a << 0, 1;
  b << 0.1, 0.9;
  const auto pairs = find_correspondences(conv_from_rows("a", a, 1, 1), conv_from_rows("b", b, 1, 1));
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0].index_a, pairs[0].index_b);
  EXPECT_EQ(pairs[1].index_a, pairs[1].index_b);
  EXPECT_NEAR(pairs[0].distance, 0.1, 1e-12);
}

TEST(FindCorrespondences, IdenticalLayers) {
  std::mt19937_64 rng(9);
  const auto t = conv_from_rows("a", gaussian(rng, 12, 18), 3, 2);
  const auto pairs = find_correspondences(t, t);
  ASSERT_EQ(pairs.size(), 12u);
  for (const auto& p : pairs) {
    EXPECT_EQ(p.index_a, p.index_b);
    EXPECT_EQ(p.distance, 0.0);
  }
}

TEST(FindCorrespondences, MatchesBruteForceAndIsSymmetric) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const DenseMatrix fa = gaussian(rng, 10, 27), fb = gaussian(rng, 10, 27);
    const auto a = conv_from_rows("a", fa, 3, 3), b = conv_from_rows("b", fb, 3, 3);
    std::vector<std::pair<std::size_t, std::size_t>> oracle;
    for (Eigen::Index i = 0; i < 10; ++i) {
      Eigen::Index best_j = 0;
      for (Eigen::Index j = 1; j < 10; ++j)
        if ((fa.row(i) - fb.row(j)).norm() < (fa.row(i) - fb.row(best_j)).norm()) best_j = j;
      Eigen::Index best_i = 0;
      for (Eigen::Index k = 1; k < 10; ++k)
        if ((fa.row(k) - fb.row(best_j)).norm() < (fa.row(best_i) - fb.row(best_j)).norm()) best_i = k;
      if (best_i == i) oracle.emplace_back(std::size_t(i), std::size_t(best_j));
    }
    const auto pairs = find_correspondences(a, b);
    std::vector<std::pair<std::size_t, std::size_t>> got;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      got.emplace_back(pairs[k].index_a, pairs[k].index_b);
      if (k > 0) {
        EXPECT_LE(pairs[k - 1].distance, pairs[k].distance);
      }
    }
    std::sort(got.begin(), got.end());
    EXPECT_EQ(got, oracle);

    std::vector<std::pair<std::size_t, std::size_t>> swapped;
    for (const auto& p : find_correspondences(b, a)) swapped.emplace_back(p.index_b, p.index_a);
    std::sort(swapped.begin(), swapped.end());
    EXPECT_EQ(swapped, got);
  }
}

TEST(FindCorrespondences, DifferentDepthsCompareChunks) {
  std::mt19937_64 rng(11);
  const auto a = conv_from_rows("a", gaussian(rng, 4, 9 * 4), 3, 4);
  const auto b = conv_from_rows("b", gaussian(rng, 5, 9 * 6), 3, 6);  // gcd 2
  const auto pairs = find_correspondences(a, b);
  for (const auto& p : pairs) {
    EXPECT_LT(p.index_a, 8u);  // 4 filters x 2 chunks
    EXPECT_LT(p.index_b, 15u);
  }
  EXPECT_FALSE(pairs.empty());
}

TEST(FindCorrespondences, MismatchedKernels) {
  std::mt19937_64 rng(12);
  const auto a = conv_from_rows("a", gaussian(rng, 3, 9), 3, 1);
  const auto b = conv_from_rows("b", gaussian(rng, 3, 1), 1, 1);
  EXPECT_THROW(find_correspondences(a, b), AnalysisError);
  const auto f = reconstruct_layer(gaussian(rng, 3, 9), LayerShape::fully_connected(3, 9), "f");
  EXPECT_THROW(find_correspondences(a, f), AnalysisError);
}

TEST(Report, SumRowsAndRows) {
  const auto row = make_row("fc8", 1000000, 200000);
  EXPECT_EQ(format_rate(row.rate), "5.0");
  const auto totals = sum_rows({make_row("a", 100, 10.5), make_row("b", 50, 4.5)});
  EXPECT_EQ(totals.original_params, 150u);
  EXPECT_EQ(totals.compressed_params, 15u);
  EXPECT_EQ(totals.rate, 10.0);
  EXPECT_EQ(sum_rows({}).rate, 0.0);
}
