#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include "tbfm/pca_fit.hpp"

namespace fs = std::filesystem;
using namespace tbfm;

namespace {

RowMatrix draws(const SpikedModel& m, std::size_t n, std::uint64_t seed) {
  return sample_batch(m, n, FixedTime{1.0}, seed).x;
}

RowMatrix random_orthonormal(std::size_t d, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd g(d, k);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return qr.householderQ() * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
}

}  // namespace

TEST(SampleCovariance, HandCases) {
  RowMatrix same(2, 3);
  same << 1, 2, 3, 1, 2, 3;
  EXPECT_EQ(sample_covariance(same).cov.cwiseAbs().maxCoeff(), 0.0);
  RowMatrix two(2, 2);
  two << 1, 0, -1, 0;
  const auto sc = sample_covariance(two);
  EXPECT_EQ(sc.mean, Vector::Zero(2));
  EXPECT_DOUBLE_EQ(sc.cov(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(sc.cov(1, 1), 0.0);
  EXPECT_THROW(sample_covariance(RowMatrix::Ones(1, 3)), ValidationError);
}

TEST(SampleCovariance, MatchesTrueCovarianceWithinSamplingError) {
  const auto m = make_model(64, 4, {3, 6, 9, 12}, 0.5);
  const std::size_t n = 100000;
  const auto sc = sample_covariance(draws(m, n, 1));
  EXPECT_LT((sc.cov - sc.cov.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  for (std::size_t i = 0; i < 64; ++i) {
    for (std::size_t j = 0; j < 64; ++j) {
      const double truth = i == j ? m.eigenvalue(i) : 0.0;
      const double sd = std::sqrt((m.eigenvalue(i) * m.eigenvalue(j) + truth * truth) / n);
      EXPECT_LE(std::abs(sc.cov(i, j) - truth), 5.0 * sd) << i << "," << j;
    }
  }
}

TEST(SymEig, HandCases) {
  Eigen::MatrixXd a = Eigen::Vector3d(3, 1, 2).asDiagonal();
  const auto e = sym_eig(a);
  EXPECT_NEAR(e.values[0], 3, 1e-14);
  EXPECT_NEAR(e.values[1], 2, 1e-14);
  EXPECT_NEAR(e.values[2], 1, 1e-14);
  EXPECT_NEAR(e.vectors(0, 0), 1.0, 1e-14);
  EXPECT_NEAR(e.vectors(2, 1), 1.0, 1e-14);

  const double c = std::sqrt(0.5);
  Eigen::Matrix2d R;
  R << c, -c, c, c;
  const Eigen::MatrixXd rot = R * Eigen::Vector2d(5, 1).asDiagonal() * R.transpose();
  const auto r = sym_eig(rot);
  EXPECT_NEAR(r.values[0], 5, 1e-12);
  EXPECT_NEAR(r.values[1], 1, 1e-12);
  EXPECT_NEAR(r.vectors(0, 0), c, 1e-12);
  EXPECT_NEAR(r.vectors(1, 0), c, 1e-12);
  EXPECT_GT(r.vectors(0, 1), 0.0);  // sign convention

  Eigen::MatrixXd asym(2, 2);
  asym << 1, 2, 3, 1;
  EXPECT_THROW(sym_eig(asym), ValidationError);
}

TEST(SymEig, ResidualAndReconstructionOnRandomMatrix) {
  Rng rng(2);
  Eigen::MatrixXd g(128, 128);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  const Eigen::MatrixXd A = 0.5 * (g + g.transpose());
  const auto e = sym_eig(A);
  const double norm = A.norm();
  for (Eigen::Index j = 0; j < 128; ++j) {
    const Vector v = e.vectors.col(j);
    EXPECT_LE((A * v - e.values[j] * v).norm(), 1e-8 * norm);
    if (j) {
      EXPECT_LE(e.values[j], e.values[j - 1]);
    }
  }
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(128, 128);
  for (Eigen::Index j = 0; j < 128; ++j) L(j, j) = e.values[j];
  EXPECT_LE((e.vectors * L * e.vectors.transpose() - A).norm(), 1e-6 * norm);
  EXPECT_LE((e.vectors.transpose() * e.vectors - Eigen::MatrixXd::Identity(128, 128)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(ChooseK, Examples) {
  EXPECT_EQ(choose_k(std::vector<double>{9, 1}, 0.9), 1u);
  EXPECT_EQ(choose_k(std::vector<double>{1, 1, 1, 1}, 0.95), 3u);
  EXPECT_EQ(choose_k(std::vector<double>{4, 3, 2, 1}, 0.7), 2u);  // exact tie: smallest k
  EXPECT_THROW(choose_k(std::vector<double>{0, 0}, 0.5), ValidationError);
  EXPECT_THROW(choose_k(std::vector<double>{1, 2}, 0.5), ValidationError);
  EXPECT_THROW(choose_k(std::vector<double>{2, 1}, 1.0), ValidationError);
}

TEST(ChooseK, FindsStrongSpikes) {
  const auto m = make_model(64, 10, std::vector<double>(10, 100.0), 0.01);
  const auto fit = fit_spiked(draws(m, 5000, 3), ThresholdRank{0.95});
  EXPECT_EQ(fit.k, 10u);
}

TEST(RankRule, Parsing) {
  EXPECT_EQ(std::get<FixedRank>(parse_rank_rule("fixed:8")).k, 8u);
  EXPECT_DOUBLE_EQ(std::get<ThresholdRank>(parse_rank_rule("threshold:0.9")).fraction, 0.9);
  EXPECT_THROW(parse_rank_rule("fixed"), ValidationError);
  EXPECT_THROW(parse_rank_rule("top:3"), ValidationError);
  EXPECT_EQ(to_string(parse_rank_rule("fixed:3")), "fixed:3");
}

TEST(FitSpiked, RoundTripAtKnownRank) {
  const std::size_t d = 128, k = 8;
  const RowMatrix U = random_orthonormal(d, k, 5);
  const auto m = make_model(d, k, std::vector<double>(k, 5.0), 0.1, ExplicitBasis{U});
  const auto fit = fit_spiked(draws(m, 100000, 6), FixedRank{k});
  EXPECT_NEAR(fit.sigma2, 0.1, 0.005);
  EXPECT_LE(max_principal_angle_deg(fit.basis, U), 5.0);
  for (double l : fit.lambdas) EXPECT_NEAR(l, 5.0, 0.3);
  for (std::size_t i = 1; i < k; ++i) EXPECT_LE(fit.lambdas[i], fit.lambdas[i - 1]);
  EXPECT_LE((fit.basis.transpose() * fit.basis - Eigen::MatrixXd::Identity(k, k)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(FitSpiked, ThresholdRuleMatchesCumulativeSpectrum) {
  const auto m = make_model(128, 8, std::vector<double>(8, 5.0), 0.1);
  const auto fit = fit_spiked(draws(m, 20000, 7), ThresholdRank{0.95});
  // Independent recount on the fitted spectrum.
  const double total = std::accumulate(fit.spectrum.begin(), fit.spectrum.end(), 0.0);
  double cum = 0.0;
  std::size_t k = 0;
  while (cum < 0.95 * total) cum += fit.spectrum[k++];
  EXPECT_EQ(fit.k, k);
  EXPECT_GT(fit.k, 8u);  // the floor carries 23% of the variance here
}

TEST(FitSpiked, TracePreservation) {
  const auto m = make_model(20, 3, {4, 2, 1}, 0.3);
  const RowMatrix X = draws(m, 3000, 8);
  const double tr = sample_covariance(X).cov.trace();
  const auto fit = fit_spiked(X, FixedRank{3});
  const double rebuilt = 20 * fit.sigma2 + std::accumulate(fit.lambdas.begin(), fit.lambdas.end(), 0.0);
  EXPECT_NEAR(rebuilt, tr, 1e-10 * tr);
  const auto over = fit_spiked(X, FixedRank{10});  // some excesses clip to zero
  const double rebuilt_over = 20 * over.sigma2 + std::accumulate(over.lambdas.begin(), over.lambdas.end(), 0.0);
  EXPECT_LE(rebuilt_over, tr + 1e-10 * tr);
}

TEST(FitSpiked, IsotropicDataHasNoSpikes) {
  const auto m = make_model(16, 0, {}, 1.0);
  const auto fit = fit_spiked(draws(m, 50000, 9), FixedRank{2});
  for (double l : fit.lambdas) EXPECT_LT(l, 0.1);
}

TEST(FitSpiked, DegenerateInputs) {
  RowMatrix rep(5, 3);
  rep.rowwise() = Eigen::RowVector3d(1, 2, 3);
  EXPECT_THROW(fit_spiked(rep, FixedRank{1}), ValidationError);
  EXPECT_THROW(fit_spiked(RowMatrix::Random(10, 3), FixedRank{3}), ValidationError);
}

TEST(FitSpiked, DeterministicAndSerializable) {
  const auto m = make_model(12, 2, {3, 1}, 0.2);
  const RowMatrix X = draws(m, 2000, 10);
  const auto a = fit_spiked(X, ThresholdRank{0.5});
  const auto b = fit_spiked(X, ThresholdRank{0.5});
  EXPECT_EQ(a.basis, b.basis);
  EXPECT_EQ(a.lambdas, b.lambdas);

  const auto dir = fs::temp_directory_path() / "tbfm_fit_roundtrip";
  fs::remove_all(dir);
  write_fitted(dir, a);
  const auto back = read_fitted(dir);
  EXPECT_EQ(back.k, a.k);
  EXPECT_EQ(back.sigma2, a.sigma2);
  EXPECT_EQ(back.lambdas, a.lambdas);
  EXPECT_EQ(back.basis, a.basis);
  EXPECT_EQ(back.mean, a.mean);
  EXPECT_NO_THROW(back.to_model());
}

TEST(FittedTransfer, NonGaussianDataWithinTwiceTheory) {
  // Uniform marginals (variance 5) in a random 4-dim subspace plus isotropic noise.
  const std::size_t d = 64, k = 4, n = 20000;
  const RowMatrix U = random_orthonormal(d, k, 11);
  Rng rng(12);
  RowMatrix X(n, d);
  const double a = std::sqrt(15.0);
  for (std::size_t i = 0; i < n; ++i) {
    Vector coeff(k);
    for (std::size_t j = 0; j < k; ++j) coeff[j] = rng.uniform(-a, a);
    Vector row = U * coeff;
    for (std::size_t j = 0; j < d; ++j) row[j] += std::sqrt(0.1) * rng.normal();
    X.row(i) = row.transpose();
  }
  const auto fit = fit_spiked(X, FixedRank{k});
  EXPECT_NEAR(fit.sigma2, 0.1, 0.01);
  const auto tr = fitted_transfer(X, fit, 5000, 13);
  const double theory_mae = std::sqrt(2.0 / M_PI) * tr.theory_std;
  EXPECT_LE(tr.mae, 2.0 * theory_mae);
  EXPECT_GE(tr.mae, 0.5 * theory_mae);
}
