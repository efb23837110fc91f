#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "tbfm/ot_coupling.hpp"

using namespace tbfm;

namespace {

RowMatrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  RowMatrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

double brute_force_min(const RowMatrix& cost) {
  std::vector<std::size_t> p(static_cast<std::size_t>(cost.rows()));
  std::iota(p.begin(), p.end(), 0);
  double best = 1e300;
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) c += cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p[i]));
    best = std::min(best, c);
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

}  // namespace

TEST(CostMatrix, Examples) {
  RowMatrix e(1, 1), x(1, 1);
  e << 0.0;
  x << 3.0;
  EXPECT_EQ(cost_matrix(e, x)(0, 0), 9.0);
  Rng rng(1);
  const RowMatrix same = random_matrix(5, 3, rng);
  const RowMatrix c = cost_matrix(same, same);
  for (Eigen::Index i = 0; i < 5; ++i) EXPECT_EQ(c(i, i), 0.0);
  EXPECT_THROW(cost_matrix(random_matrix(3, 2, rng), random_matrix(4, 2, rng)), ValidationError);
  EXPECT_THROW(cost_matrix(random_matrix(3, 2, rng), random_matrix(3, 3, rng)), ValidationError);
}

TEST(CostMatrix, MatchesDoubleLoop) {
  Rng rng(2);
  const RowMatrix e = random_matrix(8, 16, rng), x = random_matrix(8, 16, rng);
  const RowMatrix c = cost_matrix(e, x);
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 8; ++j) {
      double acc = 0.0;
      for (int q = 0; q < 16; ++q) acc += (e(i, q) - x(j, q)) * (e(i, q) - x(j, q));
      EXPECT_NEAR(c(i, j), acc, 1e-12);
    }
  }
}

TEST(SolveAssignment, HandCases) {
  RowMatrix a(2, 2);
  a << 1, 2, 2, 1;
  auto r = solve_assignment(a);
  EXPECT_EQ(r.permutation, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(r.total_cost, 2.0);
  a << 0, 1, 1, 0;
  EXPECT_EQ(solve_assignment(a).total_cost, 0.0);
  a << 5, 1, 1, 5;
  r = solve_assignment(a);
  EXPECT_EQ(r.permutation, (std::vector<std::size_t>{1, 0}));
  EXPECT_EQ(solve_assignment(RowMatrix(0, 0)).permutation.size(), 0u);
  a << 1, std::nan(""), 0, 1;
  EXPECT_THROW(solve_assignment(a), ValidationError);
  EXPECT_THROW(solve_assignment(RowMatrix::Ones(2, 3)), ValidationError);
}

TEST(SolveAssignment, TiesResolveDeterministically) {
  const RowMatrix flat = RowMatrix::Ones(5, 5);
  const auto a = solve_assignment(flat);
  const auto b = solve_assignment(flat);
  EXPECT_EQ(a.permutation, b.permutation);
  EXPECT_TRUE(is_permutation(a.permutation));
  EXPECT_EQ(a.total_cost, 5.0);
}

TEST(SolveAssignment, EqualsBruteForceForSmallBatches) {
  Rng rng(3);
  for (Eigen::Index B = 2; B <= 7; ++B) {
    for (int trial = 0; trial < 100; ++trial) {
      RowMatrix c(B, B);
      for (Eigen::Index i = 0; i < c.size(); ++i)
        c.data()[i] = trial % 3 == 0 ? std::floor(rng.uniform() * 4) : rng.uniform() * 10;  // integer ties too
      const auto r = solve_assignment(c);
      ASSERT_TRUE(is_permutation(r.permutation));
      double sum = 0.0;
      for (Eigen::Index i = 0; i < B; ++i) sum += c(i, static_cast<Eigen::Index>(r.permutation[i]));
      EXPECT_NEAR(r.total_cost, sum, 1e-12 * sum);
      EXPECT_NEAR(r.total_cost, brute_force_min(c), 1e-9) << "B=" << B;
    }
  }
}

TEST(SolveAssignment, NoWorseThanIdentity) {
  Rng rng(4);
  const auto m = make_model(16, 4, {9.9, 9.9, 9.9, 9.9}, 0.1);
  RowMatrix eps = random_matrix(64, 16, rng), x(64, 16);
  for (Eigen::Index i = 0; i < 64; ++i) m.draw_data(rng, {&x(i, 0), 16});
  const RowMatrix c = cost_matrix(eps, x);
  const auto r = solve_assignment(c);
  EXPECT_LT(r.total_cost, c.trace());
}

TEST(PairMinibatch, OneDimensionalIsSortedMatching) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index B = 2 + trial % 40;
    const RowMatrix e = random_matrix(B, 1, rng), x = random_matrix(B, 1, rng);
    const auto paired = pair_minibatch(e, x);
    std::vector<Eigen::Index> ei(B), xi(B);
    std::iota(ei.begin(), ei.end(), 0);
    std::iota(xi.begin(), xi.end(), 0);
    std::sort(ei.begin(), ei.end(), [&](auto a, auto b) { return e(a, 0) < e(b, 0); });
    std::sort(xi.begin(), xi.end(), [&](auto a, auto b) { return x(a, 0) < x(b, 0); });
    for (Eigen::Index r = 0; r < B; ++r)
      EXPECT_EQ(paired.assignment.permutation[ei[r]], static_cast<std::size_t>(xi[r]));
  }
}

TEST(PairMinibatch, OutputIsRowPermutation) {
  Rng rng(6);
  const RowMatrix e = random_matrix(1, 3, rng), x = random_matrix(1, 3, rng);
  EXPECT_EQ(pair_minibatch(e, x).x, x);
  const RowMatrix e2 = random_matrix(10, 3, rng), x2 = random_matrix(10, 3, rng);
  const auto p = pair_minibatch(e2, x2);
  for (Eigen::Index i = 0; i < 10; ++i)
    EXPECT_EQ(p.x.row(i), x2.row(static_cast<Eigen::Index>(p.assignment.permutation[i])));
}

TEST(CouplingCost, IndependentMatchesTermOne) {
  const auto m = make_model(16, 4, equal_spikes_from_total(4, 10.0, 0.1), 0.1);
  const auto s = coupling_cost_stats(m, CouplingMode::independent, 16, 500, 7);
  EXPECT_NEAR(s.mean_pair_cost, term_one(m), 3 * s.std_error);
  EXPECT_GE(s.mean_pair_cost, 0.0);
}

TEST(CouplingCost, BatchOfOneHasNoFreedom) {
  const auto m = make_model(16, 4, equal_spikes_from_total(4, 10.0, 0.1), 0.1);
  const auto a = coupling_cost_stats(m, CouplingMode::independent, 1, 300, 8);
  const auto b = coupling_cost_stats(m, CouplingMode::minibatch_ot, 1, 300, 8);
  EXPECT_EQ(a.mean_pair_cost, b.mean_pair_cost);
}

TEST(CouplingCost, OtCostDecreasesWithBatchSize) {
  const auto m = make_model(16, 4, equal_spikes_from_total(4, 10.0, 0.1), 0.1);
  const auto b1 = coupling_cost_stats(m, CouplingMode::minibatch_ot, 1, 500, 9);
  const auto b8 = coupling_cost_stats(m, CouplingMode::minibatch_ot, 8, 500, 10);
  const auto b64 = coupling_cost_stats(m, CouplingMode::minibatch_ot, 64, 500, 11);
  EXPECT_GT(b1.mean_pair_cost - b8.mean_pair_cost, 3 * std::hypot(b1.std_error, b8.std_error));
  EXPECT_GT(b8.mean_pair_cost - b64.mean_pair_cost, 3 * std::hypot(b8.std_error, b64.std_error));
}

TEST(CouplingCost, ThreadCountDoesNotChangeResult) {
  const auto m = make_model(8, 2, {3, 3}, 0.1);
  const auto a = coupling_cost_stats(m, CouplingMode::minibatch_ot, 16, 50, 12, 1);
  const auto b = coupling_cost_stats(m, CouplingMode::minibatch_ot, 16, 50, 12, 4);
  EXPECT_EQ(a.mean_pair_cost, b.mean_pair_cost);
  EXPECT_EQ(a.std_error, b.std_error);
  EXPECT_THROW(coupling_cost_stats(m, CouplingMode::independent, 0, 5, 1), ValidationError);
}
