#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tbfm/common.hpp"
#include "tbfm/decomposition.hpp"
#include "tbfm/parallel.hpp"
#include "tbfm/rng.hpp"
#include "tbfm/spiked_model.hpp"

namespace tbfm {

struct AssignmentResult {
  /// Row i is matched to column permutation[i].
  std::vector<std::size_t> permutation;
  double total_cost = 0.0;
};

inline bool is_permutation(std::span<const std::size_t> perm) {
  std::vector<char> seen(perm.size(), 0);
  for (std::size_t p : perm) {
    if (p >= perm.size() || seen[p]) return false;
    seen[p] = 1;
  }
  return true;
}

/// Squared Euclidean cost ||eps_i - x_j||^2.
inline RowMatrix cost_matrix(const RowMatrix& eps_batch, const RowMatrix& x_batch) {
  require(eps_batch.rows() == x_batch.rows(), "noise and data batches must have the same size");
  require(eps_batch.cols() == x_batch.cols(), "noise and data batches must have the same dimension");
  const Eigen::Index B = eps_batch.rows();
  RowMatrix C(B, B);
  for (Eigen::Index i = 0; i < B; ++i)
    for (Eigen::Index j = 0; j < B; ++j) C(i, j) = (eps_batch.row(i) - x_batch.row(j)).squaredNorm();
  return C;
}

/// Exact minimum-cost perfect matching on a square cost matrix.
///
/// Shortest augmenting paths with row/column potentials, O(B^3). Rows are
/// inserted in index order and ties resolve to the lowest column index, so
/// the result is deterministic among equal-cost matchings.
inline AssignmentResult solve_assignment(const RowMatrix& cost) {
  require(cost.rows() == cost.cols(), "cost matrix must be square");
  const std::size_t n = static_cast<std::size_t>(cost.rows());
  for (Eigen::Index i = 0; i < cost.size(); ++i)
    require(std::isfinite(cost.data()[i]), "cost matrix has non-finite entries");

  AssignmentResult result;
  if (n == 0) return result;

  constexpr double kInf = std::numeric_limits<double>::infinity();
  constexpr std::size_t kNone = 0;  // column 0 is a virtual source
  // 1-based columns; col_row[j] is the row matched to column j (0 = free).
  std::vector<double> row_pot(n + 1, 0.0), col_pot(n + 1, 0.0);
  std::vector<std::size_t> col_row(n + 1, 0), prev(n + 1, 0);
  std::vector<double> dist(n + 1);
  std::vector<char> done(n + 1);

  for (std::size_t row = 1; row <= n; ++row) {
    col_row[0] = row;
    std::size_t j0 = 0;
    std::fill(dist.begin(), dist.end(), kInf);
    std::fill(done.begin(), done.end(), 0);
    do {
      done[j0] = 1;
      const std::size_t i0 = col_row[j0];
      double delta = kInf;
      std::size_t j1 = kNone;
      for (std::size_t j = 1; j <= n; ++j) {
        if (done[j]) continue;
        const double reduced = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) -
                               row_pot[i0] - col_pot[j];
        if (reduced < dist[j]) {
          dist[j] = reduced;
          prev[j] = j0;
        }
        if (dist[j] < delta) {
          delta = dist[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (done[j]) {
          row_pot[col_row[j]] += delta;
          col_pot[j] -= delta;
        } else {
          dist[j] -= delta;
        }
      }
      j0 = j1;
    } while (col_row[j0] != 0);
    do {
      const std::size_t j1 = prev[j0];
      col_row[j0] = col_row[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  result.permutation.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) result.permutation[col_row[j] - 1] = j - 1;
  CompensatedSum total;
  for (std::size_t i = 0; i < n; ++i)
    total.add(cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(result.permutation[i])));
  result.total_cost = total.value();
#ifdef TBFM_CHECKED
  if (!is_permutation(result.permutation)) throw std::logic_error("solve_assignment produced a non-bijection");
#endif
  return result;
}

struct PairedBatch {
  RowMatrix x;  // row i is x_batch row permutation[i]
  AssignmentResult assignment;
};

/// Reorders the data batch so row i is the OT partner of eps_i.
inline PairedBatch pair_minibatch(const RowMatrix& eps_batch, const RowMatrix& x_batch) {
  PairedBatch out;
  out.assignment = solve_assignment(cost_matrix(eps_batch, x_batch));
  out.x.resize(x_batch.rows(), x_batch.cols());
  for (Eigen::Index i = 0; i < x_batch.rows(); ++i)
    out.x.row(i) = x_batch.row(static_cast<Eigen::Index>(out.assignment.permutation[static_cast<std::size_t>(i)]));
  return out;
}

// ---------------------------------------------------------------------------

enum class CouplingMode { independent, minibatch_ot };

inline const char* to_string(CouplingMode m) {
  return m == CouplingMode::independent ? "independent" : "minibatch_ot";
}

struct CouplingCostStats {
  CouplingMode mode = CouplingMode::independent;
  std::size_t batch_size = 0;
  std::size_t n_batches = 0;
  /// Mean ||x - eps||^2 per pair.
  double mean_pair_cost = 0.0;
  /// Standard error across per-batch means.
  double std_error = 0.0;
};

/// Mean squared pair distance under a coupling. Batch b draws B noise rows
/// then B data rows from stream derive_seed(seed, {b}); both modes see the
/// same draws for the same seed.
inline CouplingCostStats coupling_cost_stats(const SpikedModel& model, CouplingMode mode,
                                             std::size_t batch_size, std::size_t n_batches,
                                             std::uint64_t seed, unsigned jobs = 0) {
  require(batch_size >= 1, "batch size must be at least 1");
  require(n_batches >= 1, "number of batches must be at least 1");
  const auto B = static_cast<Eigen::Index>(batch_size);
  const auto d = static_cast<Eigen::Index>(model.dim());
  std::vector<double> per_batch(n_batches);
  parallel_for(n_batches, jobs, [&](std::size_t b) {
    Rng rng(derive_seed(seed, {b}));
    RowMatrix eps(B, d), x(B, d);
    for (Eigen::Index i = 0; i < B; ++i)
      for (Eigen::Index j = 0; j < d; ++j) eps(i, j) = rng.normal();
    for (Eigen::Index i = 0; i < B; ++i) model.draw_data(rng, {&x(i, 0), static_cast<std::size_t>(d)});
    double total;
    if (mode == CouplingMode::independent) {
      total = (x - eps).squaredNorm();
    } else {
      total = solve_assignment(cost_matrix(eps, x)).total_cost;
    }
    per_batch[b] = total / static_cast<double>(batch_size);
  });
  detail::Moments m;
  for (double v : per_batch) m.add(v);
  CouplingCostStats s;
  s.mode = mode;
  s.batch_size = batch_size;
  s.n_batches = n_batches;
  s.mean_pair_cost = m.mean;
  s.std_error = m.standard_error();
  return s;
}

}  // namespace tbfm
