#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Eigenvalues>

#include "tbfm/common.hpp"
#include "tbfm/keyvalue.hpp"
#include "tbfm/matrix_io.hpp"
#include "tbfm/parallel.hpp"
#include "tbfm/rng.hpp"
#include "tbfm/spiked_model.hpp"
#include "tbfm/time_estimator.hpp"

namespace tbfm {

struct SampleCovariance {
  Vector mean;
  Eigen::MatrixXd cov;
};

/// Sample mean and unbiased (n - 1) covariance of the rows of X.
inline SampleCovariance sample_covariance(const RowMatrix& X) {
  require(X.rows() >= 2, "sample covariance needs at least 2 rows, got " + std::to_string(X.rows()));
  require(X.cols() >= 1, "sample covariance needs at least 1 column");
  SampleCovariance out;
  out.mean = X.colwise().mean().transpose();
  const RowMatrix centered = X.rowwise() - out.mean.transpose();
  out.cov = (centered.transpose() * centered) / static_cast<double>(X.rows() - 1);
  out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
  return out;
}

struct SymmetricEigen {
  Eigen::MatrixXd vectors;      // columns, matching `values`
  std::vector<double> values;   // descending
};

/// Symmetric eigendecomposition, eigenvalues descending, each eigenvector
/// signed so its first non-negligible component is positive.
inline SymmetricEigen sym_eig(const Eigen::MatrixXd& A) {
  require(A.rows() == A.cols() && A.rows() >= 1, "sym_eig needs a non-empty square matrix");
  const double scale = std::max(1.0, A.cwiseAbs().maxCoeff());
  const double asym = (A - A.transpose()).cwiseAbs().maxCoeff();
  require(asym <= 1e-10 * scale, "matrix is not symmetric (max |A - A^T| = " + format_double(asym) + ")");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(A);
  if (solver.info() != Eigen::Success) throw std::runtime_error("symmetric eigensolver did not converge");
  const Eigen::Index n = A.rows();
  SymmetricEigen out;
  out.vectors.resize(n, n);
  out.values.resize(static_cast<std::size_t>(n));
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::Index src = n - 1 - j;
    out.values[static_cast<std::size_t>(j)] = solver.eigenvalues()[src];
    Vector v = solver.eigenvectors().col(src);
    const double tol = 1e-12 * v.cwiseAbs().maxCoeff();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (std::abs(v[i]) > tol) {
        if (v[i] < 0) v = -v;
        break;
      }
    }
    out.vectors.col(j) = v;
  }
  return out;
}

/// Smallest k whose leading eigenvalues explain at least `threshold_fraction`
/// of the total, clamped to d - 1 so a residual subspace remains.
inline std::size_t choose_k(std::span<const double> eigvals, double threshold_fraction) {
  require(!eigvals.empty(), "choose_k needs a non-empty spectrum");
  require(threshold_fraction > 0.0 && threshold_fraction < 1.0, "threshold fraction must lie in (0, 1)");
  const double top = std::abs(eigvals.front());
  CompensatedSum total;
  for (std::size_t i = 0; i < eigvals.size(); ++i) {
    require(eigvals[i] >= -1e-10 * std::max(top, 1e-300), "eigenvalues must be non-negative");
    if (i > 0) require(eigvals[i] <= eigvals[i - 1] + 1e-12 * top, "eigenvalues must be sorted descending");
    total.add(std::max(eigvals[i], 0.0));
  }
  require(total.value() > 0.0, "choose_k: spectrum is identically zero");
  CompensatedSum cum;
  std::size_t k = eigvals.size();
  for (std::size_t i = 0; i < eigvals.size(); ++i) {
    cum.add(std::max(eigvals[i], 0.0));
    if (cum.value() / total.value() >= threshold_fraction) {
      k = i + 1;
      break;
    }
  }
  return std::min(k, eigvals.size() - 1);
}

struct FixedRank {
  std::size_t k = 0;
};
struct ThresholdRank {
  double fraction = 0.95;
};
using RankRule = std::variant<FixedRank, ThresholdRank>;

/// Parses "fixed:K" or "threshold:F".
inline RankRule parse_rank_rule(const std::string& s) {
  const auto colon = s.find(':');
  const std::string kind = s.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : s.substr(colon + 1);
  try {
    if (kind == "fixed" && !arg.empty()) {
      const long long k = std::stoll(arg);
      require(k >= 0, "fixed rank must be non-negative");
      return FixedRank{static_cast<std::size_t>(k)};
    }
    if (kind == "threshold" && !arg.empty()) return ThresholdRank{std::stod(arg)};
  } catch (const std::logic_error&) {
  }
  throw ValidationError("rank rule must be 'fixed:K' or 'threshold:F', got '" + s + "'");
}

inline std::string to_string(const RankRule& rule) {
  if (const auto* f = std::get_if<FixedRank>(&rule)) return "fixed:" + std::to_string(f->k);
  return "threshold:" + format_double(std::get<ThresholdRank>(rule).fraction);
}

/// Spiked covariance parameters fitted to a data matrix.
struct FittedSpike {
  std::size_t k = 0;
  RowMatrix basis;               // d x k
  std::vector<double> lambdas;   // spike excesses, descending, clipped at 0
  double sigma2 = 0.0;           // mean trailing eigenvalue
  Vector mean;                   // data mean used for centering
  double explained_fraction = 0.0;
  std::vector<double> spectrum;  // all sample eigenvalues, descending

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }

  SpikedModel to_model() const {
    return make_model(dim(), k, lambdas, sigma2, ExplicitBasis{basis});
  }
};

inline FittedSpike fit_spiked(const RowMatrix& X, const RankRule& rule) {
  const auto sc = sample_covariance(X);
  const auto d = static_cast<std::size_t>(X.cols());
  const auto eig = sym_eig(sc.cov);

  CompensatedSum total;
  for (double v : eig.values) total.add(std::max(v, 0.0));
  require(total.value() > 0.0, "degenerate data: total variance is zero");

  std::size_t k;
  if (const auto* f = std::get_if<FixedRank>(&rule)) {
    require(f->k < d, "fixed rank k=" + std::to_string(f->k) + " must be smaller than d=" + std::to_string(d));
    k = f->k;
  } else {
    k = choose_k(eig.values, std::get<ThresholdRank>(rule).fraction);
  }

  FittedSpike fit;
  fit.k = k;
  fit.mean = sc.mean;
  fit.spectrum = eig.values;
  CompensatedSum trailing, leading;
  for (std::size_t i = k; i < d; ++i) trailing.add(eig.values[i]);
  for (std::size_t i = 0; i < k; ++i) leading.add(std::max(eig.values[i], 0.0));
  fit.sigma2 = trailing.value() / static_cast<double>(d - k);
  require(fit.sigma2 > 0.0, "degenerate data: residual variance is zero (rank-deficient sample?)");
  fit.explained_fraction = leading.value() / total.value();
  fit.lambdas.resize(k);
  for (std::size_t i = 0; i < k; ++i) fit.lambdas[i] = std::max(eig.values[i] - fit.sigma2, 0.0);
  fit.basis = eig.vectors.leftCols(static_cast<Eigen::Index>(k));
  return fit;
}

/// Time estimation with a fitted model on interpolants built from the rows
/// of X (centered by the fitted mean) instead of Gaussian draws.
struct TransferResult {
  std::size_t n = 0;
  std::size_t n_discarded = 0;
  double mae = 0.0;
  double empirical_std = 0.0;
  double theory_std = 0.0;
};

inline TransferResult fitted_transfer(const RowMatrix& X, const FittedSpike& fit, std::size_t n,
                                      std::uint64_t seed, unsigned jobs = 0) {
  require(n >= 1, "transfer check needs at least one sample");
  require(static_cast<std::size_t>(X.cols()) == fit.dim(), "data dimension does not match the fitted model");
  require(X.rows() >= 1, "transfer check needs at least one data row");
  const SpikedModel model = fit.to_model();
  const std::size_t d = fit.dim();
  std::vector<double> t(n);
  std::vector<std::optional<double>> t_hat(n);
  const ChunkPlan plan{n, 256};
  parallel_for(plan.count(), jobs, [&](std::size_t c) {
    Rng rng(derive_seed(seed, {c}));
    std::uniform_int_distribution<Eigen::Index> pick(0, X.rows() - 1);
    std::vector<double> z(d);
    for (std::size_t i = plan.begin(c); i < plan.end(c); ++i) {
      t[i] = rng.uniform();
      const Eigen::Index r = pick(rng.engine());
      for (std::size_t j = 0; j < d; ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        z[j] = (1.0 - t[i]) * rng.normal() + t[i] * (X(r, jj) - fit.mean[jj]);
      }
      t_hat[i] = estimate_time(z, model).t_hat;
    }
  });
  TransferResult out;
  out.n = n;
  std::vector<double> errors;
  CompensatedSum abs_sum;
  for (std::size_t i = 0; i < n; ++i) {
    if (!t_hat[i]) {
      ++out.n_discarded;
      continue;
    }
    errors.push_back(*t_hat[i] - t[i]);
    abs_sum.add(std::abs(errors.back()));
  }
  if (!errors.empty()) {
    out.mae = abs_sum.value() / static_cast<double>(errors.size());
    out.empirical_std = mean_std(errors).std;
  }
  out.theory_std = theory_prediction(fit.sigma2, d - fit.k, t).aggregate_std;
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: <dir>/fitted.txt plus basis.spkd (d x k) and mean.spkd (1 x d).

inline void write_fitted(const std::filesystem::path& dir, const FittedSpike& fit) {
  std::filesystem::create_directories(dir);
  KeyValueDoc doc;
  doc.set("d", fit.dim())
      .set("k", fit.k)
      .set("sigma2", fit.sigma2)
      .set("explained_fraction", fit.explained_fraction)
      .set("lambdas", join_doubles(fit.lambdas))
      .set("basis_file", "basis.spkd")
      .set("mean_file", "mean.spkd");
  doc.write(dir / "fitted.txt");
  write_spkd(dir / "basis.spkd", fit.basis);
  RowMatrix mean_row = fit.mean.transpose();
  write_spkd(dir / "mean.spkd", mean_row);
}

inline FittedSpike read_fitted(const std::filesystem::path& dir) {
  const auto doc = KeyValueDoc::read(dir / "fitted.txt");
  FittedSpike fit;
  fit.k = static_cast<std::size_t>(std::stoull(doc.require_value("k")));
  fit.sigma2 = doc.require_double("sigma2");
  fit.explained_fraction = doc.require_double("explained_fraction");
  const std::string lam = doc.require_value("lambdas");
  std::size_t pos = 0;
  while (pos < lam.size()) {
    const auto comma = lam.find(',', pos);
    fit.lambdas.push_back(std::stod(lam.substr(pos, comma - pos)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  fit.basis = read_spkd(dir / doc.require_value("basis_file"));
  const RowMatrix mean_row = read_spkd(dir / doc.require_value("mean_file"));
  if (mean_row.rows() != 1) throw IoError("mean file must hold a single row");
  fit.mean = mean_row.row(0).transpose();
  if (fit.lambdas.size() != fit.k || static_cast<std::size_t>(fit.basis.cols()) != fit.k ||
      fit.basis.rows() != fit.mean.size())
    throw IoError("fitted model files are inconsistent");
  return fit;
}

/// Largest principal angle (degrees) between the column spans of A and B.
/// Both must have orthonormal columns; when ranks differ the angle measures
/// how far the smaller span is from lying inside the larger one.
inline double max_principal_angle_deg(const RowMatrix& A, const RowMatrix& B) {
  const Eigen::MatrixXd M = A.transpose() * B;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
  const auto& s = svd.singularValues();
  const double smallest = s.size() ? std::min(1.0, s[s.size() - 1]) : 1.0;
  return std::acos(smallest) * 180.0 / M_PI;
}

}  // namespace tbfm
