#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "tbfm/common.hpp"
#include "tbfm/parallel.hpp"
#include "tbfm/rng.hpp"

namespace tbfm {

/// Closed sub-interval [lo, hi] of [0, 1] with lo < hi.
struct TimeInterval {
  double lo = 0.0;
  double hi = 1.0;

  static TimeInterval make(double lo, double hi) {
    require(std::isfinite(lo) && std::isfinite(hi), "time interval bounds must be finite");
    require(0.0 <= lo && lo < hi && hi <= 1.0,
            "time interval must satisfy 0 <= lo < hi <= 1, got [" + format_double(lo) + ", " +
                format_double(hi) + "]");
    return TimeInterval{lo, hi};
  }
  /// [tau, 1 - tau]
  static TimeInterval symmetric(double tau) {
    require(tau >= 0.0 && tau < 0.5, "tau must lie in [0, 0.5)");
    return make(tau, 1.0 - tau);
  }

  double width() const { return hi - lo; }
  bool contains(double t) const { return lo <= t && t <= hi; }
  double project(double t) const { return t < lo ? lo : (t > hi ? hi : t); }
};

struct AxisAligned {};

/// Signal subspace given by the orthonormal columns of a d x k matrix.
struct ExplicitBasis {
  RowMatrix columns;
};

using BasisMode = std::variant<AxisAligned, ExplicitBasis>;

// ---------------------------------------------------------------------------
// Scalar closed forms

/// Per-coordinate interpolant variance r(t) = (1-t)^2 + t^2 S.
inline double interpolant_variance(double S, double t) {
  return (1.0 - t) * (1.0 - t) + t * t * S;
}

/// Least-squares slope of u_i on z_i: (tS - (1-t)) / r(t).
inline double optimal_slope(double S, double t) {
  return (t * S - (1.0 - t)) / interpolant_variance(S, t);
}

struct ClockValue {
  double value = 0.0;
  double derivative = 0.0;
};

/// Residual-subspace variance clock (1-t)^2 + t^2 sigma2 and its t-derivative.
inline ClockValue clock_eval(double sigma2, double t) {
  return {interpolant_variance(sigma2, t), -2.0 * (1.0 - t) + 2.0 * t * sigma2};
}

/// Zero of the clock derivative, 1 / (1 + sigma2).
inline double critical_point(double sigma2) {
  require(sigma2 > 0.0, "sigma2 must be positive");
  return 1.0 / (1.0 + sigma2);
}

/// Global minimum of the clock, sigma2 / (1 + sigma2).
inline double clock_minimum(double sigma2) {
  require(sigma2 > 0.0, "sigma2 must be positive");
  return sigma2 / (1.0 + sigma2);
}

inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> out(n);
  if (n == 1) {
    out[0] = lo;
    return out;
  }
  for (std::size_t i = 0; i < n; ++i)
    out[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  if (n > 0) out[n - 1] = hi;
  return out;
}

// ---------------------------------------------------------------------------

/// Spiked Gaussian data model x ~ N(0, U diag(lambdas) U^T + sigma2 I_d).
///
/// `lambdas` are spike excesses: the covariance eigenvalues are
/// S_i = lambda_i + sigma2 on the signal subspace and sigma2 elsewhere.
/// Immutable after construction.
class SpikedModel {
 public:
  std::size_t dim() const { return d_; }
  std::size_t rank() const { return lambdas_.size(); }
  std::size_t residual_dim() const { return d_ - lambdas_.size(); }
  const std::vector<double>& lambdas() const { return lambdas_; }
  double sigma2() const { return sigma2_; }
  bool is_axis_aligned() const { return basis_.size() == 0; }
  /// d x k signal basis; empty for axis-aligned models.
  const RowMatrix& basis() const { return basis_; }

  /// Covariance eigenvalue S_i, signal directions first.
  double eigenvalue(std::size_t i) const {
    return i < rank() ? lambdas_[i] + sigma2_ : sigma2_;
  }

  std::vector<double> spectrum() const {
    std::vector<double> s(d_);
    for (std::size_t i = 0; i < d_; ++i) s[i] = eigenvalue(i);
    return s;
  }

  /// ||P_perp z||^2 for the projector onto the complement of the signal subspace.
  double residual_energy(std::span<const double> z) const {
    require(z.size() == d_, "vector length " + std::to_string(z.size()) +
                                " does not match model dimension " + std::to_string(d_));
    if (is_axis_aligned()) {
      double acc = 0.0;
      for (std::size_t i = rank(); i < d_; ++i) acc += z[i] * z[i];
      return acc;
    }
    Eigen::Map<const Vector> zv(z.data(), static_cast<Eigen::Index>(d_));
    const Vector coeffs = basis_.transpose() * zv;
    return (zv - basis_ * coeffs).squaredNorm();
  }

  /// Coordinates of z in the covariance eigenbasis, signal directions first,
  /// followed by the residual energy. Length rank() + 1.
  std::vector<double> eigen_summary(std::span<const double> z) const {
    std::vector<double> out(rank() + 1);
    if (is_axis_aligned()) {
      for (std::size_t i = 0; i < rank(); ++i) out[i] = z[i];
    } else {
      Eigen::Map<const Vector> zv(z.data(), static_cast<Eigen::Index>(d_));
      const Vector coeffs = basis_.transpose() * zv;
      for (std::size_t i = 0; i < rank(); ++i) out[i] = coeffs[static_cast<Eigen::Index>(i)];
    }
    out[rank()] = residual_energy(z);
    return out;
  }

  /// Writes one draw of x into `x` (length d).
  void draw_data(Rng& rng, std::span<double> x) const {
    if (is_axis_aligned()) {
      for (std::size_t i = 0; i < d_; ++i) x[i] = std::sqrt(eigenvalue(i)) * rng.normal();
      return;
    }
    const double floor_sd = std::sqrt(sigma2_);
    for (std::size_t i = 0; i < d_; ++i) x[i] = floor_sd * rng.normal();
    for (std::size_t j = 0; j < rank(); ++j) {
      const double a = std::sqrt(lambdas_[j]) * rng.normal();
      for (std::size_t i = 0; i < d_; ++i)
        x[i] += a * basis_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  }

  std::string describe() const {
    return "d=" + std::to_string(d_) + " k=" + std::to_string(rank()) +
           " sigma2=" + format_double(sigma2_) +
           (is_axis_aligned() ? " basis=axis_aligned" : " basis=explicit");
  }

 private:
  friend SpikedModel make_model(std::size_t, std::size_t, std::vector<double>, double, BasisMode);
  std::size_t d_ = 0;
  std::vector<double> lambdas_;
  double sigma2_ = 1.0;
  RowMatrix basis_;
};

/// Validates and builds a spiked model.
inline SpikedModel make_model(std::size_t d, std::size_t k, std::vector<double> lambdas,
                              double sigma2, BasisMode basis_mode = AxisAligned{}) {
  require(d >= 1, "dimension d must be positive");
  require(k < d, "signal rank k=" + std::to_string(k) + " must be smaller than d=" +
                     std::to_string(d) + " (the residual subspace must be non-empty)");
  require(lambdas.size() == k, "expected " + std::to_string(k) + " spike excesses, got " +
                                   std::to_string(lambdas.size()));
  for (double l : lambdas)
    require(std::isfinite(l) && l >= 0.0, "spike excesses must be finite and non-negative");
  require(std::isfinite(sigma2) && sigma2 > 0.0, "sigma2 must be positive, got " + format_double(sigma2));

  SpikedModel m;
  m.d_ = d;
  m.lambdas_ = std::move(lambdas);
  m.sigma2_ = sigma2;
  if (auto* eb = std::get_if<ExplicitBasis>(&basis_mode)) {
    const auto& U = eb->columns;
    require(static_cast<std::size_t>(U.rows()) == d && static_cast<std::size_t>(U.cols()) == k,
            "explicit basis must be d x k");
    const Eigen::MatrixXd gram = U.transpose() * U;
    const double err =
        (gram - Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k)))
            .cwiseAbs()
            .maxCoeff();
    require(k == 0 || err <= 1e-8, "explicit basis is not orthonormal (max |U^T U - I| = " +
                                       format_double(err) + ")");
    if (k > 0) m.basis_ = U;
  }
  return m;
}

/// Spike excesses that put every signal eigenvalue at `total_variance`.
inline std::vector<double> equal_spikes_from_total(std::size_t k, double total_variance,
                                                   double sigma2) {
  require(total_variance >= sigma2, "signal variance S must be at least sigma2");
  return std::vector<double>(k, total_variance - sigma2);
}

struct CoordinateStats {
  std::vector<double> S;
  std::vector<double> r;
  std::vector<double> alpha;
};

/// Per-coordinate (S_i, r_i(t), alpha_i(t)) in the covariance eigenbasis.
inline CoordinateStats coordinate_stats(const SpikedModel& model, double t) {
  require(t >= 0.0 && t <= 1.0, "t must lie in [0, 1]");
  CoordinateStats out;
  out.S = model.spectrum();
  out.r.resize(out.S.size());
  out.alpha.resize(out.S.size());
  for (std::size_t i = 0; i < out.S.size(); ++i) {
    out.r[i] = interpolant_variance(out.S[i], t);
    out.alpha[i] = optimal_slope(out.S[i], t);
  }
  return out;
}

/// tr Cov(u) = sum_i (S_i + 1).
inline double term_one(const SpikedModel& model) {
  CompensatedSum acc;
  for (double l : model.lambdas()) acc.add(l + model.sigma2() + 1.0);
  acc.add(static_cast<double>(model.residual_dim()) * (model.sigma2() + 1.0));
  return acc.value();
}

// ---------------------------------------------------------------------------
// Interpolant batches

struct UniformTime {
  TimeInterval interval;
};
struct FixedTime {
  double t = 0.0;
};
using TimeSampling = std::variant<UniformTime, FixedTime>;

/// Rows of (eps, x, z, u) with z = (1-t) eps + t x and u = x - eps.
struct InterpolantBatch {
  std::vector<double> t;
  RowMatrix eps;
  RowMatrix x;
  RowMatrix z;
  RowMatrix u;

  std::size_t size() const { return t.size(); }
  std::span<const double> z_row(std::size_t i) const {
    return {z.data() + i * static_cast<std::size_t>(z.cols()), static_cast<std::size_t>(z.cols())};
  }
};

namespace detail {
inline constexpr std::size_t kSampleChunk = 256;

inline double draw_time(const TimeSampling& mode, Rng& rng) {
  if (const auto* f = std::get_if<FixedTime>(&mode)) return f->t;
  const auto& iv = std::get<UniformTime>(mode).interval;
  return rng.uniform(iv.lo, iv.hi);
}

inline void validate_time_sampling(const TimeSampling& mode) {
  if (const auto* f = std::get_if<FixedTime>(&mode))
    require(f->t >= 0.0 && f->t <= 1.0, "fixed t must lie in [0, 1]");
}

/// Fills eps and x for one row and forms z and u.
inline void draw_row(const SpikedModel& model, double t, Rng& rng, double* eps, double* x,
                     double* z, double* u) {
  const std::size_t d = model.dim();
  for (std::size_t j = 0; j < d; ++j) eps[j] = rng.normal();
  model.draw_data(rng, {x, d});
  for (std::size_t j = 0; j < d; ++j) {
    z[j] = (1.0 - t) * eps[j] + t * x[j];
    u[j] = x[j] - eps[j];
  }
}
}  // namespace detail

/// Draws n rows; row i uses the stream of chunk i / 256, so the batch is
/// identical for every `jobs` value.
inline InterpolantBatch sample_batch(const SpikedModel& model, std::size_t n,
                                     const TimeSampling& t_mode, std::uint64_t seed,
                                     unsigned jobs = 1) {
  require(n >= 1, "sample count must be at least 1");
  detail::validate_time_sampling(t_mode);
  const auto d = static_cast<Eigen::Index>(model.dim());
  const auto rows = static_cast<Eigen::Index>(n);
  InterpolantBatch b;
  b.t.resize(n);
  b.eps.resize(rows, d);
  b.x.resize(rows, d);
  b.z.resize(rows, d);
  b.u.resize(rows, d);
  const ChunkPlan plan{n, detail::kSampleChunk};
  parallel_for(plan.count(), jobs, [&](std::size_t c) {
    Rng rng(derive_seed(seed, {c}));
    for (std::size_t i = plan.begin(c); i < plan.end(c); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      b.t[i] = detail::draw_time(t_mode, rng);
      detail::draw_row(model, b.t[i], rng, &b.eps(r, 0), &b.x(r, 0), &b.z(r, 0), &b.u(r, 0));
    }
  });
  return b;
}

}  // namespace tbfm
