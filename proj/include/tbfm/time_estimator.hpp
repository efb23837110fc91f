#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tbfm/common.hpp"
#include "tbfm/spiked_model.hpp"

namespace tbfm {

enum class Branch { descending, ascending };

enum class EstimateStatus {
  ok_descending,
  ok_ascending,
  discarded_negative_discriminant,
  clipped_to_interval,
};

inline const char* to_string(Branch b) {
  return b == Branch::descending ? "descending" : "ascending";
}

inline const char* to_string(EstimateStatus s) {
  switch (s) {
    case EstimateStatus::ok_descending: return "ok_descending";
    case EstimateStatus::ok_ascending: return "ok_ascending";
    case EstimateStatus::discarded_negative_discriminant: return "discarded_negative_discriminant";
    case EstimateStatus::clipped_to_interval: return "clipped_to_interval";
  }
  return "unknown";
}

inline Branch parse_branch(const std::string& s) {
  if (s == "descending") return Branch::descending;
  if (s == "ascending") return Branch::ascending;
  throw ValidationError("branch must be 'descending' or 'ascending', got '" + s + "'");
}

/// Residual statistic and the time recovered from it.
struct TimeEstimate {
  double sigma_hat_perp2 = 0.0;
  std::optional<double> t_hat;
  EstimateStatus status = EstimateStatus::discarded_negative_discriminant;

  bool discarded() const { return status == EstimateStatus::discarded_negative_discriminant; }
};

/// ||P_perp z||^2 / (d - k).
inline double residual_statistic(std::span<const double> z, const SpikedModel& model) {
  return model.residual_energy(z) / static_cast<double>(model.residual_dim());
}

/// Solves (1 + sigma2) t^2 - 2t + (1 - stat) = 0 on the requested branch.
///
/// Statistics below the clock minimum sigma2 / (1 + sigma2) have no preimage
/// and are discarded. A discriminant within 1e-14 of zero returns the
/// critical point. The root is then projected onto `clip` (default [0, 1]).
inline TimeEstimate invert_clock(double stat, double sigma2, Branch branch = Branch::descending,
                                 std::optional<TimeInterval> clip = TimeInterval{0.0, 1.0}) {
  require(stat >= 0.0 && std::isfinite(stat), "residual statistic must be finite and non-negative");
  require(sigma2 > 0.0, "sigma2 must be positive");
  TimeEstimate est;
  est.sigma_hat_perp2 = stat;
  if (stat < sigma2 / (1.0 + sigma2)) return est;

  const double a = 1.0 + sigma2;
  const double disc = 4.0 * (a * stat - sigma2);
  double root;
  if (disc <= 1e-14) {
    root = 1.0 / a;
  } else {
    const double s = std::sqrt(disc);
    root = branch == Branch::descending ? (2.0 - s) / (2.0 * a) : (2.0 + s) / (2.0 * a);
  }
  est.status = branch == Branch::descending ? EstimateStatus::ok_descending
                                            : EstimateStatus::ok_ascending;
  if (clip) {
    const double projected = clip->project(root);
    if (projected != root) est.status = EstimateStatus::clipped_to_interval;
    root = projected;
  }
  est.t_hat = root;
  return est;
}

inline TimeEstimate estimate_time(std::span<const double> z, const SpikedModel& model,
                                  Branch branch = Branch::descending,
                                  std::optional<TimeInterval> clip = TimeInterval{0.0, 1.0}) {
  return invert_clock(residual_statistic(z, model), model.sigma2(), branch, clip);
}

// ---------------------------------------------------------------------------
// Delta-method prediction

/// Var(t_hat - t | t) ~ clock(t)^2 * (2 / m) / clock'(t)^2.
inline double delta_method_variance(double sigma2, std::size_t residual_dim, double t) {
  const auto c = clock_eval(sigma2, t);
  return c.value * c.value * (2.0 / static_cast<double>(residual_dim)) /
         (c.derivative * c.derivative);
}

struct TheoryPrediction {
  /// Conditional std per input time; empty where the time was excluded.
  std::vector<std::optional<double>> per_sample_std;
  /// sqrt of the mean conditional variance over included times.
  double aggregate_std = 0.0;
  double excluded_fraction = 0.0;
};

/// Times within `exclusion_halfwidth` of the critical point are excluded,
/// where the first-order expansion breaks down.
inline TheoryPrediction theory_prediction(double sigma2, std::size_t residual_dim,
                                          std::span<const double> t_samples,
                                          double exclusion_halfwidth = 0.05) {
  require(residual_dim >= 1, "residual dimension must be at least 1");
  require(!t_samples.empty(), "theory prediction needs at least one time sample");
  const double t_star = critical_point(sigma2);
  TheoryPrediction out;
  out.per_sample_std.resize(t_samples.size());
  CompensatedSum var_sum;
  std::size_t included = 0;
  for (std::size_t i = 0; i < t_samples.size(); ++i) {
    const double t = t_samples[i];
    if (std::abs(t - t_star) < exclusion_halfwidth) continue;
    const double v = delta_method_variance(sigma2, residual_dim, t);
    out.per_sample_std[i] = std::sqrt(v);
    var_sum.add(v);
    ++included;
  }
  if (included == 0)
    throw ValidationError("every time sample lies within the exclusion window of the critical point");
  out.aggregate_std = std::sqrt(var_sum.value() / static_cast<double>(included));
  out.excluded_fraction =
      static_cast<double>(t_samples.size() - included) / static_cast<double>(t_samples.size());
  return out;
}

// ---------------------------------------------------------------------------
// Effective rank

/// (sum lambda)^2 / sum lambda^2.
inline double effective_rank(std::span<const double> eigenvalues) {
  CompensatedSum s1, s2;
  bool any_positive = false;
  for (double l : eigenvalues) {
    require(l >= 0.0 && std::isfinite(l), "eigenvalues must be finite and non-negative");
    any_positive = any_positive || l > 0.0;
    s1.add(l);
    s2.add(l * l);
  }
  require(any_positive, "effective rank needs at least one positive eigenvalue");
  return s1.value() * s1.value() / s2.value();
}

/// Effective rank of (1-t)^2 I + t^2 diag(mu).
inline double interpolant_effective_rank(std::span<const double> mu, double t) {
  std::vector<double> ev(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) ev[i] = interpolant_variance(mu[i], t);
  return effective_rank(ev);
}

struct GeneralTimeEstimate {
  TimeEstimate estimate;
  /// r_eff((1-t_hat)^2 I + t_hat^2 Sigma_P); empty when discarded.
  std::optional<double> effective_rank_at_estimate;
};

/// Variance clock on an arbitrary projected subspace.
///
/// Q is d x m with orthonormal columns spanning the projector's range and
/// `eigenvalues` is the spectrum of Q^T Sigma Q. The clock uses the spectral
/// mean in place of sigma2.
class SubspaceClock {
 public:
  SubspaceClock(RowMatrix Q, std::vector<double> eigenvalues)
      : Q_(std::move(Q)), mu_(std::move(eigenvalues)) {
    require(Q_.cols() >= 1, "projector basis needs at least one column");
    require(static_cast<std::size_t>(Q_.cols()) == mu_.size(),
            "projector basis has " + std::to_string(Q_.cols()) + " columns but " +
                std::to_string(mu_.size()) + " eigenvalues were given");
    for (double m : mu_) require(m > 0.0 && std::isfinite(m), "projected eigenvalues must be positive");
    const Eigen::MatrixXd gram = Q_.transpose() * Q_;
    const double err = (gram - Eigen::MatrixXd::Identity(Q_.cols(), Q_.cols())).cwiseAbs().maxCoeff();
    require(err <= 1e-8, "projector basis is not orthonormal (max |Q^T Q - I| = " + format_double(err) + ")");
    CompensatedSum s;
    for (double m : mu_) s.add(m);
    mean_ = s.value() / static_cast<double>(mu_.size());
  }

  double spectral_mean() const { return mean_; }
  std::size_t rank() const { return mu_.size(); }

  double statistic(std::span<const double> z) const {
    require(static_cast<Eigen::Index>(z.size()) == Q_.rows(), "vector length does not match projector");
    Eigen::Map<const Vector> zv(z.data(), Q_.rows());
    return (Q_.transpose() * zv).squaredNorm() / static_cast<double>(mu_.size());
  }

  GeneralTimeEstimate estimate(std::span<const double> z, Branch branch = Branch::descending,
                               std::optional<TimeInterval> clip = TimeInterval{0.0, 1.0}) const {
    GeneralTimeEstimate out;
    out.estimate = invert_clock(statistic(z), mean_, branch, clip);
    if (out.estimate.t_hat) out.effective_rank_at_estimate = interpolant_effective_rank(mu_, *out.estimate.t_hat);
    return out;
  }

  /// Delta-method std at t: sqrt(2 / r_eff(t)) * clock(t) / |clock'(t)|.
  double predicted_std(double t) const {
    const auto c = clock_eval(mean_, t);
    return std::sqrt(2.0 / interpolant_effective_rank(mu_, t)) * c.value / std::abs(c.derivative);
  }

 private:
  RowMatrix Q_;
  std::vector<double> mu_;
  double mean_ = 0.0;
};

inline GeneralTimeEstimate estimate_time_general(std::span<const double> z, const RowMatrix& Q,
                                                 std::span<const double> projected_eigenvalues,
                                                 Branch branch = Branch::descending,
                                                 std::optional<TimeInterval> clip = TimeInterval{0.0, 1.0}) {
  SubspaceClock clock(Q, {projected_eigenvalues.begin(), projected_eigenvalues.end()});
  return clock.estimate(z, branch, clip);
}

}  // namespace tbfm
