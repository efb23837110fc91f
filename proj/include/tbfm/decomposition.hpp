#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tbfm/common.hpp"
#include "tbfm/keyvalue.hpp"
#include "tbfm/parallel.hpp"
#include "tbfm/rng.hpp"
#include "tbfm/spiked_model.hpp"

namespace tbfm {

/// Var(u_i | z_i, t) = S / ((1-t)^2 + t^2 S); does not depend on z_i.
inline double conditional_variance_coord(double S, double t) {
  require(S > 0.0, "coordinate variance S must be positive");
  require(t >= 0.0 && t <= 1.0, "t must lie in [0, 1]");
  return S / interpolant_variance(S, t);
}

/// Quadrature grid on an interval with weights summing to one.
///
/// n >= 2: uniform grid with both endpoints and trapezoid weights.
/// n == 1: the midpoint with weight one.
struct TimeGrid {
  std::vector<double> points;
  std::vector<double> weights;

  static TimeGrid make(const TimeInterval& interval, std::size_t n) {
    require(n >= 1, "grid needs at least one point");
    TimeGrid g;
    if (n == 1) {
      g.points = {0.5 * (interval.lo + interval.hi)};
      g.weights = {1.0};
      return g;
    }
    g.points = linspace(interval.lo, interval.hi, n);
    const double inner = 1.0 / static_cast<double>(n - 1);
    g.weights.assign(n, inner);
    g.weights.front() = g.weights.back() = 0.5 * inner;
    return g;
  }
  std::size_t size() const { return points.size(); }
};

/// Distinct covariance eigenvalues with their multiplicities.
struct SpectrumGroup {
  double S = 0.0;
  std::size_t count = 0;
};

namespace detail {
/// Groups of equal S_i, and the group of every signal coordinate. The
/// residual subspace forms one group (index `residual_group`).
struct SpectrumGrouping {
  std::vector<SpectrumGroup> groups;
  std::vector<std::size_t> signal_group;
  std::size_t residual_group = 0;

  explicit SpectrumGrouping(const SpikedModel& model) {
    auto find_or_add = [&](double S) {
      for (std::size_t g = 0; g < groups.size(); ++g)
        if (groups[g].S == S) return g;
      groups.push_back({S, 0});
      return groups.size() - 1;
    };
    residual_group = find_or_add(model.sigma2());
    groups[residual_group].count = model.residual_dim();
    signal_group.resize(model.rank());
    for (std::size_t j = 0; j < model.rank(); ++j) {
      signal_group[j] = find_or_add(model.eigenvalue(j));
      groups[signal_group[j]].count += 1;
    }
  }
};
}  // namespace detail

/// sum_i S_i / r_i(t): the coupling-variance integrand at time t.
inline double coupling_integrand(const SpikedModel& model, double t) {
  const detail::SpectrumGrouping grouping(model);
  double acc = 0.0;
  for (const auto& g : grouping.groups)
    acc += static_cast<double>(g.count) * conditional_variance_coord(g.S, t);
  return acc;
}

/// Average of the coupling integrand over Unif(interval), trapezoid rule.
inline double coupling_variance(const SpikedModel& model, const TimeInterval& interval,
                                std::size_t grid_n = 2000) {
  require(grid_n >= 2, "coupling variance needs grid_n >= 2");
  const auto grid = TimeGrid::make(interval, grid_n);
  CompensatedSum acc;
  for (std::size_t j = 0; j < grid.size(); ++j)
    acc.add(grid.weights[j] * coupling_integrand(model, grid.points[j]));
  return acc.value();
}

/// d * min_{t in I} sigma2 / r(t); a lower bound on the coupling variance.
inline double extensive_lower_bound(const SpikedModel& model, const TimeInterval& interval) {
  const double s2 = model.sigma2();
  // r(t) is convex, so sigma2 / r(t) is smallest at an endpoint.
  const double m = std::min(s2 / interpolant_variance(s2, interval.lo),
                            s2 / interpolant_variance(s2, interval.hi));
  return static_cast<double>(model.dim()) * m;
}

/// Conditional moments of u given z under the grid posterior.
struct ConditionalMoments {
  double trace_variance = 0.0;   // sum_i Var(u_i | z)
  double coupling_mean = 0.0;    // E[ sum_i S_i / r_i(t) | z ]
};

/// Posterior over a time grid for the spiked model,
/// p(t' | z) proportional to w(t') prod_i N(z_i; 0, r_i(t')), with w the
/// quadrature weights of the grid.
///
/// All per-coordinate sums run over groups of equal S_i, so a draw enters
/// only through its per-group energies Q_g = sum_{i in g} z_i^2 (eigenbasis).
class PosteriorGrid {
 public:
  PosteriorGrid(const SpikedModel& model, const TimeInterval& interval, std::size_t grid_n)
      : grouping_(model), grid_(TimeGrid::make(interval, grid_n)) {
    const std::size_t G = grouping_.groups.size();
    const std::size_t J = grid_.size();
    inv_var_.assign(G * J, 0.0);
    slope_.assign(G * J, 0.0);
    base_.assign(J, 0.0);
    coupling_.assign(J, 0.0);
    for (std::size_t j = 0; j < J; ++j) {
      const double t = grid_.points[j];
      double base = std::log(grid_.weights[j]);
      double c = 0.0;
      for (std::size_t g = 0; g < G; ++g) {
        const auto& grp = grouping_.groups[g];
        const double r = interpolant_variance(grp.S, t);
        const double n = static_cast<double>(grp.count);
        inv_var_[g * J + j] = 1.0 / r;
        slope_[g * J + j] = optimal_slope(grp.S, t);
        base -= 0.5 * n * std::log(r);
        c += n * grp.S / r;
      }
      base_[j] = base;
      coupling_[j] = c;
    }
  }

  std::size_t group_count() const { return grouping_.groups.size(); }
  const std::vector<SpectrumGroup>& groups() const { return grouping_.groups; }
  const TimeGrid& grid() const { return grid_; }

  /// Quadrature of the coupling integrand on this grid.
  double coupling_quadrature() const {
    CompensatedSum acc;
    for (std::size_t j = 0; j < grid_.size(); ++j) acc.add(grid_.weights[j] * coupling_[j]);
    return acc.value();
  }

  /// Q_g from a full d-vector given in the model's ambient coordinates.
  std::vector<double> group_energies(std::span<const double> z, const SpikedModel& model) const {
    const auto summary = model.eigen_summary(z);
    std::vector<double> Q(group_count(), 0.0);
    for (std::size_t j = 0; j < model.rank(); ++j) Q[grouping_.signal_group[j]] += summary[j] * summary[j];
    Q[grouping_.residual_group] += summary[model.rank()];
    return Q;
  }

  /// Normalised posterior weights; computed against the per-draw maximum
  /// log-weight so nothing underflows at large d.
  void posterior(std::span<const double> Q, std::span<double> weights) const {
    const std::size_t J = grid_.size();
    const std::size_t G = group_count();
    double max_ll = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < J; ++j) {
      double ll = base_[j];
      for (std::size_t g = 0; g < G; ++g) ll -= 0.5 * Q[g] * inv_var_[g * J + j];
      weights[j] = ll;
      max_ll = std::max(max_ll, ll);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < J; ++j) {
      weights[j] = std::exp(weights[j] - max_ll);
      total += weights[j];
    }
    for (std::size_t j = 0; j < J; ++j) weights[j] /= total;
  }

  /// Posterior-mean slope per group: E[u_i | z] = z_i * slopes[g(i)].
  std::vector<double> posterior_slopes(std::span<const double> weights) const {
    const std::size_t J = grid_.size();
    std::vector<double> out(group_count(), 0.0);
    for (std::size_t g = 0; g < group_count(); ++g)
      for (std::size_t j = 0; j < J; ++j) out[g] += weights[j] * slope_[g * J + j];
    return out;
  }

  /// sum_i Var(u_i | z) = E[u^2 | z] - E[u | z]^2, accumulated per group.
  ConditionalMoments moments(std::span<const double> Q, std::span<double> workspace) const {
    posterior(Q, workspace);
    const std::size_t J = grid_.size();
    ConditionalMoments m;
    double second = 0.0;
    double first_sq = 0.0;
    for (std::size_t j = 0; j < J; ++j) m.coupling_mean += workspace[j] * coupling_[j];
    second += m.coupling_mean;
    for (std::size_t g = 0; g < group_count(); ++g) {
      double ea = 0.0, ea2 = 0.0;
      const double* a = &slope_[g * J];
      for (std::size_t j = 0; j < J; ++j) {
        ea += workspace[j] * a[j];
        ea2 += workspace[j] * a[j] * a[j];
      }
      second += Q[g] * ea2;
      first_sq += Q[g] * ea * ea;
    }
    m.trace_variance = second - first_sq;
    return m;
  }

 private:
  detail::SpectrumGrouping grouping_;
  TimeGrid grid_;
  std::vector<double> inv_var_;   // [g * J + j]
  std::vector<double> slope_;     // [g * J + j]
  std::vector<double> base_;      // log w_j - 1/2 sum_g n_g log r_g(t_j)
  std::vector<double> coupling_;  // sum_g n_g S_g / r_g(t_j)
};

/// Posterior weights of z over a grid_n-point grid on `interval`.
inline std::vector<double> posterior_grid(std::span<const double> z, const SpikedModel& model,
                                          const TimeInterval& interval, std::size_t grid_n) {
  const PosteriorGrid post(model, interval, grid_n);
  const auto Q = post.group_energies(z, model);
  std::vector<double> w(grid_n);
  post.posterior(Q, w);
  return w;
}

// ---------------------------------------------------------------------------
// Monte-Carlo estimate of E_z[tr Var(u | z)]

struct TimeBlindEstimate {
  /// Control-variate estimate: mean of tr Var(u|z) - E[c(t)|z], plus the
  /// quadrature of c over the grid (c = coupling integrand).
  double value = 0.0;
  double standard_error = 0.0;
  /// Plain mean of tr Var(u|z) over the outer draws.
  double plain_value = 0.0;
  double plain_standard_error = 0.0;
  std::size_t samples = 0;
};

namespace detail {
inline constexpr std::size_t kMcChunk = 1024;

/// Running mean / M2 (Welford), merged with Chan's formula.
struct Moments {
  double n = 0.0, mean = 0.0, m2 = 0.0;
  void add(double x) {
    n += 1.0;
    const double delta = x - mean;
    mean += delta / n;
    m2 += delta * (x - mean);
  }
  void merge(const Moments& o) {
    if (o.n == 0.0) return;
    const double total = n + o.n;
    const double delta = o.mean - mean;
    mean += delta * o.n / total;
    m2 += o.m2 + delta * delta * n * o.n / total;
    n = total;
  }
  double standard_error() const { return n > 1.0 ? std::sqrt(m2 / (n - 1.0) / n) : 0.0; }
};
}  // namespace detail

/// Hybrid Monte-Carlo / grid estimate of the total time-blind variance.
///
/// Each outer draw samples t ~ Unif(interval), eps ~ N(0, I) and
/// x ~ N(0, Sigma) in the covariance eigenbasis (the quantity is rotation
/// invariant), forms z, and evaluates sum_i Var(u_i | z) under the grid
/// posterior. Draws are split into fixed 1024-sample chunks with derived
/// seeds; chunk results merge in chunk order, so `jobs` never changes output.
inline TimeBlindEstimate timeblind_variance_mc(const SpikedModel& model, const TimeInterval& interval,
                                               std::size_t n_outer, std::size_t grid_n,
                                               std::uint64_t seed, unsigned jobs = 0) {
  require(n_outer >= 100, "n_outer must be at least 100");
  const PosteriorGrid post(model, interval, grid_n);
  const double reference = post.coupling_quadrature();
  const auto& groups = post.groups();
  const std::size_t G = groups.size();

  const ChunkPlan plan{n_outer, detail::kMcChunk};
  std::vector<detail::Moments> plain(plan.count()), controlled(plan.count());
  parallel_for(plan.count(), jobs, [&](std::size_t c) {
    Rng rng(derive_seed(seed, {c}));
    std::vector<double> Q(G), workspace(post.grid().size());
    for (std::size_t s = plan.begin(c); s < plan.end(c); ++s) {
      const double t = rng.uniform(interval.lo, interval.hi);
      for (std::size_t g = 0; g < G; ++g) {
        const double sd = std::sqrt(groups[g].S);
        double q = 0.0;
        for (std::size_t i = 0; i < groups[g].count; ++i) {
          const double eps = rng.normal();
          const double x = sd * rng.normal();
          const double z = (1.0 - t) * eps + t * x;
          q += z * z;
        }
        Q[g] = q;
      }
      const auto m = post.moments(Q, workspace);
      plain[c].add(m.trace_variance);
      controlled[c].add(m.trace_variance - m.coupling_mean);
    }
  });
  detail::Moments p, q;
  for (std::size_t c = 0; c < plan.count(); ++c) {
    p.merge(plain[c]);
    q.merge(controlled[c]);
  }
  TimeBlindEstimate out;
  out.samples = n_outer;
  out.plain_value = p.mean;
  out.plain_standard_error = p.standard_error();
  out.value = reference + q.mean;
  out.standard_error = q.standard_error();
  return out;
}

// ---------------------------------------------------------------------------

struct DecompositionReport {
  double term1 = 0.0;
  double coupling_variance = 0.0;
  double total_timeblind_variance = 0.0;
  double gap = 0.0;
  double ratio = 0.0;
  std::size_t mc_samples = 0;
  std::size_t grid_points = 0;
  TimeInterval interval;
  double mc_standard_error = 0.0;
  double total_plain = 0.0;
  double mc_standard_error_plain = 0.0;

  KeyValueDoc to_keyvalue() const {
    KeyValueDoc doc;
    doc.set("term1", term1)
        .set("coupling_variance", coupling_variance)
        .set("total_timeblind_variance", total_timeblind_variance)
        .set("gap", gap)
        .set("ratio", ratio)
        .set("mc_samples", mc_samples)
        .set("grid_points", grid_points)
        .set("interval", format_double(interval.lo) + "," + format_double(interval.hi))
        .set("mc_standard_error", mc_standard_error)
        .set("total_plain", total_plain)
        .set("mc_standard_error_plain", mc_standard_error_plain);
    return doc;
  }
};

/// Terms I-III on the spiked model; the gap is total minus coupling variance
/// and is reported unclamped.
inline DecompositionReport decompose(const SpikedModel& model, const TimeInterval& interval,
                                     std::size_t n_outer, std::size_t grid_n, std::uint64_t seed,
                                     unsigned jobs = 0) {
  DecompositionReport r;
  r.term1 = term_one(model);
  r.coupling_variance = coupling_variance(model, interval, grid_n);
  const auto mc = timeblind_variance_mc(model, interval, n_outer, grid_n, seed, jobs);
  r.total_timeblind_variance = mc.value;
  r.mc_standard_error = mc.standard_error;
  r.total_plain = mc.plain_value;
  r.mc_standard_error_plain = mc.plain_standard_error;
  r.gap = r.total_timeblind_variance - r.coupling_variance;
  r.ratio = r.gap / r.coupling_variance;
  r.mc_samples = n_outer;
  r.grid_points = grid_n;
  r.interval = interval;
  return r;
}

}  // namespace tbfm
