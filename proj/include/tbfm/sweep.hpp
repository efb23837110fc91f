#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tbfm/common.hpp"
#include "tbfm/decomposition.hpp"
#include "tbfm/keyvalue.hpp"
#include "tbfm/parallel.hpp"
#include "tbfm/rng.hpp"
#include "tbfm/spiked_model.hpp"
#include "tbfm/time_estimator.hpp"

namespace tbfm {

// ---------------------------------------------------------------------------
// (d, k) decomposition grid

struct SweepModelParams {
  double S_signal = 10.0;  // every signal eigenvalue
  double sigma2 = 0.01;
  TimeInterval interval = TimeInterval::symmetric(0.15);
};

struct SweepMcParams {
  std::size_t n_outer = 20000;
  std::size_t grid_n = 2000;
  unsigned jobs = 0;
};

struct SweepRow {
  std::size_t d = 0, k = 0;
  double term1 = 0.0;
  double coupling_variance = 0.0;
  double total = 0.0;
  double gap = 0.0;
  double ratio = 0.0;
  double mc_standard_error = 0.0;
  std::uint64_t seed = 0;
  std::size_t n_outer = 0;
  std::size_t grid_n = 0;
};

struct SweepTable {
  std::vector<SweepRow> rows;  // sorted by (d, k)
  std::vector<std::pair<std::size_t, std::size_t>> skipped;  // cells with k >= d

  static constexpr const char* kHeader = "d,k,term1,coupling_variance,total,gap,ratio,mc_se,seed,n_outer,grid_n";

  std::string csv() const {
    std::string out = std::string(kHeader) + "\n";
    for (const auto& r : rows) {
      out += std::to_string(r.d) + "," + std::to_string(r.k) + "," + format_double(r.term1) + "," +
             format_double(r.coupling_variance) + "," + format_double(r.total) + "," +
             format_double(r.gap) + "," + format_double(r.ratio) + "," +
             format_double(r.mc_standard_error) + "," + std::to_string(r.seed) + "," +
             std::to_string(r.n_outer) + "," + std::to_string(r.grid_n) + "\n";
    }
    return out;
  }

  std::string skipped_str() const {
    std::string out;
    for (const auto& [d, k] : skipped) {
      if (!out.empty()) out += ';';
      out += "d=" + std::to_string(d) + ":k=" + std::to_string(k);
    }
    return out;
  }
};

/// Per-cell seed; cells are reproducible on their own.
inline std::uint64_t cell_seed(std::uint64_t seed, std::size_t d, std::size_t k) {
  return derive_seed(seed, {d, k});
}

inline SweepTable sweep_dk(std::span<const std::size_t> d_list, std::span<const std::size_t> k_list,
                           const SweepModelParams& model_params, const SweepMcParams& mc,
                           std::uint64_t seed) {
  require(!d_list.empty() && !k_list.empty(), "sweep needs non-empty d and k lists");
  SweepTable table;
  std::vector<std::pair<std::size_t, std::size_t>> cells;
  for (std::size_t d : d_list) {
    for (std::size_t k : k_list) {
      if (k < d) cells.emplace_back(d, k);
      else table.skipped.emplace_back(d, k);
    }
  }
  std::sort(cells.begin(), cells.end());
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
  std::sort(table.skipped.begin(), table.skipped.end());
  table.skipped.erase(std::unique(table.skipped.begin(), table.skipped.end()), table.skipped.end());

  // Validate every cell up front so a bad parameter fails before any MC work.
  std::vector<SpikedModel> models;
  models.reserve(cells.size());
  for (const auto& [d, k] : cells)
    models.push_back(make_model(d, k, equal_spikes_from_total(k, model_params.S_signal, model_params.sigma2),
                                model_params.sigma2));

  table.rows.resize(cells.size());
  const unsigned total_jobs = resolve_jobs(mc.jobs);
  const unsigned outer = static_cast<unsigned>(std::min<std::size_t>(total_jobs, std::max<std::size_t>(cells.size(), 1)));
  const unsigned inner = std::max(1u, total_jobs / std::max(1u, outer));
  parallel_for(cells.size(), outer, [&](std::size_t c) {
    const auto [d, k] = cells[c];
    const std::uint64_t s = cell_seed(seed, d, k);
    const auto rep = decompose(models[c], model_params.interval, mc.n_outer, mc.grid_n, s, inner);
    SweepRow& row = table.rows[c];
    row.d = d;
    row.k = k;
    row.term1 = rep.term1;
    row.coupling_variance = rep.coupling_variance;
    row.total = rep.total_timeblind_variance;
    row.gap = rep.gap;
    row.ratio = rep.ratio;
    row.mc_standard_error = rep.mc_standard_error;
    row.seed = s;
    row.n_outer = mc.n_outer;
    row.grid_n = mc.grid_n;
  });
  return table;
}

// ---------------------------------------------------------------------------
// Estimator error studies

namespace detail {

/// Draws n interpolants in 256-row chunks and returns (t, t_hat) per row
/// without keeping the rows. t_hat is empty for discarded samples.
template <class TimeFn>
void run_estimator(const SpikedModel& model, std::size_t n, Branch branch, std::uint64_t seed,
                   unsigned jobs, TimeFn&& time_of, std::vector<double>& t,
                   std::vector<std::optional<double>>& t_hat) {
  t.assign(n, 0.0);
  t_hat.assign(n, std::nullopt);
  const std::size_t d = model.dim();
  const ChunkPlan plan{n, kSampleChunk};
  parallel_for(plan.count(), jobs, [&](std::size_t c) {
    Rng rng(derive_seed(seed, {c}));
    std::vector<double> eps(d), x(d), z(d), u(d);
    for (std::size_t i = plan.begin(c); i < plan.end(c); ++i) {
      t[i] = time_of(i, rng);
      draw_row(model, t[i], rng, eps.data(), x.data(), z.data(), u.data());
      t_hat[i] = estimate_time(z, model, branch).t_hat;
    }
  });
}

}  // namespace detail

/// Skewness and excess kurtosis of a sample.
struct SampleShape {
  double skewness = 0.0;
  double excess_kurtosis = 0.0;
};

inline SampleShape sample_shape(std::span<const double> xs) {
  require(xs.size() >= 4, "shape statistics need at least 4 samples");
  const auto ms = mean_std(xs);
  CompensatedSum m2, m3, m4;
  for (double x : xs) {
    const double c = x - ms.mean;
    m2.add(c * c);
    m3.add(c * c * c);
    m4.add(c * c * c * c);
  }
  const double n = static_cast<double>(xs.size());
  const double v = m2.value() / n;
  SampleShape s;
  s.skewness = (m3.value() / n) / std::pow(v, 1.5);
  s.excess_kurtosis = (m4.value() / n) / (v * v) - 3.0;
  return s;
}

struct ErrorHistogram {
  std::vector<double> bin_edges;  // n_bins + 1
  std::vector<std::size_t> bin_counts;
  double empirical_std = 0.0;
  double theory_std = 0.0;  // nan when every time is excluded
  std::size_t n_used = 0;
  std::size_t n_discarded = 0;
  std::size_t n_total = 0;
  double mean_error = 0.0;
  double mae = 0.0;
  /// The same comparison restricted to t < t* - 0.05, where the descending
  /// branch is the correct one.
  double regime_empirical_std = 0.0;
  double regime_theory_std = 0.0;
  std::size_t regime_n = 0;
  /// Errors t_hat - t of the used samples, in draw order.
  std::vector<double> errors;

  double discard_rate() const {
    return n_total ? static_cast<double>(n_discarded) / static_cast<double>(n_total) : 0.0;
  }

  static constexpr const char* kHeader = "bin_lo,bin_hi,count";

  std::string csv() const {
    std::string out = std::string(kHeader) + "\n";
    for (std::size_t b = 0; b < bin_counts.size(); ++b)
      out += format_double(bin_edges[b]) + "," + format_double(bin_edges[b + 1]) + "," +
             std::to_string(bin_counts[b]) + "\n";
    return out;
  }
};

inline constexpr double kRegimeMargin = 0.05;

inline ErrorHistogram error_histogram(const SpikedModel& model, std::size_t n, const TimeSampling& t_mode,
                                      Branch branch = Branch::descending, std::size_t n_bins = 101,
                                      std::uint64_t seed = 0, unsigned jobs = 0) {
  require(n >= 1000, "error histogram needs n >= 1000, got " + std::to_string(n));
  require(n_bins >= 1, "histogram needs at least one bin");
  detail::validate_time_sampling(t_mode);

  std::vector<double> t;
  std::vector<std::optional<double>> t_hat;
  detail::run_estimator(model, n, branch, seed, jobs,
                        [&](std::size_t, Rng& rng) { return detail::draw_time(t_mode, rng); }, t, t_hat);

  const double sigma2 = model.sigma2();
  const double t_star = critical_point(sigma2);
  ErrorHistogram h;
  h.n_total = n;
  std::vector<double> regime_errors, regime_t;
  for (std::size_t i = 0; i < n; ++i) {
    if (!t_hat[i]) {
      ++h.n_discarded;
      continue;
    }
    const double e = *t_hat[i] - t[i];
    h.errors.push_back(e);
    if (t[i] < t_star - kRegimeMargin) {
      regime_errors.push_back(e);
      regime_t.push_back(t[i]);
    }
  }
  h.n_used = h.errors.size();

  if (h.n_used > 0) {
    const auto ms = mean_std(h.errors);
    h.empirical_std = ms.std;
    h.mean_error = ms.mean;
    CompensatedSum abs_sum;
    double half = 0.0;
    for (double e : h.errors) {
      abs_sum.add(std::abs(e));
      half = std::max(half, std::abs(e));
    }
    h.mae = abs_sum.value() / static_cast<double>(h.n_used);
    if (half == 0.0) half = 1e-12;
    h.bin_edges.resize(n_bins + 1);
    for (std::size_t b = 0; b <= n_bins; ++b)
      h.bin_edges[b] = -half + 2.0 * half * static_cast<double>(b) / static_cast<double>(n_bins);
    h.bin_counts.assign(n_bins, 0);
    for (double e : h.errors) {
      auto b = static_cast<std::size_t>(std::floor((e + half) / (2.0 * half) * static_cast<double>(n_bins)));
      ++h.bin_counts[std::min(b, n_bins - 1)];
    }
  } else {
    h.bin_edges.assign(n_bins + 1, 0.0);
    h.bin_counts.assign(n_bins, 0);
  }

  try {
    h.theory_std = theory_prediction(sigma2, model.residual_dim(), t).aggregate_std;
  } catch (const ValidationError&) {
    h.theory_std = std::nan("");
  }
  h.regime_n = regime_errors.size();
  if (h.regime_n > 1) {
    h.regime_empirical_std = mean_std(regime_errors).std;
    h.regime_theory_std = theory_prediction(sigma2, model.residual_dim(), regime_t).aggregate_std;
  }
  return h;
}

struct BinnedMae {
  std::vector<double> t_bin_centers;
  std::vector<std::optional<double>> mae_per_bin;  // empty bins stay absent
  std::vector<std::size_t> n_per_bin;
  /// Bin mean of max(0, 2(t - t*)), the error of reflecting across t*.
  std::vector<std::optional<double>> predicted_reflection_error;
  /// sqrt of the mean delta-method variance over the bin's samples that lie
  /// outside the exclusion window; absent when none do.
  std::vector<std::optional<double>> theory_std_per_bin;
  double t_star = 0.0;
  double extra_mass_fraction = 0.0;
  std::size_t n_total = 0;
  std::size_t n_discarded = 0;
  /// MAE over the samples placed exactly at t = 1.
  std::optional<double> point_mass_mae;

  double bin_width() const { return t_bin_centers.empty() ? 0.0 : 1.0 / static_cast<double>(t_bin_centers.size()); }

  static constexpr const char* kHeader = "t_center,mae,n,reflection_pred";

  std::string csv() const {
    std::string out = std::string(kHeader) + "\n";
    auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
    for (std::size_t b = 0; b < t_bin_centers.size(); ++b)
      out += format_double(t_bin_centers[b]) + "," + opt(mae_per_bin[b]) + "," + std::to_string(n_per_bin[b]) +
             "," + opt(predicted_reflection_error[b]) + "\n";
    return out;
  }
};

inline constexpr double kExtraMassAtOne = 0.05;

/// Per-bin MAE over t ~ U[0, 1], with the last 5% of draws placed at t = 1.
inline BinnedMae binned_mae(const SpikedModel& model, std::size_t n, std::size_t n_bins = 50,
                            Branch branch = Branch::descending, std::uint64_t seed = 0, unsigned jobs = 0) {
  require(n_bins >= 1, "binned MAE needs at least one bin");
  require(n >= 10 * n_bins, "binned MAE needs n >= 10 * n_bins, got n=" + std::to_string(n));
  const auto n_extra = static_cast<std::size_t>(std::llround(kExtraMassAtOne * static_cast<double>(n)));
  const std::size_t n_uniform = n - n_extra;

  std::vector<double> t;
  std::vector<std::optional<double>> t_hat;
  detail::run_estimator(model, n, branch, seed, jobs,
                        [&](std::size_t i, Rng& rng) { return i < n_uniform ? rng.uniform() : 1.0; }, t, t_hat);

  const double sigma2 = model.sigma2();
  BinnedMae out;
  out.t_star = critical_point(sigma2);
  out.extra_mass_fraction = kExtraMassAtOne;
  out.n_total = n;
  std::vector<CompensatedSum> abs_err(n_bins), refl(n_bins), var(n_bins);
  std::vector<std::size_t> n_var(n_bins, 0);
  out.n_per_bin.assign(n_bins, 0);
  CompensatedSum edge;
  std::size_t n_edge = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!t_hat[i]) {
      ++out.n_discarded;
      continue;
    }
    const auto b = std::min(static_cast<std::size_t>(t[i] * static_cast<double>(n_bins)), n_bins - 1);
    const double err = std::abs(*t_hat[i] - t[i]);
    abs_err[b].add(err);
    refl[b].add(std::max(0.0, 2.0 * (t[i] - out.t_star)));
    if (std::abs(t[i] - out.t_star) >= kRegimeMargin) {
      var[b].add(delta_method_variance(sigma2, model.residual_dim(), t[i]));
      ++n_var[b];
    }
    ++out.n_per_bin[b];
    if (i >= n_uniform) {
      edge.add(err);
      ++n_edge;
    }
  }
  for (std::size_t b = 0; b < n_bins; ++b) {
    out.t_bin_centers.push_back((static_cast<double>(b) + 0.5) / static_cast<double>(n_bins));
    const auto c = static_cast<double>(out.n_per_bin[b]);
    out.mae_per_bin.push_back(out.n_per_bin[b] ? std::optional(abs_err[b].value() / c) : std::nullopt);
    out.predicted_reflection_error.push_back(out.n_per_bin[b] ? std::optional(refl[b].value() / c) : std::nullopt);
    out.theory_std_per_bin.push_back(
        n_var[b] ? std::optional(std::sqrt(var[b].value() / static_cast<double>(n_var[b]))) : std::nullopt);
  }
  if (n_edge) out.point_mass_mae = edge.value() / static_cast<double>(n_edge);
  return out;
}

// ---------------------------------------------------------------------------

struct ClockRow {
  double sigma2 = 0.0;
  double t_star = 0.0;
  double clock_min = 0.0;
};

inline std::vector<ClockRow> clock_table(std::span<const double> sigma2_list) {
  std::vector<ClockRow> rows;
  for (double s : sigma2_list) {
    require(s > 0.0 && std::isfinite(s), "sigma2 must be positive, got " + format_double(s));
    rows.push_back({s, critical_point(s), clock_minimum(s)});
  }
  return rows;
}

inline std::string clock_table_csv(std::span<const ClockRow> rows) {
  std::string out = "sigma2,t_star,clock_min\n";
  for (const auto& r : rows)
    out += format_double(r.sigma2) + "," + format_double(r.t_star) + "," + format_double(r.clock_min) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Output files

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

/// The metadata sidecar: caller's keys plus the software version. No clock
/// time is recorded so reruns stay byte-identical.
inline void write_metadata(const std::filesystem::path& dir, KeyValueDoc doc) {
  doc.set("software_version", kVersion);
  doc.write(dir / "metadata.txt");
}

}  // namespace tbfm
