#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tbfm/common.hpp"
#include "tbfm/decomposition.hpp"
#include "tbfm/keyvalue.hpp"
#include "tbfm/matrix_io.hpp"
#include "tbfm/ot_coupling.hpp"
#include "tbfm/pca_fit.hpp"
#include "tbfm/spiked_model.hpp"
#include "tbfm/sweep.hpp"
#include "tbfm/time_estimator.hpp"

namespace tbfm::cli {

/// Model flags shared by estimate, decompose and ot.
struct ModelFlags {
  std::size_t d = 0;
  std::size_t k = 0;
  double sigma2 = 0.1;
  std::optional<double> S;
  std::vector<double> lambdas;
  std::vector<double> lambda_linspace;

  void add(CLI::App& app) {
    app.add_option("--d", d, "ambient dimension")->required();
    app.add_option("--k", k, "signal dimension")->required();
    app.add_option("--sigma2", sigma2, "residual noise floor");
    auto* s = app.add_option("--S", S, "every signal eigenvalue (spike excess S - sigma2)");
    auto* l = app.add_option("--lambdas", lambdas, "spike excesses")->delimiter(',');
    auto* ll = app.add_option("--lambda-linspace", lambda_linspace, "lo,hi for linearly spaced excesses")
                   ->delimiter(',')
                   ->expected(2);
    s->excludes(l)->excludes(ll);
    l->excludes(ll);
  }

  /// Without a spectrum flag the excesses are linearly spaced in [1, 10].
  std::vector<double> resolved_lambdas() const {
    if (S) return equal_spikes_from_total(k, *S, sigma2);
    if (!lambdas.empty()) return lambdas;
    const double lo = lambda_linspace.empty() ? 1.0 : lambda_linspace[0];
    const double hi = lambda_linspace.empty() ? 10.0 : lambda_linspace[1];
    return linspace(lo, hi, k);
  }

  SpikedModel model() const { return make_model(d, k, resolved_lambdas(), sigma2); }

  void record(KeyValueDoc& doc) const {
    doc.set("d", d).set("k", k).set("sigma2", sigma2).set("lambdas", join_doubles(resolved_lambdas()));
    doc.set("spectrum_convention", "S_i=lambda_i+sigma2");
    if (S) doc.set("S", *S);
  }
};

struct IntervalFlags {
  std::optional<double> tau;
  std::optional<double> lo, hi;

  void add(CLI::App& app) {
    auto* t = app.add_option("--tau", tau, "interval [tau, 1 - tau]");
    auto* a = app.add_option("--t-lo", lo, "interval lower end");
    auto* b = app.add_option("--t-hi", hi, "interval upper end");
    t->excludes(a)->excludes(b);
  }

  TimeInterval resolve(double default_tau) const {
    if (lo || hi) return TimeInterval::make(lo.value_or(0.0), hi.value_or(1.0));
    return TimeInterval::symmetric(tau.value_or(default_tau));
  }
};

struct McFlags {
  std::size_t n_outer = 20000;
  std::size_t grid_n = 2000;
  std::uint64_t seed = 0;
  unsigned jobs = 0;

  void add(CLI::App& app) {
    app.add_option("--n-outer", n_outer, "Monte-Carlo outer samples");
    app.add_option("--grid", grid_n, "time grid points");
    app.add_option("--seed", seed, "base seed");
    app.add_option("--jobs", jobs, "worker threads (0 = all cores)");
  }

  void record(KeyValueDoc& doc) const {
    doc.set("n_outer", n_outer).set("grid_n", grid_n).set("seed", std::to_string(seed));
  }
};

inline std::filesystem::path prepare_out(const std::string& out) {
  require(!out.empty(), "--out is required");
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec || !std::filesystem::is_directory(out)) throw IoError("cannot create output directory '" + out + "'");
  return out;
}

inline std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

/// Entry point for the `tbfm` tool. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Time-blind flow matching on the spiked covariance model"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  // clock
  auto* clock = app.add_subcommand("clock", "critical point and clock minimum per sigma2");
  std::vector<double> clock_sigma2;
  std::string clock_out;
  clock->add_option("--sigma2", clock_sigma2, "noise floors")->delimiter(',')->required();
  clock->add_option("--out", clock_out, "output directory");

  // estimate
  auto* estimate = app.add_subcommand("estimate", "time-estimator error histogram and binned MAE");
  ModelFlags est_model;
  est_model.add(*estimate);
  std::size_t est_n = 10000, est_bins = 101, est_mae_bins = 50;
  std::optional<double> est_t;
  IntervalFlags est_interval;
  std::string est_branch = "descending", est_out;
  std::uint64_t est_seed = 0;
  unsigned est_jobs = 0;
  estimate->add_option("--n", est_n, "samples (>= 1000)");
  auto* fixed_t = estimate->add_option("--t", est_t, "fixed time instead of uniform draws");
  est_interval.add(*estimate);
  estimate->get_option("--tau")->excludes(fixed_t);
  estimate->get_option("--t-lo")->excludes(fixed_t);
  estimate->get_option("--t-hi")->excludes(fixed_t);
  estimate->add_option("--bins", est_bins, "histogram bins");
  estimate->add_option("--mae-bins", est_mae_bins, "binned MAE bins");
  estimate->add_option("--branch", est_branch, "descending or ascending");
  estimate->add_option("--seed", est_seed, "base seed");
  estimate->add_option("--jobs", est_jobs, "worker threads (0 = all cores)");
  estimate->add_option("--out", est_out, "output directory")->required();

  // decompose
  auto* dec = app.add_subcommand("decompose", "terms I-III of the time-blind loss");
  ModelFlags dec_model;
  dec_model.add(*dec);
  IntervalFlags dec_interval;
  dec_interval.add(*dec);
  McFlags dec_mc;
  dec_mc.add(*dec);
  std::string dec_out;
  dec->add_option("--out", dec_out, "output directory");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "decomposition over a (d, k) grid");
  std::vector<std::size_t> sw_d, sw_k;
  double sw_S = 10.0, sw_sigma2 = 0.01;
  IntervalFlags sw_interval;
  McFlags sw_mc;
  std::string sw_out;
  sweep->add_option("--d", sw_d, "ambient dimensions")->delimiter(',')->required();
  sweep->add_option("--k", sw_k, "signal dimensions")->delimiter(',')->required();
  sweep->add_option("--S", sw_S, "every signal eigenvalue");
  sweep->add_option("--sigma2", sw_sigma2, "residual noise floor");
  sw_interval.add(*sweep);
  sw_mc.add(*sweep);
  sweep->add_option("--out", sw_out, "output directory")->required();

  // ot
  auto* ot = app.add_subcommand("ot", "pair cost under independent and mini-batch OT coupling");
  ModelFlags ot_model;
  ot_model.add(*ot);
  std::vector<long long> ot_batch{1, 8, 64};
  std::size_t ot_n_batches = 500;
  std::uint64_t ot_seed = 0;
  unsigned ot_jobs = 0;
  std::string ot_out;
  ot->add_option("--batch", ot_batch, "batch sizes")->delimiter(',');
  ot->add_option("--n-batches", ot_n_batches, "batches per size");
  ot->add_option("--seed", ot_seed, "base seed");
  ot->add_option("--jobs", ot_jobs, "worker threads (0 = all cores)");
  ot->add_option("--out", ot_out, "output directory");

  // fit
  auto* fit = app.add_subcommand("fit", "spiked-model fit by PCA");
  std::string fit_input, fit_rule = "threshold:0.95", fit_out;
  std::size_t fit_then = 0;
  std::uint64_t fit_seed = 0;
  unsigned fit_jobs = 0;
  fit->add_option("--input", fit_input, "CSV or SPKD data matrix")->required();
  fit->add_option("--rank-rule", fit_rule, "fixed:K or threshold:F");
  fit->add_option("--then-estimate", fit_then, "estimate time on N interpolants built from the input rows");
  fit->add_option("--seed", fit_seed, "base seed");
  fit->add_option("--jobs", fit_jobs, "worker threads (0 = all cores)");
  fit->add_option("--out", fit_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion& e) {
    out << kVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    KeyValueDoc meta;
    if (clock->parsed()) {
      const auto rows = clock_table(clock_sigma2);
      const std::string csv = clock_table_csv(rows);
      out << csv;
      if (!clock_out.empty()) {
        const auto dir = prepare_out(clock_out);
        write_text(dir / "clock.csv", csv);
        meta.set("subcommand", "clock").set("sigma2", join_doubles(clock_sigma2));
        write_metadata(dir, meta);
      }
    } else if (estimate->parsed()) {
      const auto model = est_model.model();
      require(est_n >= 1000, "--n must be at least 1000, got " + std::to_string(est_n));
      const Branch branch = parse_branch(est_branch);
      TimeSampling mode = est_t ? TimeSampling{FixedTime{*est_t}} : TimeSampling{UniformTime{est_interval.resolve(0.0)}};
      const auto dir = prepare_out(est_out);
      const auto hist = error_histogram(model, est_n, mode, branch, est_bins, est_seed, est_jobs);
      const auto mae = binned_mae(model, est_n, est_mae_bins, branch, derive_seed(est_seed, {1}), est_jobs);
      write_text(dir / "histogram.csv", hist.csv());
      write_text(dir / "binned_mae.csv", mae.csv());
      KeyValueDoc summary;
      summary.set("empirical_std", hist.empirical_std)
          .set("theory_std", hist.theory_std)
          .set("mae", hist.mae)
          .set("mean_error", hist.mean_error)
          .set("discard_rate", hist.discard_rate())
          .set("n_used", hist.n_used)
          .set("n_discarded", hist.n_discarded)
          .set("regime_empirical_std", hist.regime_empirical_std)
          .set("regime_theory_std", hist.regime_theory_std)
          .set("regime_n", hist.regime_n)
          .set("t_star", mae.t_star);
      summary.write(dir / "summary.txt");
      out << summary.str();
      meta.set("subcommand", "estimate");
      est_model.record(meta);
      meta.set("n", est_n).set("branch", to_string(branch));
      if (est_t) meta.set("t_mode", "fixed:" + format_double(*est_t));
      else {
        const auto iv = std::get<UniformTime>(mode).interval;
        meta.set("t_mode", "uniform:" + format_double(iv.lo) + "," + format_double(iv.hi));
      }
      meta.set("histogram_bins", est_bins)
          .set("mae_bins", est_mae_bins)
          .set("mae_extra_mass_at_t1", mae.extra_mass_fraction)
          .set("seed", std::to_string(est_seed))
          .set("mae_seed", std::to_string(derive_seed(est_seed, {1})));
      write_metadata(dir, meta);
    } else if (dec->parsed()) {
      const auto model = dec_model.model();
      const auto interval = dec_interval.resolve(0.15);
      const auto rep = decompose(model, interval, dec_mc.n_outer, dec_mc.grid_n, dec_mc.seed, dec_mc.jobs);
      const auto doc = rep.to_keyvalue();
      out << doc.str();
      if (!dec_out.empty()) {
        const auto dir = prepare_out(dec_out);
        doc.write(dir / "report.txt");
        meta.set("subcommand", "decompose");
        dec_model.record(meta);
        meta.set("interval", format_double(interval.lo) + "," + format_double(interval.hi));
        dec_mc.record(meta);
        write_metadata(dir, meta);
      }
    } else if (sweep->parsed()) {
      const auto interval = sw_interval.resolve(0.15);
      const auto dir = prepare_out(sw_out);
      const auto table = sweep_dk(sw_d, sw_k, SweepModelParams{sw_S, sw_sigma2, interval},
                                  SweepMcParams{sw_mc.n_outer, sw_mc.grid_n, sw_mc.jobs}, sw_mc.seed);
      write_text(dir / "sweep.csv", table.csv());
      out << table.csv();
      std::vector<double> ds(sw_d.begin(), sw_d.end()), ks(sw_k.begin(), sw_k.end());
      meta.set("subcommand", "sweep")
          .set("d_list", join_doubles(ds))
          .set("k_list", join_doubles(ks))
          .set("S", sw_S)
          .set("sigma2", sw_sigma2)
          .set("spectrum_convention", "S_i=lambda_i+sigma2")
          .set("interval", format_double(interval.lo) + "," + format_double(interval.hi));
      sw_mc.record(meta);
      meta.set("cell_seed", "derive_seed(seed,{d,k})")
          .set("n_cells", table.rows.size())
          .set("skipped_cells", table.skipped_str());
      write_metadata(dir, meta);
      if (!table.skipped.empty()) err << "note: skipped cells with k >= d: " << table.skipped_str() << "\n";
    } else if (ot->parsed()) {
      const auto model = ot_model.model();
      std::vector<std::size_t> batches;
      for (long long b : ot_batch) {
        require(b >= 1, "--batch sizes must be at least 1, got " + std::to_string(b));
        batches.push_back(static_cast<std::size_t>(b));
      }
      require(ot_n_batches >= 2, "--n-batches must be at least 2");
      std::string csv = "mode,batch_size,n_batches,mean_pair_cost,std_error\n";
      for (std::size_t b : batches) {
        const std::uint64_t s = derive_seed(ot_seed, {b});
        for (auto mode : {CouplingMode::independent, CouplingMode::minibatch_ot}) {
          const auto st = coupling_cost_stats(model, mode, b, ot_n_batches, s, ot_jobs);
          csv += std::string(to_string(mode)) + "," + std::to_string(b) + "," + std::to_string(ot_n_batches) +
                 "," + format_double(st.mean_pair_cost) + "," + format_double(st.std_error) + "\n";
        }
      }
      out << csv;
      if (!ot_out.empty()) {
        const auto dir = prepare_out(ot_out);
        write_text(dir / "ot.csv", csv);
        meta.set("subcommand", "ot");
        ot_model.record(meta);
        std::vector<double> bs(batches.begin(), batches.end());
        meta.set("batch_sizes", join_doubles(bs))
            .set("n_batches", ot_n_batches)
            .set("seed", std::to_string(ot_seed))
            .set("batch_seed", "derive_seed(seed,{batch_size})")
            .set("term1", term_one(model));
        write_metadata(dir, meta);
      }
    } else if (fit->parsed()) {
      const RankRule rule = parse_rank_rule(fit_rule);
      const RowMatrix X = read_matrix(fit_input);
      const auto dir = prepare_out(fit_out);
      const auto fitted = fit_spiked(X, rule);
      write_fitted(dir, fitted);
      KeyValueDoc summary;
      summary.set("d", fitted.dim())
          .set("k", fitted.k)
          .set("sigma2", fitted.sigma2)
          .set("explained_fraction", fitted.explained_fraction)
          .set("t_star", critical_point(fitted.sigma2));
      if (fit_then > 0) {
        const auto tr = fitted_transfer(X, fitted, fit_then, fit_seed, fit_jobs);
        summary.set("transfer_n", tr.n)
            .set("transfer_discarded", tr.n_discarded)
            .set("transfer_mae", tr.mae)
            .set("transfer_empirical_std", tr.empirical_std)
            .set("transfer_theory_std", tr.theory_std);
      }
      summary.write(dir / "summary.txt");
      out << summary.str();
      meta.set("subcommand", "fit")
          .set("input", fit_input)
          .set("rows", static_cast<std::size_t>(X.rows()))
          .set("rank_rule", to_string(rule))
          .set("then_estimate", fit_then)
          .set("seed", std::to_string(fit_seed));
      write_metadata(dir, meta);
    }
  } catch (const std::exception& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}

}  // namespace tbfm::cli
