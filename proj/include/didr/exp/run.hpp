#pragma once

// Experiment dispatch. Each kind writes CSVs into the output directory and
// returns a JSON results object; `run` wraps it with provenance and error records.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "didr/align/pipeline.hpp"
#include "didr/analytic/tilted.hpp"
#include "didr/drp/drp.hpp"
#include "didr/exp/config.hpp"
#include "didr/exp/csv.hpp"
#include "didr/grad_core/serialize.hpp"
#include "didr/theory/theory.hpp"

namespace didr::exp {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitRuntime = 2;

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Evenly spaced points on [lo, hi].
inline std::vector<double> linspace(double lo, double hi, int n) {
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (n - 1);
  return out;
}

inline theory::AlphaFamily family(const align::PipelineConfig& p) {
  return theory::AlphaFamily::make(p.mu, p.sigma, p.schedule.gamma, 0.5);
}

// ---- theory kinds ----

inline json run_threshold_scan(const ExperimentConfig& c, const fs::path& out) {
  const auto& p = c.pipeline;
  const auto rows = theory::threshold_scan(family(p), linspace(c.scan.tau_min, c.scan.tau_max, c.scan.points));
  const double closed = theory::collapse_threshold(p.mu, p.sigma, p.schedule.gamma);
  CsvWriter csv(out / "threshold.csv",
                {"mu", "sigma", "gamma", "tau", "alpha_star", "boundary", "tau_crit_closed"});
  for (const auto& r : rows) {
    csv.row({p.mu, p.sigma, p.schedule.gamma, r.tau, r.alpha_star, std::int64_t{r.boundary ? 1 : 0}, closed});
  }
  const auto bracket = theory::transition_bracket(rows);
  json j;
  j["tau_crit_closed"] = closed;
  j["tau_crit_quadrature"] = 1.0 / theory::b_crit_quadrature(p.mu, p.sigma, p.schedule.gamma);
  j["transition_found"] = bracket.found;
  if (bracket.found) {
    j["last_collapsed_tau"] = bracket.last_collapsed;
    j["first_interior_tau"] = bracket.first_interior;
  }
  return j;
}

inline json run_alpha_sweep(const ExperimentConfig& c, const fs::path& out) {
  const auto& p = c.pipeline;
  const auto fam = family(p);
  const double tau = c.sweep.tau;
  CsvWriter csv(out / "alpha_sweep.csv", {"alpha", "tau", "l_term", "l_rlhf", "l_ikl"});
  const auto tilt = theory::tilt_integrals(fam, p.reward, tau);
  for (double a : linspace(0.0, 1.0, c.sweep.points)) {
    csv.row({a, tau, theory::l_term_alpha(a, tau, fam), theory::l_rlhf_alpha(a, tau, fam, p.reward),
             theory::l_ikl_alpha(a, fam, tilt)});
  }
  json j;
  const auto term = theory::minimize_alpha(theory::term_objective(fam, tau));
  const auto rlhf = theory::minimize_alpha(theory::rlhf_objective(fam, tau, p.reward));
  const auto ikl = theory::minimize_alpha(theory::ikl_objective(fam, tau, p.reward));
  j["alpha_star_term"] = term.alpha;
  j["alpha_star_rlhf"] = rlhf.alpha;
  j["alpha_star_ikl"] = ikl.alpha;
  return j;
}

/// RMSE of the proxy against the analytic DRS at one point, per chain count.
struct DrsConsistency {
  double analytic = 0.0;
  std::vector<int> chains;
  std::vector<double> rmse;
  std::vector<double> mean_std_error;
  double slope = 0.0;  // least-squares slope of log rmse against log chains
  double final_estimate = 0.0;
  double final_std_error = 0.0;
};

inline DrsConsistency drs_consistency(const align::PipelineConfig& p, const DrsCheckConfig& d,
                                      const std::vector<int>& chain_counts, const std::vector<int>& replicates) {
  const GmmSpec g = p.gmm();
  const AnalyticScore score(g, p.schedule);
  const DrpReference ref{&score, nullptr, &g, p.schedule};
  DrsConsistency out;
  out.analytic = analytic_drs(g, p.reward, p.schedule, d.t, d.x);
  for (std::size_t i = 0; i < chain_counts.size(); ++i) {
    const int k = chain_counts[i];
    DrpConfig cfg{k, p.drp.steps, p.tau(), d.kind};
    double sq = 0.0, se = 0.0;
    for (int rep = 0; rep < replicates[i]; ++rep) {
      const auto res = drp_estimate(RowVector::Constant(1, d.x), RowVector::Constant(1, d.t), cfg, p.reward, ref,
                                    StreamKey::make(p.seed, Stage::kProxy, static_cast<std::uint64_t>(k),
                                                    static_cast<std::uint64_t>(rep)));
      const double err = res.estimate(0) - out.analytic;
      sq += err * err;
      se += res.std_error(0);
      if (i + 1 == chain_counts.size() && rep == 0) {
        out.final_estimate = res.estimate(0);
        out.final_std_error = res.std_error(0);
      }
    }
    out.chains.push_back(k);
    out.rmse.push_back(std::sqrt(sq / replicates[i]));
    out.mean_std_error.push_back(se / replicates[i]);
  }
  double mx = 0.0, my = 0.0;
  const auto n = static_cast<double>(out.chains.size());
  for (std::size_t i = 0; i < out.chains.size(); ++i) {
    mx += std::log(out.chains[i]) / n;
    my += std::log(out.rmse[i]) / n;
  }
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < out.chains.size(); ++i) {
    const double dx = std::log(out.chains[i]) - mx;
    sxy += dx * (std::log(out.rmse[i]) - my);
    sxx += dx * dx;
  }
  out.slope = sxx > 0.0 ? sxy / sxx : 0.0;
  return out;
}

inline json run_validate_drs(const ExperimentConfig& c, const fs::path& out) {
  std::vector<int> counts, reps;
  for (long k = 100; k <= c.drs.max_chains; k *= 10) {
    counts.push_back(static_cast<int>(k));
    reps.push_back(c.drs.replicates);
  }
  const auto res = drs_consistency(c.pipeline, c.drs, counts, reps);
  CsvWriter csv(out / "drs_consistency.csv", {"chains", "replicates", "rmse", "mean_std_error"});
  for (std::size_t i = 0; i < res.chains.size(); ++i) {
    csv.row({std::int64_t{res.chains[i]}, std::int64_t{reps[i]}, res.rmse[i], res.mean_std_error[i]});
  }
  json j;
  j["t"] = c.drs.t;
  j["x_t"] = c.drs.x;
  j["analytic_drs"] = res.analytic;
  j["estimate_at_max_chains"] = res.final_estimate;
  j["std_error_at_max_chains"] = res.final_std_error;
  j["error_in_std_errors"] = std::abs(res.final_estimate - res.analytic) / res.final_std_error;
  j["log_log_slope"] = res.slope;
  return j;
}

/// Grid g holds 4 + 2g times evenly spaced on (0, T].
inline std::vector<double> gradient_grid(int g, double t_max) {
  const int n = 4 + 2 * g;
  std::vector<double> out;
  for (int i = 1; i <= n; ++i) out.push_back(t_max * i / n);
  return out;
}

inline json run_validate_grad(const ExperimentConfig& c, const fs::path& out) {
  const auto& p = c.pipeline;
  const auto fam = family(p);
  CsvWriter csv(out / "gradient_check.csv",
                {"alpha", "grid", "t", "score_form", "finite_difference", "rel_error"});
  const auto alphas = c.grad.alphas == 1 ? std::vector<double>{c.grad.alpha_min}
                                         : linspace(c.grad.alpha_min, c.grad.alpha_max, c.grad.alphas);
  double worst = 0.0;
  int configs = 0;
  for (double a : alphas) {
    for (int g = 0; g < c.grad.grids; ++g) {
      const auto rep = theory::ikl_gradient_check(fam, p.reward, p.tau(), a, gradient_grid(g, p.schedule.t_max), c.grad.h);
      for (const auto& r : rep.rows) {
        csv.row({a, std::int64_t{g}, r.t, r.score_form, r.finite_difference, r.rel_error});
      }
      worst = std::max(worst, rep.max_rel_error);
      ++configs;
    }
  }
  json j;
  j["configurations"] = configs;
  j["max_rel_error"] = worst;
  return j;
}

// ---- training kinds ----

/// Identifies the inputs a stage checkpoint depends on.
inline std::string reference_key(const align::PipelineConfig& p) {
  using detail::format_double;
  return "seed=" + std::to_string(p.seed) + " mu=" + format_double(p.mu) + " sigma=" + format_double(p.sigma) +
         " gamma=" + format_double(p.schedule.gamma) + " T=" + format_double(p.schedule.t_max) +
         " t_floor=" + format_double(p.t_floor) + " width=" + std::to_string(p.width) +
         " depth=" + std::to_string(p.depth) + " steps=" + std::to_string(p.reference.steps) +
         " lr=" + format_double(p.reference.lr) + " batch=" + std::to_string(p.reference.batch);
}

inline std::string distill_key(const align::PipelineConfig& p) {
  using detail::format_double;
  return reference_key(p) + " | steps=" + std::to_string(p.distill.steps) + " lr=" + format_double(p.distill.lr) +
         " batch=" + std::to_string(p.distill.batch) + " ddim=" + std::to_string(p.ddim_steps) +
         " pool=" + std::to_string(p.distill_pool);
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

inline void write_losses(const fs::path& path, const std::vector<double>& losses) {
  CsvWriter csv(path, {"step", "loss"});
  for (std::size_t i = 0; i < losses.size(); ++i) csv.row({static_cast<std::int64_t>(i), losses[i]});
}

/// Loads `name`.mlp from `dir` when its key file matches; otherwise builds, saves, and records it.
template <typename Build>
MlpNet cached_stage(const fs::path& dir, const std::string& name, const std::string& key, json& info, Build&& build) {
  const fs::path net_path = dir / (name + ".mlp");
  const fs::path key_path = dir / (name + ".key");
  if (fs::exists(net_path) && fs::exists(key_path) && read_text(key_path) == key + "\n") {
    info[name] = {{"checkpoint", net_path.string()}, {"loaded", true}};
    return load_mlp(net_path);
  }
  const auto t0 = std::chrono::steady_clock::now();
  align::TrainedNet trained = build();
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_mlp(net_path, trained.net);
  write_text(key_path, key + "\n");
  write_losses(dir / (name + "_loss.csv"), trained.losses);
  info[name] = {{"checkpoint", net_path.string()},
                {"loaded", false},
                {"final_loss", trained.losses.empty() ? 0.0 : trained.losses.back()},
                {"train_seconds", seconds}};
  return std::move(trained.net);
}

inline fs::path checkpoint_dir(const ExperimentConfig& c, const fs::path& out) {
  const fs::path dir = c.checkpoint_dir.empty() ? out : fs::path(c.checkpoint_dir);
  fs::create_directories(dir);
  return dir;
}

inline MlpNet stage_reference(const ExperimentConfig& c, const fs::path& dir, json& info) {
  return cached_stage(dir, "reference", reference_key(c.pipeline), info,
                      [&] { return align::train_reference(c.pipeline); });
}

inline MlpNet stage_generator(const ExperimentConfig& c, const fs::path& dir, const MlpNet& reference, json& info) {
  return cached_stage(dir, "generator_distilled", distill_key(c.pipeline), info,
                      [&] { return align::distill_generator(reference, c.pipeline); });
}

inline json metrics_json(const align::EvalMetrics& m) {
  return {{"p_positive", m.p_positive}, {"mean_reward", m.mean_reward}, {"kl_to_qstar", m.kl_to_qstar}};
}

inline json run_train_ref(const ExperimentConfig& c, const fs::path& out) {
  json j;
  const MlpNet ref = stage_reference(c, checkpoint_dir(c, out), j);
  const auto err = align::reference_score_error(ref, c.pipeline, c.pipeline.eval_samples,
                                                StreamKey::make(c.pipeline.seed, Stage::kEval, 0, 2));
  j["score_mse"] = err.score_space;
  j["noise_mse"] = err.noise_space;
  j["parameter_hash"] = hex64(parameter_hash(ref));
  return j;
}

inline json run_distill(const ExperimentConfig& c, const fs::path& out) {
  json j;
  const fs::path dir = checkpoint_dir(c, out);
  const MlpNet ref = stage_reference(c, dir, j);
  const MlpNet gen = stage_generator(c, dir, ref, j);
  const auto m = align::evaluate_generator(gen, c.pipeline, c.pipeline.eval_samples,
                                           StreamKey::make(c.pipeline.seed, Stage::kEval, 0, 1));
  j["metrics"] = metrics_json(m);
  return j;
}

inline json align_one(const ExperimentConfig& c, const fs::path& out, const MlpNet& ref, const MlpNet& gen) {
  const auto& p = c.pipeline;
  const std::string method(align::to_string(p.method));
  CsvWriter csv(out / ("metrics_" + method + ".csv"),
                {"outer_step", "method", "tau", "p_positive", "mean_reward", "ta_dsm_loss", "kl_to_qstar"});
  const auto res = align::run_alignment(p, ref, gen, [&](const align::MetricsRow& r) {
    csv.row({r.outer_step, method, r.tau, r.metrics.p_positive, r.metrics.mean_reward, r.ta_dsm_loss,
             r.metrics.kl_to_qstar});
  });
  save_mlp(out / ("generator_" + method + ".mlp"), res.generator);
  save_mlp(out / ("ta_" + method + ".mlp"), res.ta);
  json j = metrics_json(res.final_metrics);
  j["target_mass"] = theory::target_mass(p.tau());
  j["eval_samples"] = p.eval_samples;
  return j;
}

inline json run_align(const ExperimentConfig& c, const fs::path& out) {
  json j;
  const fs::path dir = checkpoint_dir(c, out);
  json stages;
  const MlpNet ref = stage_reference(c, dir, stages);
  const MlpNet gen = stage_generator(c, dir, ref, stages);
  j["stages"] = stages;
  j["method"] = align::to_string(c.pipeline.method);
  j["final"] = align_one(c, out, ref, gen);
  return j;
}

inline json run_full_toy(const ExperimentConfig& c, const fs::path& out) {
  json j;
  j["threshold_scan"] = run_threshold_scan(c, out);
  const fs::path dir = checkpoint_dir(c, out);
  json stages;
  const MlpNet ref = stage_reference(c, dir, stages);
  const MlpNet gen = stage_generator(c, dir, ref, stages);
  j["stages"] = stages;
  for (auto m : {align::Method::kDidr, align::Method::kDipp}) {
    ExperimentConfig mc = c;
    mc.pipeline.method = m;
    j[std::string(align::to_string(m))] = align_one(mc, out, ref, gen);
  }
  return j;
}

inline json dispatch(const ExperimentConfig& c, const fs::path& out) {
  switch (c.kind) {
    case Kind::kThresholdScan: return run_threshold_scan(c, out);
    case Kind::kAlphaSweep: return run_alpha_sweep(c, out);
    case Kind::kTrainRef: return run_train_ref(c, out);
    case Kind::kDistill: return run_distill(c, out);
    case Kind::kAlign: return run_align(c, out);
    case Kind::kValidateDrs: return run_validate_drs(c, out);
    case Kind::kValidateGrad: return run_validate_grad(c, out);
    case Kind::kFullToy: return run_full_toy(c, out);
  }
  throw UsageError("unhandled experiment kind");
}

inline json error_record(const std::exception& e) {
  json err;
  err["message"] = e.what();
  if (const auto* s = dynamic_cast<const StageFault*>(&e)) {
    err["type"] = "stage_fault";
    err["stage"] = s->stage();
    err["step"] = s->step();
  } else if (const auto* t = dynamic_cast<const TrainingFault*>(&e)) {
    err["type"] = "training_fault";
    err["step"] = t->step();
  } else if (dynamic_cast<const EstimatorFault*>(&e)) {
    err["type"] = "estimator_fault";
  } else if (dynamic_cast<const QuadratureError*>(&e)) {
    err["type"] = "quadrature_error";
  } else if (dynamic_cast<const ConvexityError*>(&e)) {
    err["type"] = "convexity_error";
  } else if (dynamic_cast<const ConfigError*>(&e)) {
    err["type"] = "config_error";
  } else {
    err["type"] = "runtime_error";
  }
  return err;
}

/// Writes the resolved config, format stamp, CSVs, and summary.json into `out`.
inline int run(const ExperimentConfig& c, const fs::path& out, std::ostream& log = std::cerr) {
  fs::create_directories(out);
  write_text(out / "config.resolved", resolved_text(c));
  write_text(out / "FORMAT", "didr-output " + std::to_string(kFormatVersion) + "\n");

  json summary;
  summary["format_version"] = kFormatVersion;
  summary["kind"] = to_string(c.kind);
  summary["seed"] = c.pipeline.seed;
  summary["config_hash"] = hex64(config_hash(c));
  const auto start = std::chrono::steady_clock::now();
  int code = kExitOk;
  try {
    summary["results"] = dispatch(c, out);
    summary["status"] = "ok";
  } catch (const ConfigError& e) {
    summary["status"] = "error";
    summary["error"] = error_record(e);
    log << "config error: " << e.what() << "\n";
    code = kExitConfig;
  } catch (const std::exception& e) {
    summary["status"] = "error";
    summary["error"] = error_record(e);
    log << "runtime fault: " << e.what() << "\n";
    code = kExitRuntime;
  }
  summary["wall_clock_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_text(out / "summary.json", summary.dump(2) + "\n");
  return code;
}

}  // namespace didr::exp
