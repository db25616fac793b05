#pragma once

// Toy alignment pipeline: reference DSM training, DDIM distillation of a
// one-step generator, then alternating TA / generator updates.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "didr/analytic/gmm.hpp"
#include "didr/diffusion/chains.hpp"
#include "didr/diffusion/forward.hpp"
#include "didr/drp/drp.hpp"
#include "didr/grad_core/adam.hpp"
#include "didr/grad_core/mlp.hpp"
#include "didr/theory/theory.hpp"

namespace didr::align {

enum class Method : std::uint8_t { kDidr, kDipp };

inline std::string_view to_string(Method m) { return m == Method::kDidr ? "didr" : "dipp"; }

inline Method method_from_string(std::string_view s) {
  if (s == "didr") return Method::kDidr;
  if (s == "dipp") return Method::kDipp;
  throw ConfigError("unknown method '" + std::string(s) + "' (expected didr or dipp)");
}

struct StageConfig {
  int steps = 0;
  double lr = 1e-3;
  int batch = 2048;

  void validate(const std::string& name) const {
    if (steps < 0) throw ConfigError(name + ".steps must be >= 0");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError(name + ".lr must be finite and >= 0");
    if (batch < 1) throw ConfigError(name + ".batch must be >= 1");
  }
};

struct PipelineConfig {
  Method method = Method::kDidr;
  std::uint64_t seed = 0;

  double mu = 2.0;
  double sigma = 0.5;
  VpSchedule schedule{20.0, 0.25};
  double t_floor = 1e-4;
  RewardSpec reward = RewardSpec::smooth(20.0, 1.0);
  DrpConfig drp{4, 4, 1.0, ChainKind::kDdpm};
  TimeWeight weight = unit_weight();  // w(t) on the generator loss

  int width = 128;
  int depth = 3;

  StageConfig reference{10000, 3e-4, 2048};
  StageConfig distill{3000, 1e-3, 2048};
  int ddim_steps = 30;
  int distill_pool = 65536;

  int outer_steps = 6000;
  int ta_rounds = 5;
  double ta_lr = 3e-4;
  int ta_batch = 2048;
  double gen_lr = 1e-4;
  int gen_batch = 2048;

  int log_every = 250;
  int log_samples = 10000;
  int eval_samples = 10000;

  /// 2,000 outer steps, width 64, batch 512 at every stage.
  static PipelineConfig reduced() {
    PipelineConfig c;
    c.width = 64;
    c.reference.batch = 512;
    c.distill.batch = 512;
    c.ta_batch = 512;
    c.gen_batch = 512;
    c.outer_steps = 2000;
    return c;
  }

  double tau() const { return reward.tau; }

  /// Sets the reward temperature and the proxy's softmax temperature together.
  void set_tau(double tau) {
    reward.tau = tau;
    drp.tau = tau;
  }

  GmmSpec gmm() const { return GmmSpec::symmetric_bimodal(mu, sigma); }

  MlpShape score_shape() const {
    return {2, width, depth, 1, Activation::kSilu, Head::kNoisePrediction};
  }

  MlpShape generator_shape() const { return {1, width, depth, 1, Activation::kSilu, Head::kDirectOutput}; }

  void validate() const {
    if (!(mu > 0.0) || !std::isfinite(mu)) throw ConfigError("mu must be positive and finite");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("sigma must be positive and finite");
    schedule.validate();
    if (!(t_floor > 0.0) || !(t_floor < schedule.t_max)) throw ConfigError("t_floor must lie in (0, T)");
    reward.validate();
    drp.validate();
    if (drp.tau != reward.tau) throw ConfigError("drp.tau must equal the reward tau");
    if (drp.kind == ChainKind::kEulerFlow) throw ConfigError("drp.kind: the pipeline has no trained velocity model");
    if (!weight) throw ConfigError("weight: w(t) is not set");
    if (width < 1 || depth < 0) throw ConfigError("network width must be >= 1 and depth >= 0");
    reference.validate("reference");
    distill.validate("distill");
    if (ddim_steps < 1) throw ConfigError("ddim_steps must be >= 1");
    if (distill_pool < 1) throw ConfigError("distill_pool must be >= 1");
    if (outer_steps < 0 || ta_rounds < 0) throw ConfigError("outer_steps and ta_rounds must be >= 0");
    if (!(ta_lr >= 0.0) || !(gen_lr >= 0.0)) throw ConfigError("learning rates must be >= 0");
    if (ta_batch < 1 || gen_batch < 1) throw ConfigError("batches must be >= 1");
    if (log_every < 1) throw ConfigError("log_every must be >= 1");
    if (log_samples < 1 || eval_samples < 1) throw ConfigError("sample counts must be >= 1");
  }
};

struct TrainedNet {
  MlpNet net;
  std::vector<double> losses;
};

/// Sampling helpers shared by every stage.
inline RowVector draw_normals(CounterRng& rng, int n) {
  RowVector out(n);
  for (int j = 0; j < n; ++j) out(j) = rng.normal();
  return out;
}

inline RowVector draw_times(CounterRng& rng, int n, double lo, double hi) {
  RowVector out(n);
  for (int j = 0; j < n; ++j) out(j) = rng.uniform(lo, hi);
  return out;
}

inline RowVector sample_mixture(const GmmSpec& g, CounterRng& rng, int n) {
  RowVector out(n);
  for (int j = 0; j < n; ++j) {
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t pick = g.components.size() - 1;
    for (std::size_t i = 0; i < g.components.size(); ++i) {
      acc += g.components[i].weight;
      if (u < acc) {
        pick = i;
        break;
      }
    }
    const auto& c = g.components[pick];
    out(j) = c.mean + std::sqrt(c.variance) * rng.normal();
  }
  return out;
}

inline RowVector generate(const MlpNet& generator, const RowVector& z) {
  return didr::evaluate(generator, Matrix(z)).row(0);
}

namespace detail {

template <typename F>
auto in_stage(const std::string& stage, std::int64_t step, F&& body) {
  try {
    return body();
  } catch (const StageFault&) {
    throw;
  } catch (const TrainingFault& e) {
    throw StageFault(stage, e.what(), step);
  } catch (const EstimatorFault& e) {
    throw StageFault(stage, e.what(), step);
  }
}

}  // namespace detail

/// Stage 1: DSM on samples of the base mixture. The returned net is treated as frozen.
inline TrainedNet train_reference(const PipelineConfig& cfg) {
  cfg.validate();
  const GmmSpec g = cfg.gmm();
  TrainedNet out{make_mlp(cfg.score_shape(), StreamKey::make(cfg.seed, Stage::kInit, 0)), {}};
  auto params = out.net.parameters();
  AdamState adam({.lr = cfg.reference.lr}, params);
  const int b = cfg.reference.batch;
  for (int step = 0; step < cfg.reference.steps; ++step) {
    detail::in_stage("reference", step, [&] {
      CounterRng rng(StreamKey::make(cfg.seed, Stage::kReference, static_cast<std::uint64_t>(step)));
      DsmBatch batch;
      batch.x0 = sample_mixture(g, rng, b);
      batch.t = draw_times(rng, b, cfg.t_floor, cfg.schedule.t_max);
      batch.noise = draw_normals(rng, b);
      const auto res = dsm_loss(out.net, cfg.schedule, batch);
      out.losses.push_back(res.loss);
      adam_step(adam, params, res.grads);
      out.net.set_parameters(params);
      return 0;
    });
  }
  return out;
}

/// Mean squared error of a score net against the analytic mixture score, over
/// (x0, t, noise) drawn as in training. `noise_space` is the same error times (1 - alpha_bar).
struct ScoreError {
  double score_space = 0.0;
  double noise_space = 0.0;
};

inline ScoreError reference_score_error(const MlpNet& net, const PipelineConfig& cfg, int n, StreamKey key) {
  CounterRng rng(key);
  const RowVector x0 = sample_mixture(cfg.gmm(), rng, n);
  const RowVector t = draw_times(rng, n, cfg.t_floor, cfg.schedule.t_max);
  const RowVector noise = draw_normals(rng, n);
  const RowVector x_t = forward_sample(x0, cfg.schedule, t, noise);
  const RowVector diff = NetScore(net, cfg.schedule).eval(x_t, t) - AnalyticScore(cfg.gmm(), cfg.schedule).eval(x_t, t);
  ScoreError e;
  for (Eigen::Index j = 0; j < n; ++j) {
    e.score_space += diff(j) * diff(j);
    e.noise_space += diff(j) * diff(j) * cfg.schedule.noise_var(t(j));
  }
  e.score_space /= n;
  e.noise_space /= n;
  return e;
}

/// Fixed regression set: z and the 30-step DDIM endpoint of the reference from x_T = z.
struct DistillPool {
  RowVector z;
  RowVector target;
};

inline DistillPool make_distill_pool(const MlpNet& reference, const PipelineConfig& cfg) {
  CounterRng rng(StreamKey::make(cfg.seed, Stage::kDistill, 0));
  DistillPool pool;
  pool.z = draw_normals(rng, cfg.distill_pool);
  const NetScore score(reference, cfg.schedule);
  pool.target = ddim_chain(score, cfg.schedule, pool.z, cfg.schedule.t_max, cfg.ddim_steps);
  return pool;
}

/// mean (g(z) - y)^2 and its parameter gradient.
inline DsmResult regression_loss(const MlpNet& generator, const RowVector& z, const RowVector& y, bool with_grads = true) {
  if (z.size() == 0 || z.size() != y.size()) throw ConfigError("regression_loss: bad batch");
  ad::Tape tape;
  const auto binding = forward(generator, tape, tape.constant(Matrix(z)), with_grads);
  const ad::Var residual = tape.add_const(binding.output, Matrix(-y));
  const ad::Var loss = tape.scale(tape.sum(tape.square(residual)), 1.0 / static_cast<double>(z.size()));
  DsmResult res;
  res.loss = tape.scalar(loss);
  if (!std::isfinite(res.loss)) throw TrainingFault("regression_loss: non-finite loss", -1);
  if (with_grads) {
    tape.backward(loss);
    res.grads = binding.gradients(tape);
  }
  return res;
}

/// Stage 2: regress the generator onto minibatches of the pool.
inline TrainedNet distill_generator(const DistillPool& pool, const PipelineConfig& cfg) {
  cfg.validate();
  TrainedNet out{make_mlp(cfg.generator_shape(), StreamKey::make(cfg.seed, Stage::kInit, 1)), {}};
  auto params = out.net.parameters();
  AdamState adam({.lr = cfg.distill.lr}, params);
  const auto n = pool.z.size();
  const int b = cfg.distill.batch;
  RowVector z(b), y(b);
  for (int step = 0; step < cfg.distill.steps; ++step) {
    detail::in_stage("distill", step, [&] {
      CounterRng rng(StreamKey::make(cfg.seed, Stage::kDistill, static_cast<std::uint64_t>(step) + 1));
      for (int j = 0; j < b; ++j) {
        const auto k = std::min<Eigen::Index>(static_cast<Eigen::Index>(rng.uniform() * static_cast<double>(n)), n - 1);
        z(j) = pool.z(k);
        y(j) = pool.target(k);
      }
      const auto res = regression_loss(out.net, z, y);
      out.losses.push_back(res.loss);
      adam_step(adam, params, res.grads);
      out.net.set_parameters(params);
      return 0;
    });
  }
  return out;
}

inline TrainedNet distill_generator(const MlpNet& reference, const PipelineConfig& cfg) {
  return distill_generator(make_distill_pool(reference, cfg), cfg);
}

/// Teaching assistant: a score net tracking the generator's diffused marginals.
struct TaState {
  MlpNet net;
  AdamState adam;
  double last_loss = 0.0;
};

/// TA initialized as a copy of the reference.
inline TaState make_ta(const MlpNet& reference, const PipelineConfig& cfg) {
  return {reference, AdamState({.lr = cfg.ta_lr}, reference.parameters()), 0.0};
}

/// One DSM step on fresh generator samples; `round` indexes the TA update within the outer step.
inline void ta_update(TaState& ta, const MlpNet& generator, const PipelineConfig& cfg, std::int64_t outer, int round) {
  CounterRng rng(StreamKey::make(cfg.seed, Stage::kTeacher, static_cast<std::uint64_t>(outer),
                                 static_cast<std::uint64_t>(round)));
  const int b = cfg.ta_batch;
  DsmBatch batch;
  batch.x0 = generate(generator, draw_normals(rng, b));
  batch.t = draw_times(rng, b, cfg.t_floor, cfg.schedule.t_max);
  batch.noise = draw_normals(rng, b);
  const auto res = dsm_loss(ta.net, cfg.schedule, batch);
  ta.last_loss = res.loss;
  auto params = ta.net.parameters();
  adam_step(ta.adam, params, res.grads);
  ta.net.set_parameters(params);
}

struct GeneratorBatch {
  RowVector z;
  RowVector t;
  RowVector noise;
};

inline GeneratorBatch draw_generator_batch(const PipelineConfig& cfg, std::int64_t outer) {
  CounterRng rng(StreamKey::make(cfg.seed, Stage::kGenerator, static_cast<std::uint64_t>(outer)));
  GeneratorBatch b;
  b.z = draw_normals(rng, cfg.gen_batch);
  b.t = draw_times(rng, cfg.gen_batch, cfg.t_floor, cfg.schedule.t_max);
  b.noise = draw_normals(rng, cfg.gen_batch);
  return b;
}

/// Frozen coefficients of the generator surrogate
///   sum_b xt_coef_b * x_t,b + reward_coef * sum_b r(x0_b).
struct GeneratorTargets {
  RowVector mismatch;  // per-sample score mismatch before weighting
  RowVector xt_coef;
  double reward_coef = 0.0;
};

/// Monte-Carlo weight turning a batch mean over t ~ U[t_floor, T] into the time integral.
inline double time_integral_scale(const PipelineConfig& cfg) { return cfg.schedule.t_max - cfg.t_floor; }

/// Builds targets from mismatch values; the only place the two methods differ.
inline GeneratorTargets targets_from_scores(Method method, const RowVector& t, const RowVector& s_ta,
                                            const RowVector& s_ref, const RowVector& s_reward,
                                            const PipelineConfig& cfg) {
  const auto n = t.size();
  GeneratorTargets out;
  out.xt_coef.resize(n);
  if (method == Method::kDidr) {
    out.mismatch = s_ta - s_ref - s_reward;
  } else {
    out.mismatch = cfg.tau() * (s_ta - s_ref);
    out.reward_coef = -1.0 / static_cast<double>(n);
  }
  const double scale = time_integral_scale(cfg) / static_cast<double>(n);
  for (Eigen::Index j = 0; j < n; ++j) out.xt_coef(j) = scale * cfg.weight(t(j)) * out.mismatch(j);
  return out;
}

/// Evaluates the frozen score terms at x_t and dispatches on the method.
inline GeneratorTargets generator_targets(Method method, const RowVector& x_t, const RowVector& t, const MlpNet& ta,
                                          const MlpNet& reference, const PipelineConfig& cfg, StreamKey proxy_key) {
  const NetScore ta_score(ta, cfg.schedule);
  const NetScore ref_score(reference, cfg.schedule);
  const RowVector s_ta = ta_score.eval(x_t, t);
  const RowVector s_ref = ref_score.eval(x_t, t);
  RowVector s_reward = RowVector::Zero(x_t.size());
  if (method == Method::kDidr) {
    const GmmSpec g = cfg.gmm();
    const DrpReference proxy{&ref_score, nullptr, &g, cfg.schedule};
    s_reward = drp_estimate(x_t, t, cfg.drp, cfg.reward, proxy, proxy_key).estimate;
  }
  return targets_from_scores(method, t, s_ta, s_ref, s_reward, cfg);
}

struct SurrogateResult {
  double value = 0.0;
  std::vector<Matrix> grads;
};

/// Stop-gradient surrogate whose parameter gradient is the score-mismatch
/// contraction with dx_t/dtheta, plus the endpoint reward term when present.
inline SurrogateResult generator_surrogate(const MlpNet& generator, const GeneratorBatch& batch,
                                           const GeneratorTargets& targets, const PipelineConfig& cfg,
                                           bool with_grads = true) {
  const auto n = batch.z.size();
  if (batch.t.size() != n || batch.noise.size() != n || targets.xt_coef.size() != n) {
    throw ConfigError("generator_surrogate: batch size mismatch");
  }
  RowVector a(n), jitter(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    a(j) = cfg.schedule.signal(batch.t(j));
    jitter(j) = cfg.schedule.noise_std(batch.t(j)) * batch.noise(j);
  }
  ad::Tape tape;
  const auto binding = forward(generator, tape, tape.constant(Matrix(batch.z)), with_grads);
  const ad::Var x0 = binding.output;
  const ad::Var x_t = tape.add_const(tape.scale_cols(x0, a), Matrix(jitter));
  ad::Var loss = tape.sum(tape.scale_cols(x_t, targets.xt_coef));
  if (targets.reward_coef != 0.0) {
    const Matrix& xv = tape.value(x0);
    Matrix r(1, n), dr(1, n);
    for (Eigen::Index j = 0; j < n; ++j) {
      r(0, j) = cfg.reward.value(xv(0, j));
      dr(0, j) = cfg.reward.gradient(xv(0, j));
    }
    const ad::Var rewards = tape.pointwise(x0, std::move(r), std::move(dr));
    loss = tape.add(loss, tape.scale(tape.sum(rewards), targets.reward_coef));
  }
  SurrogateResult res;
  res.value = tape.scalar(loss);
  if (!std::isfinite(res.value)) throw TrainingFault("generator_surrogate: non-finite value", -1);
  if (with_grads) {
    tape.backward(loss);
    res.grads = binding.gradients(tape);
  }
  return res;
}

struct GeneratorState {
  MlpNet net;
  AdamState adam;
};

inline GeneratorState make_generator_state(const MlpNet& generator, const PipelineConfig& cfg) {
  return {generator, AdamState({.lr = cfg.gen_lr}, generator.parameters())};
}

/// One generator step for outer step `outer`.
inline SurrogateResult generator_update(Method method, GeneratorState& gen, const MlpNet& ta, const MlpNet& reference,
                                        const PipelineConfig& cfg, std::int64_t outer) {
  const auto batch = draw_generator_batch(cfg, outer);
  const RowVector x0 = generate(gen.net, batch.z);
  const RowVector x_t = forward_sample(x0, cfg.schedule, batch.t, batch.noise);
  const auto targets = generator_targets(method, x_t, batch.t, ta, reference, cfg,
                                         StreamKey::make(cfg.seed, Stage::kProxy, static_cast<std::uint64_t>(outer)));
  auto res = generator_surrogate(gen.net, batch, targets, cfg);
  auto params = gen.net.parameters();
  adam_step(gen.adam, params, res.grads);
  gen.net.set_parameters(params);
  return res;
}

inline SurrogateResult generator_update_didr(GeneratorState& gen, const MlpNet& ta, const MlpNet& reference,
                                             const PipelineConfig& cfg, std::int64_t outer) {
  return generator_update(Method::kDidr, gen, ta, reference, cfg, outer);
}

inline SurrogateResult generator_update_dipp(GeneratorState& gen, const MlpNet& ta, const MlpNet& reference,
                                             const PipelineConfig& cfg, std::int64_t outer) {
  return generator_update(Method::kDipp, gen, ta, reference, cfg, outer);
}

struct EvalMetrics {
  double p_positive = 0.0;  // hard boundary at 0
  double mean_reward = 0.0;
  double kl_to_qstar = 0.0;
};

inline RowVector sample_generator(const MlpNet& generator, int n, StreamKey key) {
  CounterRng rng(key);
  return generate(generator, draw_normals(rng, n));
}

inline EvalMetrics evaluate_generator(const MlpNet& generator, const PipelineConfig& cfg, int n, StreamKey key) {
  const RowVector x = sample_generator(generator, n, key);
  const std::span<const double> xs(x.data(), static_cast<std::size_t>(x.size()));
  EvalMetrics m;
  m.p_positive = theory::positive_mass(xs);
  double total = 0.0;
  for (double v : xs) total += cfg.reward.value(v);
  m.mean_reward = total / static_cast<double>(n);
  m.kl_to_qstar = theory::kl_to_tilted(xs, cfg.gmm(), cfg.reward);
  return m;
}

struct MetricsRow {
  std::int64_t outer_step = 0;
  Method method = Method::kDidr;
  double tau = 0.0;
  EvalMetrics metrics;
  double ta_dsm_loss = 0.0;
};

struct AlignmentResult {
  MlpNet generator;
  MlpNet ta;
  std::vector<MetricsRow> rows;
  EvalMetrics final_metrics;
};

using RowSink = std::function<void(const MetricsRow&)>;

/// Stage 3 and 4: per outer step, ta_rounds TA updates then one generator update.
/// Rows are logged at step 0, every log_every steps, and at the end.
inline AlignmentResult run_alignment(const PipelineConfig& cfg, const MlpNet& reference, const MlpNet& generator,
                                     const RowSink& sink = {}) {
  cfg.validate();
  const std::uint64_t ref_hash = parameter_hash(reference);
  TaState ta = make_ta(reference, cfg);
  GeneratorState gen = make_generator_state(generator, cfg);
  AlignmentResult out;

  const auto log_row = [&](std::int64_t step) {
    MetricsRow row{step, cfg.method, cfg.tau(),
                   evaluate_generator(gen.net, cfg, cfg.log_samples,
                                      StreamKey::make(cfg.seed, Stage::kEval, static_cast<std::uint64_t>(step))),
                   ta.last_loss};
    out.rows.push_back(row);
    if (sink) sink(row);
  };

  log_row(0);
  for (std::int64_t outer = 0; outer < cfg.outer_steps; ++outer) {
    detail::in_stage("teacher", outer, [&] {
      for (int round = 0; round < cfg.ta_rounds; ++round) ta_update(ta, gen.net, cfg, outer, round);
      return 0;
    });
    detail::in_stage("generator", outer, [&] {
      generator_update(cfg.method, gen, ta.net, reference, cfg, outer);
      return 0;
    });
    const std::int64_t done = outer + 1;
    if (done % cfg.log_every == 0 || done == cfg.outer_steps) log_row(done);
  }

  if (parameter_hash(reference) != ref_hash) throw UsageError("run_alignment: reference parameters changed");
  out.final_metrics = evaluate_generator(gen.net, cfg, cfg.eval_samples,
                                         StreamKey::make(cfg.seed, Stage::kEval, 0, 1));
  out.generator = std::move(gen.net);
  out.ta = std::move(ta.net);
  return out;
}

}  // namespace didr::align
