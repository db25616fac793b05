#pragma once

// Denoising chains from x_t back to an x0 estimate.
//
//   ddim       deterministic probability-flow steps on a uniform grid
//   ddpm       Tweedie estimate + stochastic DDPM posterior step, fixed noise
//   euler      Euler steps of a flow-matching ODE on a per-chain schedule
//
// The ddpm and euler chains are recorded on a tape so their input gradients are
// available; ddim is also provided tape-free for bulk sampling.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "didr/diffusion/models.hpp"
#include "didr/rng.hpp"

namespace didr {

enum class ChainKind { kDdim, kDdpm, kEulerFlow, kExactPosterior };

enum class TimestepRule { kUniformGrid, kUniformRandomPerChain };

inline std::string_view to_string(ChainKind k) {
  switch (k) {
    case ChainKind::kDdim: return "ddim-deterministic";
    case ChainKind::kDdpm: return "ddpm-stochastic";
    case ChainKind::kEulerFlow: return "euler-flow";
    case ChainKind::kExactPosterior: return "exact-posterior";
  }
  return "?";
}

inline ChainKind chain_kind_from_string(std::string_view s) {
  if (s == "ddim-deterministic") return ChainKind::kDdim;
  if (s == "ddpm-stochastic") return ChainKind::kDdpm;
  if (s == "euler-flow") return ChainKind::kEulerFlow;
  if (s == "exact-posterior") return ChainKind::kExactPosterior;
  throw ConfigError("unknown chain kind '" + std::string(s) + "'");
}

struct ChainSpec {
  ChainKind kind = ChainKind::kDdpm;
  int steps = 4;
  TimestepRule timestep_rule = TimestepRule::kUniformGrid;

  void validate() const {
    if (steps < 1) throw ConfigError("chain: steps must be >= 1");
    if (kind == ChainKind::kEulerFlow && timestep_rule != TimestepRule::kUniformRandomPerChain) {
      throw ConfigError("chain: euler-flow draws its timesteps per chain");
    }
    if (kind == ChainKind::kDdim && timestep_rule != TimestepRule::kUniformGrid) {
      throw ConfigError("chain: ddim uses the uniform grid");
    }
  }
};

struct ChainStats {
  int clamped_radicands = 0;
};

namespace detail {

inline void check_steps(int steps, const RowVector& t_start) {
  if (steps < 1) throw ConfigError("chain: steps must be >= 1");
  for (Eigen::Index j = 0; j < t_start.size(); ++j) {
    if (t_start(j) > 0.0 && !(t_start(j) / steps > 0.0)) throw ConfigError("chain: step size underflow");
  }
}

}  // namespace detail

/// Deterministic DDIM from t_start (per sample) to 0 on a uniform grid.
inline RowVector ddim_chain(const ScoreModel& score, const VpSchedule& s, const RowVector& x_start,
                            const RowVector& t_start, int steps) {
  detail::check_steps(steps, t_start);
  const auto n = x_start.size();
  RowVector x = x_start;
  RowVector t(n), t_prev(n);
  std::vector<Eigen::Index> active;
  for (int j = steps; j >= 1; --j) {
    for (Eigen::Index b = 0; b < n; ++b) {
      t(b) = t_start(b) * j / steps;
      t_prev(b) = t_start(b) * (j - 1) / steps;
    }
    // Samples entering at t = 0 are left untouched.
    active.clear();
    for (Eigen::Index b = 0; b < n; ++b) {
      if (t(b) > 0.0) active.push_back(b);
    }
    if (active.empty()) break;
    RowVector xa(static_cast<Eigen::Index>(active.size()));
    RowVector ta(xa.size());
    for (Eigen::Index k = 0; k < xa.size(); ++k) {
      xa(k) = x(active[static_cast<std::size_t>(k)]);
      ta(k) = t(active[static_cast<std::size_t>(k)]);
    }
    const RowVector sc = score.eval(xa, ta);
    for (Eigen::Index k = 0; k < xa.size(); ++k) {
      const auto b = active[static_cast<std::size_t>(k)];
      const double a = s.signal(t(b));
      const double sd = s.noise_std(t(b));
      const double eps = -sd * sc(k);
      const double x0 = (x(b) - sd * eps) / a;
      x(b) = s.signal(t_prev(b)) * x0 + s.noise_std(t_prev(b)) * eps;
    }
  }
  return x;
}

inline RowVector ddim_chain(const ScoreModel& score, const VpSchedule& s, const RowVector& x_start, double t_start,
                            int steps) {
  return ddim_chain(score, s, x_start, RowVector::Constant(x_start.size(), t_start), steps);
}

/// DDIM recorded on a tape, for input-gradient checks.
inline ad::Var ddim_chain(ad::Tape& tape, const ScoreModel& score, const VpSchedule& s, ad::Var x_start,
                          const RowVector& t_start, int steps) {
  detail::check_steps(steps, t_start);
  for (Eigen::Index b = 0; b < t_start.size(); ++b) {
    if (!(t_start(b) > 0.0)) throw DomainError("tape ddim_chain needs t_start > 0");
  }
  const auto n = t_start.size();
  ad::Var x = x_start;
  RowVector t(n), a(n), var(n), a_prev(n), sd_prev(n), sd(n);
  for (int j = steps; j >= 1; --j) {
    for (Eigen::Index b = 0; b < n; ++b) {
      t(b) = t_start(b) * j / steps;
      const double tp = t_start(b) * (j - 1) / steps;
      a(b) = s.signal(t(b));
      sd(b) = s.noise_std(t(b));
      var(b) = sd(b) * sd(b);
      a_prev(b) = s.signal(tp);
      sd_prev(b) = s.noise_std(tp);
    }
    const ad::Var sc = score.on_tape(tape, x, t);
    // x0 = (x + var s) / a ; eps = -sd s ; x' = a' x0 + sd' eps
    const ad::Var x0 = tape.scale_cols(tape.add(x, tape.scale_cols(sc, var)), a.cwiseInverse());
    const ad::Var eps = tape.scale_cols(sc, -sd);
    x = tape.add(tape.scale_cols(x0, a_prev), tape.scale_cols(eps, sd_prev));
  }
  return x;
}

/// Stochastic VP chain. `noise` holds one row per injected step (steps - 1 rows,
/// row 0 used first); the output is the Tweedie estimate at the last grid time.
inline ad::Var ddpm_posterior_chain(ad::Tape& tape, const ScoreModel& score, const VpSchedule& s, ad::Var x_t,
                                    const RowVector& t_start, int steps, const Matrix& noise,
                                    ChainStats* stats = nullptr) {
  detail::check_steps(steps, t_start);
  const auto n = t_start.size();
  if (noise.rows() != steps - 1 || (steps > 1 && noise.cols() != n)) {
    throw ConfigError("ddpm_posterior_chain: expected " + std::to_string(steps - 1) + " noise rows of width " +
                      std::to_string(n));
  }
  for (Eigen::Index b = 0; b < n; ++b) {
    if (!(t_start(b) > 0.0)) throw DomainError("ddpm_posterior_chain needs t > 0");
  }
  ad::Var x = x_t;
  ad::Var x0;
  RowVector t(n), a(n), var(n), inv_a(n);
  RowVector keep(n), direction(n), jitter(n);
  for (int j = steps; j >= 1; --j) {
    for (Eigen::Index b = 0; b < n; ++b) {
      t(b) = t_start(b) * j / steps;
      a(b) = s.signal(t(b));
      if (!(a(b) > 0.0)) throw DomainError("ddpm_posterior_chain: alpha underflow");
      inv_a(b) = 1.0 / a(b);
      var(b) = s.noise_var(t(b));
    }
    x0 = tape.scale_cols(tape.add(x, tape.scale_cols(score.on_tape(tape, x, t), var)), inv_a);
    if (j == 1) break;
    // x' = a' x0 + sd' (x - a x0) / sd + sigma_tilde eps
    for (Eigen::Index b = 0; b < n; ++b) {
      const double tp = t_start(b) * (j - 1) / steps;
      const double ap = s.signal(tp);
      const double sdp = s.noise_std(tp);
      const double sd = std::sqrt(var(b));
      double radicand = 1.0 - (a(b) * a(b) * sdp * sdp) / (ap * ap * sd * sd);
      if (radicand < 0.0) {
        radicand = 0.0;
        if (stats) ++stats->clamped_radicands;
      }
      const double sigma_tilde = sdp * std::sqrt(radicand);
      keep(b) = sdp / sd;
      direction(b) = ap - sdp / sd * a(b);
      jitter(b) = sigma_tilde * noise(steps - j, b);
    }
    x = tape.add_const(tape.add(tape.scale_cols(x, keep), tape.scale_cols(x0, direction)), jitter);
  }
  return x0;
}

/// S times for one chain: t_start followed by S - 1 uniform draws from (0, t_start), descending.
inline std::vector<double> draw_flow_schedule(double t_start, int steps, CounterRng& rng) {
  if (steps < 1) throw ConfigError("flow schedule: steps must be >= 1");
  std::vector<double> times{t_start};
  for (int i = 1; i < steps; ++i) times.push_back(rng.uniform(0.0, t_start));
  std::sort(times.begin() + 1, times.end(), std::greater<>());
  return times;
}

/// Euler ODE on per-column schedules; schedule row 0 is the entry time, rows descend.
inline ad::Var euler_flow_chain(ad::Tape& tape, const VelocityModel& velocity, ad::Var x_t, const Matrix& schedule) {
  const auto n = tape.value(x_t).cols();
  if (schedule.rows() < 1 || schedule.cols() != n) throw ConfigError("euler_flow_chain: schedule shape mismatch");
  for (Eigen::Index b = 0; b < n; ++b) {
    for (Eigen::Index r = 0; r < schedule.rows(); ++r) {
      if (!(schedule(r, b) > 0.0 && schedule(r, b) < 1.0)) throw DomainError("euler_flow_chain: time outside (0, 1)");
      if (r > 0 && !(schedule(r, b) < schedule(r - 1, b))) {
        throw ConfigError("euler_flow_chain: schedule must be strictly descending");
      }
    }
  }
  ad::Var x = x_t;
  for (Eigen::Index r = 0; r + 1 < schedule.rows(); ++r) {
    const RowVector t = schedule.row(r);
    const RowVector dt = schedule.row(r + 1) - schedule.row(r);
    x = tape.add(x, tape.scale_cols(velocity.on_tape(tape, x, t), dt));
  }
  const RowVector last = schedule.row(schedule.rows() - 1);
  return tape.sub(x, tape.scale_cols(velocity.on_tape(tape, x, last), last));
}

}  // namespace didr
