#pragma once

// Diffused reward proxy: a softmax-weighted average of pathwise reward gradients
// through K differentiable denoising chains started at x_t.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "didr/analytic/tilted.hpp"
#include "didr/diffusion/chains.hpp"
#include "didr/rng.hpp"

namespace didr {

struct DrpConfig {
  int chains = 4;
  int steps = 4;
  double tau = 1.0;
  ChainKind kind = ChainKind::kDdpm;

  void validate() const {
    if (chains < 1) throw ConfigError("drp.chains must be >= 1");
    if (steps < 1) throw ConfigError("drp.steps must be >= 1");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("drp.tau must be positive and finite");
  }
};

/// The frozen model the chains denoise with. Only the member matching the chain kind is used.
struct DrpReference {
  const ScoreModel* score = nullptr;
  const VelocityModel* velocity = nullptr;
  const GmmSpec* gmm = nullptr;  // exact-posterior kind
  VpSchedule schedule{};
};

/// Max-subtracted softmax of rewards / tau.
inline std::vector<double> softmax_weights(const std::vector<double>& rewards, double tau) {
  if (rewards.empty()) throw ConfigError("softmax_weights: need at least one reward");
  if (!(tau > 0.0)) throw ConfigError("softmax_weights: tau must be positive");
  const double top = *std::max_element(rewards.begin(), rewards.end());
  std::vector<double> w(rewards.size());
  double total = 0.0;
  for (std::size_t k = 0; k < rewards.size(); ++k) {
    w[k] = std::exp((rewards[k] - top) / tau);
    total += w[k];
  }
  for (double& v : w) v /= total;
  return w;
}

/// Per-chain rows (K x B) alongside the estimate.
struct DrpResult {
  RowVector estimate;
  RowVector std_error;  // delta-method error of the self-normalized ratio; zero when K = 1
  Matrix endpoints;
  Matrix rewards;
  Matrix weights;
  Matrix gradients;  // d r(x0_k) / d x_t
  int clamped_radicands = 0;
};

// Exact posterior sampling by inverse CDF. The endpoint x0 = F^{-1}(u | x_t)
// has dx0/dx_t = -(dF/dx_t)(x0) / p(x0 | x_t).
namespace detail {

inline double posterior_cdf(const PosteriorMixture& post, double x0) {
  double f = 0.0;
  for (const auto& c : post.components) f += c.weight * normal_cdf((x0 - c.mean) / std::sqrt(c.variance));
  return f;
}

inline double posterior_cdf_dx(const PosteriorMixture& post, double x0) {
  double d = 0.0;
  for (const auto& c : post.components) {
    const double sd = std::sqrt(c.variance);
    const double z = (x0 - c.mean) / sd;
    d += c.d_weight * normal_cdf(z) - c.weight * normal_pdf(z) * c.d_mean / sd;
  }
  return d;
}

inline double posterior_quantile(const PosteriorMixture& post, double u) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& c : post.components) {
    const double sd = std::sqrt(c.variance);
    lo = std::min(lo, c.mean - 40.0 * sd);
    hi = std::max(hi, c.mean + 40.0 * sd);
  }
  double x = post.mean();
  if (!(x > lo && x < hi)) x = 0.5 * (lo + hi);
  // Safeguarded Newton: fall back to bisection whenever a step leaves the bracket.
  for (int it = 0; it < 200; ++it) {
    const double f = posterior_cdf(post, x) - u;
    if (f > 0.0) hi = x; else lo = x;
    const double p = post.density(x);
    double next = p > 0.0 ? x - f / p : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - x) <= 1e-15 * (1.0 + std::abs(x))) return next;
    x = next;
  }
  return x;
}

/// Streams for chain k of batch column b.
inline CounterRng chain_rng(StreamKey key, std::size_t chain, Eigen::Index column) {
  return CounterRng(key.child(chain).child(static_cast<std::uint64_t>(column)));
}

}  // namespace detail

/// One exact-posterior draw with its pathwise derivative in x_t.
struct PosteriorDraw {
  double x0;
  double dx0_dxt;
};

inline PosteriorDraw posterior_draw(const PosteriorMixture& post, double u) {
  const double x0 = detail::posterior_quantile(post, u);
  const double p = post.density(x0);
  if (!(p > 0.0)) throw DomainError("posterior_draw: zero density at the sampled point");
  return {x0, -detail::posterior_cdf_dx(post, x0) / p};
}

/// s_r estimate at each column of (x_t, t). Chains use independent streams derived from `key`.
inline DrpResult drp_estimate(const RowVector& x_t, const RowVector& t, const DrpConfig& cfg, const RewardSpec& reward,
                              const DrpReference& ref, StreamKey key) {
  cfg.validate();
  reward.validate();
  const auto n = x_t.size();
  if (t.size() != n) throw ConfigError("drp_estimate: x_t and t sizes differ");
  const auto k_count = static_cast<std::size_t>(cfg.chains);

  DrpResult res;
  res.endpoints.resize(cfg.chains, n);
  res.gradients.resize(cfg.chains, n);
  res.rewards.resize(cfg.chains, n);

  for (std::size_t k = 0; k < k_count; ++k) {
    const auto row = static_cast<Eigen::Index>(k);
    switch (cfg.kind) {
      case ChainKind::kExactPosterior: {
        if (!ref.gmm) throw ConfigError("drp_estimate: exact-posterior chains need the reference mixture");
        for (Eigen::Index b = 0; b < n; ++b) {
          auto rng = detail::chain_rng(key, k, b);
          const auto post = posterior_mixture(*ref.gmm, ref.schedule, t(b), x_t(b));
          const auto draw = posterior_draw(post, rng.uniform());
          res.endpoints(row, b) = draw.x0;
          res.gradients(row, b) = reward.gradient(draw.x0) * draw.dx0_dxt;
        }
        break;
      }
      case ChainKind::kDdpm:
      case ChainKind::kDdim:
      case ChainKind::kEulerFlow: {
        ad::Tape tape;
        const ad::Var x = tape.leaf(x_t, true);
        ad::Var x0;
        if (cfg.kind == ChainKind::kEulerFlow) {
          if (!ref.velocity) throw ConfigError("drp_estimate: euler-flow chains need a velocity model");
          Matrix schedule(cfg.steps, n);
          for (Eigen::Index b = 0; b < n; ++b) {
            auto rng = detail::chain_rng(key, k, b);
            const auto times = draw_flow_schedule(t(b), cfg.steps, rng);
            for (int r = 0; r < cfg.steps; ++r) schedule(r, b) = times[static_cast<std::size_t>(r)];
          }
          x0 = euler_flow_chain(tape, *ref.velocity, x, schedule);
        } else {
          if (!ref.score) throw ConfigError("drp_estimate: VP chains need a score model");
          if (cfg.kind == ChainKind::kDdim) {
            x0 = ddim_chain(tape, *ref.score, ref.schedule, x, t, cfg.steps);
          } else {
            Matrix noise(cfg.steps - 1, n);
            for (Eigen::Index b = 0; b < n; ++b) {
              auto rng = detail::chain_rng(key, k, b);
              for (int r = 0; r + 1 < cfg.steps; ++r) noise(r, b) = rng.normal();
            }
            ChainStats stats;
            x0 = ddpm_posterior_chain(tape, *ref.score, ref.schedule, x, t, cfg.steps, noise, &stats);
            res.clamped_radicands += stats.clamped_radicands;
          }
        }
        const Matrix& end = tape.value(x0);
        Matrix seed(1, n);
        for (Eigen::Index b = 0; b < n; ++b) seed(0, b) = reward.gradient(end(0, b));
        res.endpoints.row(row) = end.row(0);
        tape.backward(x0, seed);
        res.gradients.row(row) = tape.grad(x).row(0);
        break;
      }
    }
    for (Eigen::Index b = 0; b < n; ++b) {
      if (!std::isfinite(res.endpoints(row, b)) || !std::isfinite(res.gradients(row, b))) {
        throw EstimatorFault("drp_estimate: non-finite chain output at column " + std::to_string(b), k);
      }
      res.rewards(row, b) = reward.value(res.endpoints(row, b));
    }
  }

  // Fixed chain-order reduction per column.
  res.weights.resize(cfg.chains, n);
  res.estimate.resize(n);
  res.std_error = RowVector::Zero(n);
  std::vector<double> r(k_count);
  for (Eigen::Index b = 0; b < n; ++b) {
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < k_count; ++k) top = std::max(top, res.rewards(static_cast<Eigen::Index>(k), b));
    double denom = 0.0;
    double numer = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) {
      const auto row = static_cast<Eigen::Index>(k);
      const double e = std::exp((res.rewards(row, b) - top) / cfg.tau);
      res.weights(row, b) = e;
      denom += e;
      numer += e * res.gradients(row, b);
    }
    const double est = numer / (denom * cfg.tau);
    res.estimate(b) = est;
    double spread = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) {
      const auto row = static_cast<Eigen::Index>(k);
      res.weights(row, b) /= denom;
      const double dev = res.weights(row, b) * (res.gradients(row, b) / cfg.tau - est);
      spread += dev * dev;
    }
    // Var(N / D) ~ E[e^2 (g / tau - est)^2] / (K E[e]^2), written with normalized weights.
    if (k_count > 1) res.std_error(b) = std::sqrt(spread * static_cast<double>(k_count) / static_cast<double>(k_count - 1));
  }
  return res;
}

/// Scalar convenience wrapper.
inline double drp_estimate(double x_t, double t, const DrpConfig& cfg, const RewardSpec& reward, const DrpReference& ref,
                           StreamKey key) {
  return drp_estimate(RowVector::Constant(1, x_t), RowVector::Constant(1, t), cfg, reward, ref, key).estimate(0);
}

/// First-order (classifier-guidance) approximation: (1 / tau) d E[r | x_t] / d x_t.
inline double cg_approx(const GmmSpec& g, const RewardSpec& r, const VpSchedule& s, double t, double x_t) {
  r.validate();
  s.check_time(t);
  if (t == 0.0) throw DomainError("cg_approx is undefined at t = 0");
  const auto post = posterior_mixture(g, s, t, x_t);
  return posterior_reward_expectation(post, r).second / r.tau;
}

}  // namespace didr
