#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "didr/errors.hpp"
#include "didr/grad_core/tape.hpp"

namespace didr {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178032973640562;

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0); }

inline double normal_pdf(double x) { return std::exp(-0.5 * x * x - kLogSqrt2Pi); }

inline double gaussian_log_pdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * d * d / var - 0.5 * std::log(var) - kLogSqrt2Pi;
}

inline double gaussian_pdf(double x, double mean, double var) { return std::exp(gaussian_log_pdf(x, mean, var)); }

struct GaussianComponent {
  double weight = 1.0;
  double mean = 0.0;
  double variance = 1.0;
};

/// Finite 1-D Gaussian mixture.
struct GmmSpec {
  std::vector<GaussianComponent> components;

  static GmmSpec single(double mean, double variance) { return make({{1.0, mean, variance}}); }

  /// (1/2) N(-mu, sigma^2) + (1/2) N(mu, sigma^2)
  static GmmSpec symmetric_bimodal(double mu, double sigma) {
    return make({{0.5, -mu, sigma * sigma}, {0.5, mu, sigma * sigma}});
  }

  static GmmSpec make(std::vector<GaussianComponent> comps) {
    GmmSpec g{std::move(comps)};
    g.validate();
    return g;
  }

  void validate() const {
    if (components.empty()) throw ConfigError("gmm: no components");
    double total = 0.0;
    for (const auto& c : components) {
      if (!(c.variance > 0.0) || !std::isfinite(c.variance)) throw ConfigError("gmm: variance must be > 0");
      if (!(c.weight >= 0.0) || !std::isfinite(c.mean)) throw ConfigError("gmm: bad weight or mean");
      total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-12) throw ConfigError("gmm: weights sum to " + std::to_string(total));
  }

  double mean() const {
    double m = 0.0;
    for (const auto& c : components) m += c.weight * c.mean;
    return m;
  }

  double variance() const {
    const double m = mean();
    double v = 0.0;
    for (const auto& c : components) v += c.weight * (c.variance + (c.mean - m) * (c.mean - m));
    return v;
  }

  /// [min(mean - k sd), max(mean + k sd)] over components.
  std::pair<double, double> support(double k) const {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& c : components) {
      const double sd = std::sqrt(c.variance);
      lo = std::min(lo, c.mean - k * sd);
      hi = std::max(hi, c.mean + k * sd);
    }
    return {lo, hi};
  }
};

/// VP forward process with alpha_bar(t) = exp(-gamma t).
struct VpSchedule {
  double gamma = 20.0;
  double t_max = 0.25;

  void validate() const {
    if (!(gamma > 0.0)) throw ConfigError("schedule: gamma must be > 0");
    if (!(t_max > 0.0)) throw ConfigError("schedule: t_max must be > 0");
  }

  double alpha_bar(double t) const { return t == 0.0 ? 1.0 : std::exp(-gamma * t); }
  double signal(double t) const { return std::sqrt(alpha_bar(t)); }
  double noise_var(double t) const { return t == 0.0 ? 0.0 : -std::expm1(-gamma * t); }
  double noise_std(double t) const { return std::sqrt(noise_var(t)); }

  /// m_t for a mode at +mu.
  double mode_mean(double t, double mu) const { return signal(t) * mu; }
  /// Sigma_t for mode variance sigma^2.
  double mode_variance(double t, double sigma2) const { return 1.0 - alpha_bar(t) * (1.0 - sigma2); }

  void check_time(double t) const {
    if (!(t >= 0.0) || t > t_max) {
      throw DomainError("time " + std::to_string(t) + " outside [0, " + std::to_string(t_max) + "]");
    }
  }
};

enum class RewardKind { kHard, kSmooth, kConstant };

/// r(x) = 1[x > 0] + shift, sigmoid(beta x) + shift, or the constant shift;
/// tau is the tilt temperature. A negative beta gives the reflected smooth reward.
struct RewardSpec {
  RewardKind kind = RewardKind::kSmooth;
  double beta = 20.0;
  double tau = 1.0;
  double shift = 0.0;

  static RewardSpec hard(double tau, double shift = 0.0) { return {RewardKind::kHard, 0.0, tau, shift}; }
  static RewardSpec smooth(double beta, double tau, double shift = 0.0) {
    return {RewardKind::kSmooth, beta, tau, shift};
  }
  static RewardSpec constant(double value, double tau) { return {RewardKind::kConstant, 0.0, tau, value}; }

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("reward: tau must be > 0");
    if (kind == RewardKind::kSmooth && !(beta != 0.0 && std::isfinite(beta))) {
      throw ConfigError("reward: beta must be finite and nonzero");
    }
  }

  double value(double x) const {
    switch (kind) {
      case RewardKind::kHard: return (x > 0.0 ? 1.0 : 0.0) + shift;
      case RewardKind::kSmooth: return ad::sigmoid(beta * x) + shift;
      case RewardKind::kConstant: return shift;
    }
    return shift;
  }

  /// dr/dx; the hard reward is treated as flat everywhere, including at 0.
  double gradient(double x) const {
    if (kind != RewardKind::kSmooth) return 0.0;
    const double s = ad::sigmoid(beta * x);
    return beta * s * (1.0 - s);
  }

  /// exp(r / tau)
  double tilt(double x) const { return std::exp(value(x) / tau); }
};

inline double log_sum_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double gmm_log_density(const GmmSpec& g, double x) {
  std::vector<double> terms;
  terms.reserve(g.components.size());
  for (const auto& c : g.components) {
    terms.push_back(std::log(c.weight) + gaussian_log_pdf(x, c.mean, c.variance));
  }
  return log_sum_exp(terms);
}

inline double gmm_density(const GmmSpec& g, double x) { return std::exp(gmm_log_density(g, x)); }

/// Component responsibilities at x.
inline std::vector<double> gmm_responsibilities(const GmmSpec& g, double x) {
  std::vector<double> terms;
  terms.reserve(g.components.size());
  for (const auto& c : g.components) {
    terms.push_back(std::log(c.weight) + gaussian_log_pdf(x, c.mean, c.variance));
  }
  const double lse = log_sum_exp(terms);
  for (double& t : terms) t = std::exp(t - lse);
  return terms;
}

inline double gmm_score(const GmmSpec& g, double x) {
  const auto resp = gmm_responsibilities(g, x);
  double s = 0.0;
  for (std::size_t i = 0; i < g.components.size(); ++i) {
    const auto& c = g.components[i];
    s += resp[i] * (c.mean - x) / c.variance;
  }
  return s;
}

/// Forward marginal q_t: means scaled by sqrt(alpha_bar), variances alpha_bar var + 1 - alpha_bar.
inline GmmSpec vp_marginal(const GmmSpec& g, const VpSchedule& s, double t) {
  s.check_time(t);
  const double ab = s.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double nv = s.noise_var(t);
  GmmSpec out = g;
  for (auto& c : out.components) {
    c.mean *= a;
    c.variance = ab * c.variance + nv;
  }
  return out;
}

struct PosteriorComponent {
  double weight;       // responsibility given x_t
  double mean;         // E[x0 | x_t, component]
  double variance;     // Var[x0 | x_t, component]
  double d_weight;     // d weight / d x_t
  double d_mean;       // d mean / d x_t
};

/// Exact q(x0 | x_t) for a Gaussian-mixture q0 under the VP kernel.
struct PosteriorMixture {
  std::vector<PosteriorComponent> components;

  double mean() const {
    double m = 0.0;
    for (const auto& c : components) m += c.weight * c.mean;
    return m;
  }

  double density(double x0) const {
    double p = 0.0;
    for (const auto& c : components) p += c.weight * gaussian_pdf(x0, c.mean, c.variance);
    return p;
  }

  /// P(x0 > 0 | x_t) and its derivative in x_t.
  std::pair<double, double> positive_mass() const {
    double p = 0.0;
    double dp = 0.0;
    for (const auto& c : components) {
      const double sd = std::sqrt(c.variance);
      const double z = c.mean / sd;
      p += c.weight * normal_cdf(z);
      dp += c.d_weight * normal_cdf(z) + c.weight * normal_pdf(z) * c.d_mean / sd;
    }
    return {p, dp};
  }
};

inline PosteriorMixture posterior_mixture(const GmmSpec& g, const VpSchedule& s, double t, double x_t) {
  s.check_time(t);
  if (t == 0.0) throw DomainError("posterior at t = 0 is a point mass at x_t");
  const double ab = s.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double nv = s.noise_var(t);
  const std::size_t n = g.components.size();

  std::vector<double> log_terms(n);
  std::vector<double> comp_score(n);
  PosteriorMixture post;
  post.components.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& c = g.components[i];
    const double marg_var = ab * c.variance + nv;
    const double resid = x_t - a * c.mean;
    log_terms[i] = std::log(c.weight) + gaussian_log_pdf(x_t, a * c.mean, marg_var);
    comp_score[i] = -resid / marg_var;
    auto& pc = post.components[i];
    pc.mean = c.mean + a * c.variance * resid / marg_var;
    pc.variance = c.variance * nv / marg_var;
    pc.d_mean = a * c.variance / marg_var;
  }
  const double lse = log_sum_exp(log_terms);
  double mean_score = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    post.components[i].weight = std::exp(log_terms[i] - lse);
    mean_score += post.components[i].weight * comp_score[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    post.components[i].d_weight = post.components[i].weight * (comp_score[i] - mean_score);
  }
  return post;
}

}  // namespace didr
