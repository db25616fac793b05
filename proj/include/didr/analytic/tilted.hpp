#pragma once

// Reward-tilted target q* = q0 exp(r / tau) / Z, its forward-diffused marginals,
// and the diffused reward score s_r = d/dx_t log E[exp(r / tau) | x_t].

#include <cmath>
#include <utility>
#include <vector>

#include "didr/analytic/gmm.hpp"
#include "didr/analytic/quadrature.hpp"

namespace didr {

/// Tolerances tight enough for finite differences of log densities.
inline quad::Config oracle_quad() { return {1e-14, 1e-13, 8000}; }

namespace detail {

inline std::vector<double> reward_breaks(const RewardSpec& r) {
  if (r.kind == RewardKind::kHard) return {0.0};
  if (r.kind == RewardKind::kSmooth) {
    const double w = 4.0 / std::abs(r.beta);
    return {-w, 0.0, w};
  }
  return {};
}

inline std::pair<double, double> integration_range(const GmmSpec& g) { return g.support(10.0); }

}  // namespace detail

/// Z by quadrature, whatever the reward kind.
inline double tilted_partition_quadrature(const GmmSpec& g, const RewardSpec& r, const quad::Config& cfg = oracle_quad()) {
  r.validate();
  const auto [lo, hi] = detail::integration_range(g);
  return quad::integrate([&](double x) { return gmm_density(g, x) * r.tilt(x); }, lo, hi, cfg,
                         detail::reward_breaks(r))
      .value;
}

/// Z = int q0 exp(r / tau). Closed form for hard and constant rewards.
inline double tilted_partition(const GmmSpec& g, const RewardSpec& r) {
  r.validate();
  switch (r.kind) {
    case RewardKind::kConstant: return std::exp(r.shift / r.tau);
    case RewardKind::kHard: {
      double positive = 0.0;
      for (const auto& c : g.components) positive += c.weight * normal_cdf(c.mean / std::sqrt(c.variance));
      return std::exp(r.shift / r.tau) * ((1.0 - positive) + std::exp(1.0 / r.tau) * positive);
    }
    case RewardKind::kSmooth: break;
  }
  return tilted_partition_quadrature(g, r);
}

inline double tilted_density(const GmmSpec& g, const RewardSpec& r, double x0, double partition) {
  return gmm_density(g, x0) * r.tilt(x0) / partition;
}

inline double tilted_density(const GmmSpec& g, const RewardSpec& r, double x0) {
  return tilted_density(g, r, x0, tilted_partition(g, r));
}

/// P_{q*}(x0 > 0). Closed form for hard rewards.
inline double tilted_positive_mass(const GmmSpec& g, const RewardSpec& r) {
  if (r.kind == RewardKind::kHard || r.kind == RewardKind::kConstant) {
    double positive = 0.0;
    for (const auto& c : g.components) positive += c.weight * normal_cdf(c.mean / std::sqrt(c.variance));
    const double boost = r.kind == RewardKind::kHard ? std::exp(1.0 / r.tau) : 1.0;
    return boost * positive / ((1.0 - positive) + boost * positive);
  }
  const double z = tilted_partition(g, r);
  const double hi = std::max(detail::integration_range(g).second, 1.0);
  const double upper = quad::integrate([&](double x) { return gmm_density(g, x) * r.tilt(x); }, 0.0, hi,
                                       oracle_quad(), detail::reward_breaks(r))
                           .value;
  return upper / z;
}

/// E[exp(r / tau) | x_t] under the posterior and its x_t-derivative.
inline std::pair<double, double> posterior_tilt_expectation(const PosteriorMixture& post, const RewardSpec& r,
                                                            const quad::Config& cfg = oracle_quad()) {
  switch (r.kind) {
    case RewardKind::kConstant: return {std::exp(r.shift / r.tau), 0.0};
    case RewardKind::kHard: {
      const auto [p, dp] = post.positive_mass();
      const double base = std::exp(r.shift / r.tau);
      const double lift = std::exp(1.0 / r.tau) - 1.0;
      return {base * (1.0 + lift * p), base * lift * dp};
    }
    case RewardKind::kSmooth: break;
  }
  double value = 0.0;
  double deriv = 0.0;
  const auto breaks = detail::reward_breaks(r);
  for (const auto& c : post.components) {
    const double sd = std::sqrt(c.variance);
    const double lo = c.mean - 12.0 * sd;
    const double hi = c.mean + 12.0 * sd;
    std::vector<double> cuts = breaks;
    cuts.push_back(c.mean);
    const double g0 =
        quad::integrate([&](double y) { return gaussian_pdf(y, c.mean, c.variance) * r.tilt(y); }, lo, hi, cfg, cuts)
            .value;
    // d/dm of int N(y; m, v) e^{r/tau} dy
    const double g1 = quad::integrate(
                          [&](double y) {
                            return (y - c.mean) / c.variance * gaussian_pdf(y, c.mean, c.variance) * r.tilt(y);
                          },
                          lo, hi, cfg, cuts)
                          .value;
    value += c.weight * g0;
    deriv += c.d_weight * g0 + c.weight * c.d_mean * g1;
  }
  return {value, deriv};
}

/// E[r(x0) | x_t] and its x_t-derivative.
inline std::pair<double, double> posterior_reward_expectation(const PosteriorMixture& post, const RewardSpec& r,
                                                              const quad::Config& cfg = oracle_quad()) {
  switch (r.kind) {
    case RewardKind::kConstant: return {r.shift, 0.0};
    case RewardKind::kHard: {
      const auto [p, dp] = post.positive_mass();
      return {p + r.shift, dp};
    }
    case RewardKind::kSmooth: break;
  }
  double value = r.shift;
  double deriv = 0.0;
  const auto breaks = detail::reward_breaks(r);
  for (const auto& c : post.components) {
    const double sd = std::sqrt(c.variance);
    const double lo = c.mean - 12.0 * sd;
    const double hi = c.mean + 12.0 * sd;
    std::vector<double> cuts = breaks;
    cuts.push_back(c.mean);
    const auto base = [&](double y) { return r.value(y) - r.shift; };
    const double g0 =
        quad::integrate([&](double y) { return gaussian_pdf(y, c.mean, c.variance) * base(y); }, lo, hi, cfg, cuts)
            .value;
    const double g1 = quad::integrate(
                          [&](double y) { return gaussian_pdf(y, c.mean, c.variance) * r.gradient(y); }, lo, hi,
                          cfg, cuts)
                          .value;
    value += c.weight * g0;
    deriv += c.d_weight * g0 + c.weight * c.d_mean * g1;
  }
  return {value, deriv};
}

/// q_t*(x_t) by quadrature over x0, for any reward kind.
inline double tilted_marginal_quadrature(const GmmSpec& g, const RewardSpec& r, const VpSchedule& s, double t,
                                         double x_t, double partition,
                                         const quad::Config& cfg = oracle_quad()) {
  s.check_time(t);
  if (t == 0.0) throw DomainError("tilted_marginal needs t > 0");
  const double a = s.signal(t);
  const double nv = s.noise_var(t);
  auto [lo, hi] = detail::integration_range(g);
  std::vector<double> cuts = detail::reward_breaks(r);
  // Kernel N(x_t; a x0, nv) peaks at x0 = x_t / a with width sqrt(nv) / a.
  const double centre = x_t / a;
  const double width = std::sqrt(nv) / a;
  for (double k : {-8.0, -2.0, 0.0, 2.0, 8.0}) cuts.push_back(centre + k * width);
  const double mass = quad::integrate(
                          [&](double x0) { return gaussian_pdf(x_t, a * x0, nv) * gmm_density(g, x0) * r.tilt(x0); },
                          lo, hi, cfg, cuts)
                          .value;
  return mass / partition;
}

inline double tilted_marginal_quadrature(const GmmSpec& g, const RewardSpec& r, const VpSchedule& s, double t,
                                         double x_t) {
  return tilted_marginal_quadrature(g, r, s, t, x_t, tilted_partition(g, r));
}

/// q_t*(x_t) = q_t(x_t) E[exp(r/tau) | x_t] / Z. Closed form for hard and
/// constant rewards; posterior quadrature for smooth rewards.
inline double tilted_marginal(const GmmSpec& g, const RewardSpec& r, const VpSchedule& s, double t, double x_t) {
  s.check_time(t);
  if (t == 0.0) throw DomainError("tilted_marginal needs t > 0");
  const double qt = gmm_density(vp_marginal(g, s, t), x_t);
  const auto post = posterior_mixture(g, s, t, x_t);
  const auto [e, de] = posterior_tilt_expectation(post, r);
  (void)de;
  return qt * e / tilted_partition(g, r);
}

/// Diffused reward score s_r(x_t, t).
inline double analytic_drs(const GmmSpec& g, const RewardSpec& r, const VpSchedule& s, double t, double x_t) {
  r.validate();
  s.check_time(t);
  if (t == 0.0) throw DomainError("analytic_drs is undefined at t = 0");
  const auto post = posterior_mixture(g, s, t, x_t);
  const auto [e, de] = posterior_tilt_expectation(post, r);
  return de / e;
}

/// Score of the diffused tilted target: s_ref + s_r.
inline double tilted_score(const GmmSpec& g, const RewardSpec& r, const VpSchedule& s, double t, double x_t) {
  return gmm_score(vp_marginal(g, s, t), x_t) + analytic_drs(g, r, s, t, x_t);
}

}  // namespace didr
