#pragma once

// Rectified-flow quantities under x_t = (1 - t) x0 + t eps.

#include <cmath>

#include "didr/analytic/gmm.hpp"

namespace didr {

/// Marginal of x_t under linear interpolation: means (1 - t) mean_i, variances (1 - t)^2 var_i + t^2.
inline GmmSpec flow_marginal(const GmmSpec& g, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("flow time must lie in [0, 1]");
  GmmSpec out = g;
  for (auto& c : out.components) {
    c.mean *= (1.0 - t);
    c.variance = (1.0 - t) * (1.0 - t) * c.variance + t * t;
  }
  return out;
}

/// E[x0 | x_t] under the interpolation marginal.
inline double flow_posterior_mean(const GmmSpec& g, double t, double x_t) {
  const GmmSpec marg = flow_marginal(g, t);
  const auto resp = gmm_responsibilities(marg, x_t);
  double m = 0.0;
  for (std::size_t i = 0; i < g.components.size(); ++i) {
    const auto& c = g.components[i];
    const double gain = (1.0 - t) * c.variance / marg.components[i].variance;
    m += resp[i] * (c.mean + gain * (x_t - (1.0 - t) * c.mean));
  }
  return m;
}

/// v*(x_t, t) = E[eps - x0 | x_t] = (x_t - E[x0 | x_t]) / t.
inline double analytic_velocity(const GmmSpec& g, double t, double x_t) {
  if (!(t > 0.0 && t < 1.0)) throw DomainError("analytic_velocity needs t in (0, 1)");
  return (x_t - flow_posterior_mean(g, t, x_t)) / t;
}

}  // namespace didr
