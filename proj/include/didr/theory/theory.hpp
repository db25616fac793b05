#pragma once

// Terminal-reward domination on the symmetric bimodal alpha-family:
// collapse threshold, exact alpha-objectives by nested quadrature, a convex
// one-dimensional minimizer, and the score-form IKL gradient check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "didr/analytic/gmm.hpp"
#include "didr/analytic/quadrature.hpp"
#include "didr/analytic/tilted.hpp"
#include "didr/errors.hpp"

namespace didr::theory {

/// tau_crit = gamma (1 - s2) / (2 mu^2 (-log s2)), with s2 = sigma^2; gamma / (2 mu^2) at s2 = 1.
inline double collapse_threshold(double mu, double sigma, double gamma) {
  if (!(mu > 0.0) || !(sigma > 0.0) || !(gamma > 0.0)) {
    throw ConfigError("collapse_threshold: mu, sigma, gamma must be > 0");
  }
  const double s2 = sigma * sigma;
  if (std::abs(s2 - 1.0) < 1e-8) return gamma / (2.0 * mu * mu);
  return gamma * (1.0 - s2) / (2.0 * mu * mu * -std::log(s2));
}

/// B_crit = int_0^inf 2 m_t^2 / Sigma_t dt, integrated in u = exp(-gamma t).
inline double b_crit_quadrature(double mu, double sigma, double gamma) {
  if (!(mu >= 0.0) || !(sigma > 0.0) || !(gamma > 0.0)) {
    throw ConfigError("b_crit_quadrature: need mu >= 0, sigma > 0, gamma > 0");
  }
  const double s2 = sigma * sigma;
  const auto integrand = [&](double u) {
    const double m2 = u * mu * mu;
    const double var = 1.0 - u * (1.0 - s2);
    return 2.0 * m2 / var / (gamma * u);
  };
  const auto res = quad::integrate(integrand, 0.0, 1.0, {1e-15, 1e-13, 2000});
  if (!res.converged || !std::isfinite(res.value)) throw QuadratureError("b_crit quadrature failed", 0.0, 1.0);
  return res.value;
}

/// q_{alpha,0} = (1 - alpha) N(-mu, sigma^2) + alpha N(mu, sigma^2), diffused by a VP schedule
/// over t in [0, inf). The schedule's horizon is ignored.
struct AlphaFamily {
  double alpha = 0.5;
  GmmSpec base = GmmSpec::symmetric_bimodal(2.0, 0.5);
  VpSchedule schedule;

  static AlphaFamily make(double mu, double sigma, double gamma, double alpha = 0.5) {
    AlphaFamily f{alpha, GmmSpec::symmetric_bimodal(mu, sigma), VpSchedule{gamma, 0.25}};
    f.validate();
    return f;
  }

  void validate() const {
    base.validate();
    schedule.validate();
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha family: alpha must lie in [0, 1]");
    const auto& c = base.components;
    if (c.size() != 2 || c[0].weight != 0.5 || c[1].weight != 0.5 || c[0].mean != -c[1].mean ||
        !(c[1].mean > 0.0) || c[0].variance != c[1].variance) {
      throw ConfigError("alpha family: base must be (1/2) N(-mu, s^2) + (1/2) N(mu, s^2) with mu > 0");
    }
  }

  double mu() const { return base.components[1].mean; }
  double sigma2() const { return base.components[1].variance; }
  double gamma() const { return schedule.gamma; }

  AlphaFamily with_alpha(double a) const {
    AlphaFamily f = *this;
    f.alpha = a;
    f.validate();
    return f;
  }

  /// Schedule without a horizon, for the infinite-time integrals.
  VpSchedule unbounded() const { return {schedule.gamma, std::numeric_limits<double>::infinity()}; }

  double time_of(double u) const { return -std::log(u) / schedule.gamma; }

  GmmSpec clean() const {
    return GmmSpec::make({{1.0 - alpha, -mu(), sigma2()}, {alpha, mu(), sigma2()}});
  }

  GmmSpec marginal(double t) const { return vp_marginal(clean(), unbounded(), t); }
};

namespace detail {

/// phi_{+-,t} = N(+-m, var) at alpha_bar = u.
struct Modes {
  double m;
  double var;
};

inline Modes modes_at(const AlphaFamily& f, double u) { return {std::sqrt(u) * f.mu(), 1.0 - u * (1.0 - f.sigma2())}; }

inline double softplus(double r) { return r > 0.0 ? r + std::log1p(std::exp(-r)) : std::log1p(std::exp(r)); }

inline double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

/// log(q_alpha / p) where p is the balanced mixture, stable near alpha in {0, 1}.
inline double log_ratio_to_reference(double alpha, const Modes& md, double x) {
  const double r = 2.0 * md.m * x / md.var;
  const double arg = (2.0 * alpha - 1.0) * std::tanh(0.5 * r);
  if (arg > -0.5) return std::log1p(arg);
  const double lneg = std::log1p(-alpha) - softplus(r);
  const double lpos = std::log(alpha) - softplus(-r);
  return std::numbers::ln2 + log_add(lneg, lpos);
}

inline double mode_pdf(const Modes& md, double sign, double x) { return gaussian_pdf(x, sign * md.m, md.var); }

inline double mixture_pdf(double alpha, const Modes& md, double x) {
  return (1.0 - alpha) * mode_pdf(md, -1.0, x) + alpha * mode_pdf(md, 1.0, x);
}

inline quad::Config inner_quad() { return {1e-14, 1e-11, 4000}; }
inline quad::Config outer_quad() { return {1e-12, 1e-10, 1000}; }

/// int f(x) dx over the support of the u-marginals.
template <typename F>
double integrate_x(const AlphaFamily& fam, double u, const Modes& md, F&& f, const quad::Config& cfg,
                   std::vector<double> extra = {}) {
  const double sd = std::sqrt(md.var);
  const double lo = -md.m - 12.0 * sd;
  const double hi = md.m + 12.0 * sd;
  extra.insert(extra.end(), {-md.m, 0.0, md.m});
  const auto res = quad::integrate(f, lo, hi, cfg, extra);
  if (!res.converged || !std::isfinite(res.value)) {
    throw QuadratureError("x-quadrature failed at t = " + std::to_string(u >= 1.0 ? 0.0 : fam.time_of(u)), lo, hi);
  }
  return res.value;
}

/// int_0^inf g(t) dt as int_0^1 g(t(u)) / (gamma u) du, with g given in u.
template <typename G>
double integrate_time(const AlphaFamily& fam, G&& g, double u_lo = 0.0) {
  const auto res = quad::integrate([&](double u) { return g(u) / (fam.gamma() * u); }, u_lo, 1.0, outer_quad());
  if (!res.converged || !std::isfinite(res.value)) throw QuadratureError("time quadrature failed", u_lo, 1.0);
  return res.value;
}

/// E_{N(mean, var)}[r]
inline double component_reward(double mean, double var, const RewardSpec& r) {
  switch (r.kind) {
    case RewardKind::kConstant: return r.shift;
    case RewardKind::kHard: return normal_cdf(mean / std::sqrt(var)) + r.shift;
    case RewardKind::kSmooth: break;
  }
  const double sd = std::sqrt(var);
  const auto res = quad::integrate([&](double x) { return gaussian_pdf(x, mean, var) * r.value(x); },
                                   mean - 12.0 * sd, mean + 12.0 * sd, oracle_quad(),
                                   didr::detail::reward_breaks(r));
  return res.value;
}

/// log(E[exp(r / tau) | x_t] / Z), so that q_t* = p_t exp(this).
struct TiltFactor {
  const AlphaFamily& fam;
  RewardSpec reward;
  double log_z;

  TiltFactor(const AlphaFamily& f, const RewardSpec& r) : fam(f), reward(r), log_z(std::log(tilted_partition(f.base, r))) {}

  double operator()(double u, double x) const {
    if (reward.kind == RewardKind::kConstant) return 0.0;
    if (u >= 1.0) return reward.value(x) / reward.tau - log_z;
    const auto post = posterior_mixture(fam.base, fam.unbounded(), fam.time_of(u), x);
    return std::log(posterior_tilt_expectation(post, reward).first) - log_z;
  }
};

inline std::vector<double> tilt_breaks(const RewardSpec& r, double u) {
  return u >= 1.0 ? didr::detail::reward_breaks(r) : std::vector<double>{};
}

/// KL(q_{alpha,t} || q_t*) at alpha_bar = u.
inline double kl_to_target(const AlphaFamily& fam, const TiltFactor& tilt, double alpha, double u) {
  const Modes md = modes_at(fam, u);
  return integrate_x(
      fam, u, md,
      [&](double x) {
        const double q = mixture_pdf(alpha, md, x);
        return q == 0.0 ? 0.0 : q * (log_ratio_to_reference(alpha, md, x) - tilt(u, x));
      },
      inner_quad(), tilt_breaks(tilt.reward, u));
}

/// Largest u = 2^-k at which the time integrand g(u) has dropped below `floor`.
template <typename G>
double truncation_point(G&& g, double floor) {
  double u = 0.5;
  for (int k = 1; k < 200; ++k, u *= 0.5) {
    if (std::abs(g(u)) < floor) return u;
  }
  return 0.0;
}

}  // namespace detail

/// D_t(alpha) = KL(q_{alpha,t} || p_t), with t = -log(u) / gamma.
inline double kl_to_reference(const AlphaFamily& fam, double alpha, double u) {
  const auto md = detail::modes_at(fam, u);
  return detail::integrate_x(
      fam, u, md,
      [&](double x) {
        const double q = detail::mixture_pdf(alpha, md, x);
        return q == 0.0 ? 0.0 : q * detail::log_ratio_to_reference(alpha, md, x);
      },
      detail::inner_quad());
}

/// D_t'(alpha) = int (phi_+ - phi_-) log(q_alpha / p_t).
inline double kl_to_reference_slope(const AlphaFamily& fam, double alpha, double u) {
  const auto md = detail::modes_at(fam, u);
  return detail::integrate_x(
      fam, u, md,
      [&](double x) {
        const double w = detail::mode_pdf(md, 1.0, x) - detail::mode_pdf(md, -1.0, x);
        return w == 0.0 ? 0.0 : w * detail::log_ratio_to_reference(alpha, md, x);
      },
      detail::inner_quad());
}

/// L_term(alpha) = -E_{q_alpha,0}[1[x > 0]] + tau int_0^inf D_t(alpha) dt.
inline double l_term_alpha(double alpha, double tau, const AlphaFamily& fam) {
  fam.with_alpha(alpha);
  const double tail = normal_cdf(-fam.mu() / std::sqrt(fam.sigma2()));
  const double reward = alpha + (1.0 - 2.0 * alpha) * tail;
  return -reward + tau * detail::integrate_time(fam, [&](double u) { return kl_to_reference(fam, alpha, u); });
}

inline double l_term_slope(double alpha, double tau, const AlphaFamily& fam) {
  fam.with_alpha(alpha);
  const double tail = normal_cdf(-fam.mu() / std::sqrt(fam.sigma2()));
  return -(1.0 - 2.0 * tail) +
         tau * detail::integrate_time(fam, [&](double u) { return kl_to_reference_slope(fam, alpha, u); });
}

/// KL(q_{alpha,0} || q*) with q* = q0 exp(r / tau) / Z.
inline double kl_alpha_to_tilted(double alpha, const AlphaFamily& fam, const RewardSpec& reward) {
  fam.with_alpha(alpha);
  reward.validate();
  return detail::kl_to_target(fam, detail::TiltFactor(fam, reward), alpha, 1.0);
}

/// L_RLHF(alpha) = -E_{q_alpha,0}[r] + tau KL(q_{alpha,0} || q0). `tau` overrides reward.tau.
inline double l_rlhf_alpha(double alpha, double tau, const AlphaFamily& fam, RewardSpec reward) {
  fam.with_alpha(alpha);
  reward.tau = tau;
  reward.validate();
  const double s2 = fam.sigma2();
  const double er = (1.0 - alpha) * detail::component_reward(-fam.mu(), s2, reward) +
                    alpha * detail::component_reward(fam.mu(), s2, reward);
  return -er + tau * kl_to_reference(fam, alpha, 1.0);
}

inline double l_rlhf_slope(double alpha, double tau, const AlphaFamily& fam, RewardSpec reward) {
  fam.with_alpha(alpha);
  reward.tau = tau;
  reward.validate();
  const double s2 = fam.sigma2();
  const double der =
      detail::component_reward(fam.mu(), s2, reward) - detail::component_reward(-fam.mu(), s2, reward);
  return -der + tau * kl_to_reference_slope(fam, alpha, 1.0);
}

/// The IKL t-integrand is dropped below this value.
inline constexpr double kIklTruncation = 1e-12;

/// Time integrals of int phi_{+-,t} log(q_t* / p_t) dx for the two modes. Since q_alpha is linear in
/// alpha, KL(q_alpha,t || q_t*) = KL(q_alpha,t || p_t) - (1 - alpha) A_-(t) - alpha A_+(t), so these two
/// numbers carry all of the reward dependence of L_IKL.
struct TiltIntegrals {
  double minus = 0.0;
  double plus = 0.0;
};

inline TiltIntegrals tilt_integrals(const AlphaFamily& fam, RewardSpec reward, double tau) {
  reward.tau = tau;
  reward.validate();
  if (reward.kind == RewardKind::kConstant) return {};
  const detail::TiltFactor tilt(fam, reward);
  TiltIntegrals out;
  for (double sign : {-1.0, 1.0}) {
    const auto g = [&](double u) {
      const auto md = detail::modes_at(fam, u);
      return detail::integrate_x(
          fam, u, md,
          [&](double x) {
            const double p = detail::mode_pdf(md, sign, x);
            return p == 0.0 ? 0.0 : p * tilt(u, x);
          },
          detail::inner_quad(), detail::tilt_breaks(reward, u));
    };
    (sign < 0.0 ? out.minus : out.plus) = detail::integrate_time(fam, g, detail::truncation_point(g, kIklTruncation));
  }
  return out;
}

/// L_IKL(alpha) = int_0^inf KL(q_{alpha,t} || q_t*) dt with unit weight, given the tilt integrals.
inline double l_ikl_alpha(double alpha, const AlphaFamily& fam, const TiltIntegrals& tilt) {
  fam.with_alpha(alpha);
  const auto g = [&](double u) { return kl_to_reference(fam, alpha, u); };
  const double ref = detail::integrate_time(fam, g, detail::truncation_point(g, kIklTruncation));
  return ref - ((1.0 - alpha) * tilt.minus + alpha * tilt.plus);
}

inline double l_ikl_slope(double alpha, const AlphaFamily& fam, const TiltIntegrals& tilt) {
  fam.with_alpha(alpha);
  const auto g = [&](double u) { return kl_to_reference_slope(fam, alpha, u); };
  const double ref = detail::integrate_time(fam, g, detail::truncation_point(g, kIklTruncation));
  return ref - (tilt.plus - tilt.minus);
}

inline double l_ikl_alpha(double alpha, double tau, const AlphaFamily& fam, const RewardSpec& reward) {
  return l_ikl_alpha(alpha, fam, tilt_integrals(fam, reward, tau));
}

inline double l_ikl_slope(double alpha, double tau, const AlphaFamily& fam, const RewardSpec& reward) {
  return l_ikl_slope(alpha, fam, tilt_integrals(fam, reward, tau));
}

/// A convex objective on alpha in [0, 1] and its derivative.
struct AlphaObjective {
  std::string name;
  std::function<double(double)> value;
  std::function<double(double)> slope;
};

inline AlphaObjective term_objective(const AlphaFamily& fam, double tau) {
  return {"term", [=](double a) { return l_term_alpha(a, tau, fam); },
          [=](double a) { return l_term_slope(a, tau, fam); }};
}

inline AlphaObjective rlhf_objective(const AlphaFamily& fam, double tau, const RewardSpec& reward) {
  return {"rlhf", [=](double a) { return l_rlhf_alpha(a, tau, fam, reward); },
          [=](double a) { return l_rlhf_slope(a, tau, fam, reward); }};
}

inline AlphaObjective ikl_objective(const AlphaFamily& fam, double tau, const RewardSpec& reward) {
  const TiltIntegrals tilt = tilt_integrals(fam, reward, tau);
  return {"ikl", [=](double a) { return l_ikl_alpha(a, fam, tilt); }, [=](double a) { return l_ikl_slope(a, fam, tilt); }};
}

struct MinimizeConfig {
  double tolerance = 1e-6;     // golden-section bracket width
  int grid_points = 50;        // convexity / bracketing grid
  double convexity_tol = 1e-6; // allowed negative second difference
  int polish_iterations = 40;  // slope bisection after the golden section

  void validate() const {
    if (!(tolerance > 0.0) || grid_points < 3 || !(convexity_tol >= 0.0) || polish_iterations < 0) {
      throw ConfigError("minimize_alpha: bad configuration");
    }
  }
};

struct AlphaStar {
  double alpha = 0.0;
  bool boundary = false;
  double value = 0.0;
  std::vector<double> grid_values;
};

/// Minimizer of a convex objective on [0, 1]. Boundary minima are decided by the
/// one-sided slope and returned exactly; interior minima by golden section to
/// `tolerance`, then refined by bisection on the slope sign.
inline AlphaStar minimize_alpha(const AlphaObjective& obj, const MinimizeConfig& cfg = {}) {
  cfg.validate();
  const int n = cfg.grid_points;
  AlphaStar out;
  out.grid_values.resize(n);
  for (int i = 0; i < n; ++i) out.grid_values[i] = obj.value(static_cast<double>(i) / (n - 1));
  for (int i = 1; i + 1 < n; ++i) {
    const double d2 = out.grid_values[i - 1] - 2.0 * out.grid_values[i] + out.grid_values[i + 1];
    if (d2 < -cfg.convexity_tol) {
      throw ConvexityError(obj.name + " objective is not convex", static_cast<double>(i) / (n - 1), d2);
    }
  }
  if (obj.slope(1.0) <= 0.0) return {1.0, true, out.grid_values.back(), out.grid_values};
  if (obj.slope(0.0) >= 0.0) return {0.0, true, out.grid_values.front(), out.grid_values};

  const auto best = std::min_element(out.grid_values.begin(), out.grid_values.end()) - out.grid_values.begin();
  double lo = static_cast<double>(std::max<std::ptrdiff_t>(best - 1, 0)) / (n - 1);
  double hi = static_cast<double>(std::min<std::ptrdiff_t>(best + 1, n - 1)) / (n - 1);

  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = hi - inv_phi * (hi - lo);
  double x2 = lo + inv_phi * (hi - lo);
  double f1 = obj.value(x1);
  double f2 = obj.value(x2);
  while (hi - lo > cfg.tolerance) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - inv_phi * (hi - lo);
      f1 = obj.value(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + inv_phi * (hi - lo);
      f2 = obj.value(x2);
    }
  }
  double a = std::max(0.0, lo - cfg.tolerance);
  double b = std::min(1.0, hi + cfg.tolerance);
  if (obj.slope(a) < 0.0 && obj.slope(b) > 0.0) {
    for (int k = 0; k < cfg.polish_iterations && b - a > 0.0; ++k) {
      const double mid = 0.5 * (a + b);
      if (mid <= a || mid >= b) break;
      (obj.slope(mid) < 0.0 ? a : b) = mid;
    }
  }
  out.alpha = 0.5 * (a + b);
  out.boundary = false;
  out.value = obj.value(out.alpha);
  return out;
}

struct ThresholdRow {
  double tau;
  double alpha_star;
  bool boundary;
};

/// alpha*(tau) of L_term over the given temperatures.
inline std::vector<ThresholdRow> threshold_scan(const AlphaFamily& fam, const std::vector<double>& taus,
                                                const MinimizeConfig& cfg = {}) {
  std::vector<ThresholdRow> rows;
  rows.reserve(taus.size());
  for (double tau : taus) {
    const auto star = minimize_alpha(term_objective(fam, tau), cfg);
    rows.push_back({tau, star.alpha, star.boundary && star.alpha == 1.0});
  }
  return rows;
}

struct TransitionBracket {
  bool found = false;
  double last_collapsed = 0.0;
  double first_interior = 0.0;
};

/// Consecutive scan temperatures between which alpha* leaves the boundary at 1.
inline TransitionBracket transition_bracket(const std::vector<ThresholdRow>& rows) {
  for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
    if (rows[i].boundary && !rows[i + 1].boundary) return {true, rows[i].tau, rows[i + 1].tau};
  }
  return {};
}

struct GradientCheckRow {
  double t;
  double score_form;
  double finite_difference;
  double rel_error;
};

struct GradientCheckReport {
  std::vector<GradientCheckRow> rows;
  double max_rel_error = 0.0;
  bool coarse_grid = false;
};

/// d/dalpha KL(q_{alpha,t} || q_t*) at each t: the score form
///   int (F_- - F_+)(s_alpha - s_ref - s_r) dx
/// (the reparameterization x = F_alpha^{-1}(U) gives dx/dalpha = (F_- - F_+) / q_alpha)
/// against a central difference of the KL itself.
inline GradientCheckReport ikl_gradient_check(const AlphaFamily& fam, RewardSpec reward, double tau, double alpha,
                                              const std::vector<double>& t_grid, double h = 1e-4) {
  fam.with_alpha(alpha);
  reward.tau = tau;
  reward.validate();
  if (!(alpha - h > 0.0 && alpha + h < 1.0)) throw DomainError("ikl_gradient_check: alpha must be interior");
  if (t_grid.empty()) throw ConfigError("ikl_gradient_check: empty t grid");
  for (double t : t_grid) {
    if (!(t > 0.0) || !std::isfinite(t)) throw ConfigError("ikl_gradient_check: t must be finite and > 0");
  }
  const detail::TiltFactor tilt(fam, reward);
  const VpSchedule sched = fam.unbounded();
  const GmmSpec q_alpha = fam.with_alpha(alpha).clean();
  GradientCheckReport report;
  report.coarse_grid = t_grid.size() < 3;
  for (double t : t_grid) {
    const double u = sched.alpha_bar(t);
    const auto md = detail::modes_at(fam, u);
    const GmmSpec qt = vp_marginal(q_alpha, sched, t);
    const GmmSpec pt = vp_marginal(fam.base, sched, t);
    const double sd = std::sqrt(md.var);
    const double score_form = detail::integrate_x(
        fam, u, md,
        [&](double x) {
          const double flow = normal_cdf((x + md.m) / sd) - normal_cdf((x - md.m) / sd);
          if (flow == 0.0) return 0.0;
          const double target = gmm_score(pt, x) + analytic_drs(fam.base, reward, sched, t, x);
          return flow * (gmm_score(qt, x) - target);
        },
        detail::inner_quad());
    const double fd =
        (detail::kl_to_target(fam, tilt, alpha + h, u) - detail::kl_to_target(fam, tilt, alpha - h, u)) / (2.0 * h);
    const double rel = std::abs(score_form - fd) / std::max({std::abs(fd), std::abs(score_form), 1e-12});
    report.rows.push_back({t, score_form, fd, rel});
    report.max_rel_error = std::max(report.max_rel_error, rel);
  }
  return report;
}

/// Fraction of samples with x > 0.
inline double positive_mass(std::span<const double> samples) {
  if (samples.empty()) throw ConfigError("positive_mass: no samples");
  std::size_t n = 0;
  for (double x : samples) n += x > 0.0 ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(samples.size());
}

/// P_{q*}(x > 0) = sigmoid(1 / tau) in the well-separated limit.
inline double target_mass(double tau) {
  if (!(tau > 0.0)) throw ConfigError("target_mass: tau must be > 0");
  return ad::sigmoid(1.0 / tau);
}

struct HistogramConfig {
  int bins = 120;
  double half_width_sd = 6.0;  // grid spans the base support +- this many component sd
  double pseudo_count = 1.0;

  void validate() const {
    if (bins < 2 || !(half_width_sd > 0.0) || !(pseudo_count > 0.0)) {
      throw ConfigError("histogram: need bins >= 2, half_width_sd > 0, pseudo_count > 0");
    }
  }
};

namespace detail {

inline std::vector<double> tilted_bin_masses(const GmmSpec& g, const RewardSpec& r, double lo, double width, int bins) {
  const double z = tilted_partition(g, r);
  std::vector<double> mass(bins);
  double total = 0.0;
  for (int i = 0; i < bins; ++i) {
    const double a = lo + i * width;
    mass[i] = quad::integrate([&](double x) { return tilted_density(g, r, x, z); }, a, a + width, {1e-15, 1e-11, 200},
                              didr::detail::reward_breaks(r))
                  .value;
    total += mass[i];
  }
  for (double& m : mass) m /= total;
  return mass;
}

}  // namespace detail

/// KL(p_hat || q*) on a fixed histogram grid; samples outside the grid fall in the edge bins.
inline double kl_to_tilted(std::span<const double> samples, const GmmSpec& g, const RewardSpec& r,
                           const HistogramConfig& cfg = {}) {
  cfg.validate();
  r.validate();
  if (samples.empty()) throw ConfigError("kl_to_tilted: no samples");
  const auto [lo, hi] = g.support(cfg.half_width_sd);
  const double width = (hi - lo) / cfg.bins;
  std::vector<double> counts(cfg.bins, cfg.pseudo_count);
  for (double x : samples) {
    if (!std::isfinite(x)) throw DomainError("kl_to_tilted: non-finite sample");
    const int k = std::clamp(static_cast<int>(std::floor((x - lo) / width)), 0, cfg.bins - 1);
    counts[k] += 1.0;
  }
  const double total = static_cast<double>(samples.size()) + cfg.pseudo_count * cfg.bins;
  const auto q = detail::tilted_bin_masses(g, r, lo, width, cfg.bins);
  double kl = 0.0;
  for (int i = 0; i < cfg.bins; ++i) {
    const double p = counts[i] / total;
    kl += p * std::log(p / std::max(q[i], 1e-300));
  }
  return kl;
}

/// KL(p || q*) on the same grid for a density handle p.
inline double kl_to_tilted(const std::function<double(double)>& density, const GmmSpec& g, const RewardSpec& r,
                           const HistogramConfig& cfg = {}) {
  cfg.validate();
  r.validate();
  const auto [lo, hi] = g.support(cfg.half_width_sd);
  const double width = (hi - lo) / cfg.bins;
  std::vector<double> p(cfg.bins);
  double total = 0.0;
  for (int i = 0; i < cfg.bins; ++i) {
    const double a = lo + i * width;
    p[i] = quad::integrate(density, a, a + width, {1e-15, 1e-11, 200}).value;
    total += p[i];
  }
  if (!(total > 0.0)) throw DomainError("kl_to_tilted: density has no mass on the grid");
  const auto q = detail::tilted_bin_masses(g, r, lo, width, cfg.bins);
  double kl = 0.0;
  for (int i = 0; i < cfg.bins; ++i) {
    const double pi = p[i] / total;
    if (pi > 0.0) kl += pi * std::log(pi / std::max(q[i], 1e-300));
  }
  return kl;
}

}  // namespace didr::theory
