#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "didr/rng.hpp"
#include "didr/theory/theory.hpp"

using namespace didr;
using namespace didr::theory;

namespace {

AlphaFamily paper_family() { return AlphaFamily::make(2.0, 0.5, 20.0); }

double tau_crit_paper() { return collapse_threshold(2.0, 0.5, 20.0); }

// KL(q_alpha,t || p_t) by a plain trapezoid rule on direct densities.
double brute_kl(double mu, double s2, double u, double alpha) {
  const double m = std::sqrt(u) * mu;
  const double v = 1.0 - u * (1.0 - s2);
  const double sd = std::sqrt(v);
  const int n = 400000;
  const double lo = -m - 14 * sd, hi = m + 14 * sd, h = (hi - lo) / n;
  double acc = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double x = lo + i * h;
    const double pm = std::exp(-0.5 * (x + m) * (x + m) / v) / std::sqrt(2 * std::numbers::pi * v);
    const double pp = std::exp(-0.5 * (x - m) * (x - m) / v) / std::sqrt(2 * std::numbers::pi * v);
    const double q = (1 - alpha) * pm + alpha * pp;
    const double p = 0.5 * (pm + pp);
    const double f = q > 0 ? q * std::log(q / p) : 0.0;
    acc += (i == 0 || i == n ? 0.5 : 1.0) * f;
  }
  return acc * h;
}

std::vector<double> mixture_samples(const GmmSpec& g, int n, std::uint64_t seed) {
  CounterRng rng(StreamKey::make(seed, Stage::kTest));
  std::vector<double> out(n);
  for (double& x : out) {
    const double u = rng.uniform();
    double acc = 0.0;
    const GaussianComponent* pick = &g.components.back();
    for (const auto& c : g.components) {
      acc += c.weight;
      if (u < acc) {
        pick = &c;
        break;
      }
    }
    x = pick->mean + std::sqrt(pick->variance) * rng.normal();
  }
  return out;
}

}  // namespace

TEST(CollapseThreshold, PaperParameters) {
  EXPECT_NEAR(tau_crit_paper(), 15.0 / (8.0 * std::log(4.0)), 1e-14);
  EXPECT_NEAR(tau_crit_paper(), 1.3525, 1e-4);
}

TEST(CollapseThreshold, UnitVarianceLimit) {
  EXPECT_DOUBLE_EQ(collapse_threshold(2.0, 1.0, 20.0), 2.5);
  // Just outside the switchover window the closed form is continuous with the limit.
  EXPECT_NEAR(collapse_threshold(2.0, std::sqrt(1.0 + 1e-6), 20.0), 2.5, 1e-5);
  EXPECT_NEAR(collapse_threshold(2.0, std::sqrt(1.0 - 1e-6), 20.0), 2.5, 1e-5);
}

TEST(CollapseThreshold, LinearInGamma) {
  EXPECT_NEAR(collapse_threshold(2.0, 0.5, 40.0), 2.0 * tau_crit_paper(), 1e-13);
}

TEST(CollapseThreshold, RejectsNonPositiveInputs) {
  EXPECT_THROW(collapse_threshold(0.0, 0.5, 20.0), ConfigError);
  EXPECT_THROW(collapse_threshold(2.0, -0.5, 20.0), ConfigError);
  EXPECT_THROW(collapse_threshold(2.0, 0.5, 0.0), ConfigError);
}

TEST(CollapseThreshold, QuadratureOracleOverGrid) {
  for (double mu : {0.5, 1.0, 2.0, 3.0, 4.0}) {
    for (double sigma : {0.2, 0.5, 0.9, 1.0, 1.5}) {
      for (double gamma : {5.0, 20.0, 50.0}) {
        const double prod = collapse_threshold(mu, sigma, gamma) * b_crit_quadrature(mu, sigma, gamma);
        EXPECT_NEAR(prod, 1.0, 1e-6) << mu << " " << sigma << " " << gamma;
      }
    }
  }
}

TEST(BCrit, Examples) {
  EXPECT_NEAR(b_crit_quadrature(2.0, 0.5, 20.0), 0.739357, 1e-6);
  EXPECT_EQ(b_crit_quadrature(0.0, 0.5, 20.0), 0.0);
  EXPECT_NEAR(b_crit_quadrature(2.0, 1.0, 20.0), 2.0 * 4.0 / 20.0, 1e-12);
}

TEST(AlphaFamily, RejectsAsymmetricBase) {
  AlphaFamily f = paper_family();
  f.base.components[0].mean = -1.0;
  EXPECT_THROW(f.validate(), ConfigError);
  EXPECT_THROW(paper_family().with_alpha(1.5), ConfigError);
}

TEST(LTerm, BalancedMixtureHasOnlyRewardTerm) {
  for (double tau : {0.3, 1.0, 5.0}) EXPECT_NEAR(l_term_alpha(0.5, tau, paper_family()), -0.5, 1e-14);
}

TEST(LTerm, KlMatchesBruteForce) {
  const auto fam = paper_family();
  for (double u : {1.0, 0.6, 0.1}) {
    for (double alpha : {0.0, 0.3, 0.9, 1.0}) {
      EXPECT_NEAR(kl_to_reference(fam, alpha, u), brute_kl(2.0, 0.25, u, alpha), 1e-9) << u << " " << alpha;
    }
  }
}

TEST(LTerm, SlopeMatchesFiniteDifference) {
  const auto fam = paper_family();
  const double h = 1e-5;
  for (double alpha : {0.2, 0.5, 0.8, 0.97}) {
    const double fd = (l_term_alpha(alpha + h, 1.3, fam) - l_term_alpha(alpha - h, 1.3, fam)) / (2 * h);
    EXPECT_NEAR(l_term_slope(alpha, 1.3, fam), fd, 1e-6) << alpha;
  }
}

TEST(LTerm, EndpointSlopeMatchesWellSeparatedForm) {
  const auto fam = paper_family();
  for (double t : {0.05, 0.1, 0.15}) {
    const double u = std::exp(-20.0 * t);
    const double m2 = 4.0 * u;
    const double var = 1.0 - 0.75 * u;
    const double h = 1e-7;
    const double fd = (kl_to_reference(fam, 1.0, u) - kl_to_reference(fam, 1.0 - h, u)) / h;
    EXPECT_LT(std::abs(fd / (2 * m2 / var) - 1.0), 0.01) << t;
    // The log-ratio at alpha = 1 is exactly 2 m x / Sigma, so the endpoint slope is exact.
    EXPECT_NEAR(kl_to_reference_slope(fam, 1.0, u), 2 * m2 / var, 1e-9) << t;
  }
}

TEST(LTerm, TransitionAtExactThreshold) {
  // L'(1) = -(1 - 2 Phi(-mu/sigma)) + tau B_crit vanishes at tau = (1 - 2 Phi(-4)) tau_crit.
  const double tau = (1.0 - 2.0 * normal_cdf(-4.0)) * tau_crit_paper();
  EXPECT_NEAR(l_term_slope(1.0, tau, paper_family()), 0.0, 1e-8);
}

TEST(LTerm, IsConvex) {
  for (double tau : {0.5, 1.0, 2.0}) {
    const auto obj = term_objective(paper_family(), tau);
    std::vector<double> f(50);
    for (int i = 0; i < 50; ++i) f[i] = obj.value(i / 49.0);
    for (int i = 1; i < 49; ++i) EXPECT_GE(f[i - 1] - 2 * f[i] + f[i + 1], -1e-6) << tau << " " << i;
  }
}

TEST(MinimizeAlpha, CollapsesBelowThreshold) {
  const auto star = minimize_alpha(term_objective(paper_family(), 1.0));
  EXPECT_GE(star.alpha, 0.999);
  EXPECT_TRUE(star.boundary);
  EXPECT_EQ(star.alpha, 1.0);
}

TEST(MinimizeAlpha, InteriorAboveThreshold) {
  const auto fam = paper_family();
  const auto star = minimize_alpha(term_objective(fam, 2.0));
  EXPECT_FALSE(star.boundary);
  EXPECT_GT(star.alpha, 0.5);
  EXPECT_LT(star.alpha, 1.0);
  EXPECT_NEAR(l_term_slope(star.alpha, 2.0, fam), 0.0, 1e-6);
}

TEST(MinimizeAlpha, RlhfTendsToBalancedAtHighTemperature) {
  const auto star = minimize_alpha(rlhf_objective(paper_family(), 1e4, RewardSpec::hard(1.0)));
  EXPECT_NEAR(star.alpha, 0.5, 1e-3);
}

TEST(MinimizeAlpha, BoundaryAtZeroIsExact) {
  const AlphaObjective obj{"quad", [](double a) { return a * a + a; }, [](double a) { return 2 * a + 1; }};
  const auto star = minimize_alpha(obj);
  EXPECT_EQ(star.alpha, 0.0);
  EXPECT_TRUE(star.boundary);
}

TEST(MinimizeAlpha, InteriorQuadratic) {
  const AlphaObjective obj{"quad", [](double a) { return (a - 0.3137) * (a - 0.3137); },
                           [](double a) { return 2 * (a - 0.3137); }};
  EXPECT_NEAR(minimize_alpha(obj).alpha, 0.3137, 1e-9);
}

TEST(MinimizeAlpha, NonConvexObjectiveAborts) {
  const AlphaObjective obj{"concave", [](double a) { return -(a - 0.5) * (a - 0.5); },
                           [](double a) { return -2 * (a - 0.5); }};
  try {
    minimize_alpha(obj);
    FAIL() << "expected a convexity error";
  } catch (const ConvexityError& e) {
    EXPECT_LT(e.second_difference(), 0.0);
  }
}

TEST(Rlhf, TiltedKlIdentity) {
  const auto fam = paper_family();
  for (const auto& reward : {RewardSpec::hard(1.0), RewardSpec::smooth(20.0, 1.0)}) {
    for (double tau : {0.5, 2.0}) {
      RewardSpec r = reward;
      r.tau = tau;
      const double expected = -tau * std::log(tilted_partition(fam.base, r));
      for (int k = 1; k <= 9; ++k) {
        const double a = 0.1 * k;
        const double lhs = l_rlhf_alpha(a, tau, fam, reward) - tau * kl_alpha_to_tilted(a, fam, r);
        EXPECT_NEAR(lhs, expected, 1e-8) << tau << " " << a;
      }
    }
  }
}

TEST(Rlhf, SlopeMatchesFiniteDifference) {
  const auto fam = paper_family();
  const auto r = RewardSpec::smooth(20.0, 1.0);
  const double h = 1e-5;
  for (double a : {0.3, 0.7}) {
    const double fd = (l_rlhf_alpha(a + h, 1.0, fam, r) - l_rlhf_alpha(a - h, 1.0, fam, r)) / (2 * h);
    EXPECT_NEAR(l_rlhf_slope(a, 1.0, fam, r), fd, 1e-6);
  }
}

TEST(Ikl, SlopeMatchesFiniteDifference) {
  const auto fam = paper_family();
  const auto r = RewardSpec::hard(1.0);
  const double h = 1e-4;
  const double a = 0.65;
  const double fd = (l_ikl_alpha(a + h, 1.0, fam, r) - l_ikl_alpha(a - h, 1.0, fam, r)) / (2 * h);
  EXPECT_NEAR(l_ikl_slope(a, 1.0, fam, r), fd, 1e-6);
}

TEST(Ikl, ConstantRewardReducesToReferenceIkl) {
  const auto fam = paper_family();
  const double ikl = l_ikl_alpha(0.8, 1.0, fam, RewardSpec::constant(0.3, 1.0));
  const double term = l_term_alpha(0.8, 1.0, fam) + (0.8 + (1 - 1.6) * normal_cdf(-4.0));
  EXPECT_NEAR(ikl, term, 1e-9);
}

TEST(Ikl, SharesRlhfMinimizer) {
  const auto fam = paper_family();
  const auto r = RewardSpec::hard(1.0);
  for (double tau : {0.5, 1.0, 2.0}) {
    const double a = minimize_alpha(rlhf_objective(fam, tau, r)).alpha;
    const double b = minimize_alpha(ikl_objective(fam, tau, r)).alpha;
    EXPECT_NEAR(a, b, 1e-4) << tau;
    // Both sit near the tilted positive mass.
    EXPECT_NEAR(a, target_mass(tau), 1e-3);
  }
}

TEST(ThresholdScan, BracketsClosedFormAndIsMonotone) {
  const auto fam = paper_family();
  const double tc = tau_crit_paper();
  std::vector<double> taus;
  for (int i = 0; i <= 20; ++i) taus.push_back(tc * (0.8 + 0.02 * i + 0.005));
  const auto rows = threshold_scan(fam, taus);
  EXPECT_TRUE(rows.front().boundary);
  EXPECT_FALSE(rows.back().boundary);
  const auto b = transition_bracket(rows);
  ASSERT_TRUE(b.found);
  EXPECT_LE(b.last_collapsed, tc);
  EXPECT_GE(b.first_interior, tc);
  EXPECT_LE(b.first_interior - b.last_collapsed, 0.2 * tc);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LE(rows[i].alpha_star, rows[i - 1].alpha_star);
}

TEST(GradientCheck, SmoothRewardAgrees) {
  const auto rep = ikl_gradient_check(paper_family(), RewardSpec::smooth(20.0, 1.0), 1.0, 0.7,
                                      {0.005, 0.02, 0.05, 0.1, 0.25, 0.5});
  EXPECT_FALSE(rep.coarse_grid);
  EXPECT_LT(rep.max_rel_error, 1e-3);
  for (const auto& row : rep.rows) EXPECT_TRUE(std::isfinite(row.score_form));
}

TEST(GradientCheck, HardRewardAgrees) {
  const auto rep =
      ikl_gradient_check(paper_family(), RewardSpec::hard(1.0), 0.7, 0.4, {0.01, 0.05, 0.2});
  EXPECT_LT(rep.max_rel_error, 1e-3);
}

TEST(GradientCheck, ConstantRewardIsPlainIklDerivative) {
  const auto fam = paper_family();
  const std::vector<double> ts{0.01, 0.1, 0.3};
  const auto rep = ikl_gradient_check(fam, RewardSpec::constant(0.4, 1.0), 1.0, 0.7, ts);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const double u = std::exp(-20.0 * ts[i]);
    EXPECT_NEAR(rep.rows[i].score_form, kl_to_reference_slope(fam, 0.7, u), 1e-8);
  }
}

TEST(GradientCheck, ReflectedRewardFlipsSign) {
  const auto fam = paper_family();
  const std::vector<double> ts{0.02, 0.1};
  const auto a = ikl_gradient_check(fam, RewardSpec::smooth(20.0, 1.0), 1.0, 0.5, ts);
  const auto b = ikl_gradient_check(fam, RewardSpec::smooth(-20.0, 1.0), 1.0, 0.5, ts);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    EXPECT_NEAR(a.rows[i].score_form, -b.rows[i].score_form, 1e-9);
    EXPECT_LT(a.rows[i].score_form, 0.0);
  }
}

TEST(GradientCheck, BadGridsFlaggedOrRejected) {
  const auto fam = paper_family();
  const auto r = RewardSpec::hard(1.0);
  EXPECT_TRUE(ikl_gradient_check(fam, r, 1.0, 0.6, {0.1}).coarse_grid);
  EXPECT_THROW(ikl_gradient_check(fam, r, 1.0, 0.6, {}), ConfigError);
  EXPECT_THROW(ikl_gradient_check(fam, r, 1.0, 0.6, {0.0}), ConfigError);
  EXPECT_THROW(ikl_gradient_check(fam, r, 1.0, 1.0, {0.1}), DomainError);
}

TEST(Masses, Examples) {
  EXPECT_NEAR(target_mass(1.0), 0.73106, 1e-5);
  EXPECT_NEAR(target_mass(1.0), 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_GT(target_mass(1e-3), 1.0 - 1e-12);
  const std::vector<double> neg{-1.0, -0.1, -3.0};
  EXPECT_EQ(positive_mass(neg), 0.0);
  const std::vector<double> mixed{-1.0, 0.0, 2.0, 3.0};
  EXPECT_EQ(positive_mass(mixed), 0.5);
  EXPECT_THROW(positive_mass(std::vector<double>{}), ConfigError);
}

TEST(KlToTilted, ResampledTargetIsClose) {
  const auto g = GmmSpec::symmetric_bimodal(2.0, 0.5);
  const auto r = RewardSpec::hard(1.0);
  // Importance resampling: q0 draws reweighted by exp(r / tau), systematic resampling.
  const int n = 100000;
  const auto pool = mixture_samples(g, 4 * n, 21);
  std::vector<double> cum(pool.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < pool.size(); ++i) cum[i] = (acc += r.tilt(pool[i]));
  std::vector<double> out;
  out.reserve(n);
  std::size_t j = 0;
  for (int k = 0; k < n; ++k) {
    const double target = (k + 0.5) / n * acc;
    while (cum[j] < target) ++j;
    out.push_back(pool[j]);
  }
  EXPECT_LT(kl_to_tilted(out, g, r), 0.02);
}

TEST(KlToTilted, FarPointMassIsLargeButFinite) {
  const auto g = GmmSpec::symmetric_bimodal(2.0, 0.5);
  const std::vector<double> far(1000, 100.0);
  const double kl = kl_to_tilted(far, g, RewardSpec::hard(1.0));
  EXPECT_TRUE(std::isfinite(kl));
  EXPECT_GT(kl, 5.0);
}

TEST(KlToTilted, ReferenceSamplesAtHighTemperature) {
  const auto g = GmmSpec::symmetric_bimodal(2.0, 0.5);
  EXPECT_LT(kl_to_tilted(mixture_samples(g, 100000, 5), g, RewardSpec::hard(1e6)), 2e-3);
}

TEST(KlToTilted, DensityHandleOfTargetIsZero) {
  const auto g = GmmSpec::symmetric_bimodal(2.0, 0.5);
  const auto r = RewardSpec::smooth(20.0, 1.0);
  const double z = tilted_partition(g, r);
  const double kl = kl_to_tilted([&](double x) { return tilted_density(g, r, x, z); }, g, r);
  EXPECT_NEAR(kl, 0.0, 1e-10);
}

TEST(KlToTilted, BadGridRejected) {
  const auto g = GmmSpec::symmetric_bimodal(2.0, 0.5);
  HistogramConfig cfg;
  cfg.bins = 1;
  EXPECT_THROW(kl_to_tilted(std::vector<double>{0.0}, g, RewardSpec::hard(1.0), cfg), ConfigError);
  EXPECT_THROW(kl_to_tilted(std::vector<double>{}, g, RewardSpec::hard(1.0)), ConfigError);
}
