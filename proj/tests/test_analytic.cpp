#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "didr/analytic/gmm.hpp"
#include "didr/analytic/quadrature.hpp"
#include "didr/analytic/tilted.hpp"
#include "didr/analytic/velocity.hpp"
#include "didr/rng.hpp"

using namespace didr;

namespace {

const GmmSpec kBimodal = GmmSpec::symmetric_bimodal(2.0, 0.5);
const VpSchedule kSchedule{20.0, 0.25};

double fd_log(const auto& f, double x, double h = 1e-4) { return (std::log(f(x + h)) - std::log(f(x - h))) / (2 * h); }

}  // namespace

// ---- quadrature ----

TEST(Quadrature, PolynomialIsExact) {
  const auto r = quad::integrate([](double x) { return x * x * x - 2 * x; }, -1.0, 3.0);
  EXPECT_NEAR(r.value, 81.0 / 4 - 1.0 / 4 - 8.0, 1e-12);
  EXPECT_TRUE(r.converged);
}

TEST(Quadrature, GaussianIntegratesToOne) {
  const auto r = quad::integrate([](double x) { return normal_pdf(x); }, -12.0, 12.0);
  EXPECT_NEAR(r.value, 1.0, 1e-13);
}

TEST(Quadrature, KinkedIntegrandWithBreakPoint) {
  const auto f = [](double x) { return std::abs(x - 0.3); };
  const auto r = quad::integrate(f, -1.0, 1.0, {}, {0.3});
  EXPECT_NEAR(r.value, 0.5 * 1.3 * 1.3 + 0.5 * 0.7 * 0.7, 1e-13);
}

TEST(Quadrature, NonFiniteIntegrandReportsInterval) {
  try {
    quad::integrate([](double x) { return 1.0 / x; }, 0.0, 1.0);
    FAIL();
  } catch (const QuadratureError& e) {
    EXPECT_LE(e.lo(), 0.0);
  }
}

TEST(Quadrature, InvalidBoundsRejected) {
  EXPECT_THROW(quad::integrate([](double) { return 1.0; }, 1.0, std::nan("")), QuadratureError);
}

// ---- mixtures and scores ----

TEST(Gmm, WeightsMustSumToOne) {
  EXPECT_THROW(GmmSpec::make({{0.5, 0.0, 1.0}, {0.4, 1.0, 1.0}}), ConfigError);
  EXPECT_THROW(GmmSpec::make({{1.0, 0.0, 0.0}}), ConfigError);
}

TEST(Gmm, StandardNormalScoreIsMinusX) {
  const auto g = GmmSpec::single(0.0, 1.0);
  for (double x : {-3.0, -0.5, 0.0, 1.25, 4.0}) EXPECT_DOUBLE_EQ(gmm_score(g, x), -x);
}

TEST(Gmm, SymmetricScoreVanishesAtZero) { EXPECT_DOUBLE_EQ(gmm_score(kBimodal, 0.0), 0.0); }

TEST(Gmm, ScoreMatchesFiniteDifferenceOfLogDensity) {
  const double h = 1e-5;
  const double fd = (gmm_log_density(kBimodal, 1.0 + h) - gmm_log_density(kBimodal, 1.0 - h)) / (2 * h);
  EXPECT_NEAR(gmm_score(kBimodal, 1.0), fd, 1e-8);
}

TEST(Gmm, LogDensityStableFarInTails) {
  const double lp = gmm_log_density(kBimodal, 60.0);
  EXPECT_TRUE(std::isfinite(lp));
  EXPECT_NEAR(lp, std::log(0.5) + gaussian_log_pdf(60.0, 2.0, 0.25), 1e-9);
  EXPECT_NEAR(gmm_score(kBimodal, 60.0), -(60.0 - 2.0) / 0.25, 1e-9);
}

TEST(Gmm, DensityIntegratesToOne) {
  const auto [lo, hi] = kBimodal.support(10.0);
  EXPECT_NEAR(quad::integrate([](double x) { return gmm_density(kBimodal, x); }, lo, hi).value, 1.0, 1e-12);
}

// ---- forward marginals ----

TEST(VpMarginal, TimeZeroIsIdentity) {
  const auto m = vp_marginal(kBimodal, kSchedule, 0.0);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(m.components[i].mean, kBimodal.components[i].mean);
    EXPECT_EQ(m.components[i].variance, kBimodal.components[i].variance);
  }
}

TEST(VpMarginal, LargeTimeApproachesStandardNormal) {
  const VpSchedule s{20.0, 10.0};
  const auto m = vp_marginal(kBimodal, s, 5.0);
  for (const auto& c : m.components) {
    EXPECT_NEAR(c.mean, 0.0, 1e-20);
    EXPECT_NEAR(c.variance, 1.0, 1e-15);
  }
}

TEST(VpMarginal, PaperParametersAtAlphaBarOneOverE) {
  const auto m = vp_marginal(kBimodal, kSchedule, 0.05);
  EXPECT_NEAR(m.components[1].mean, 2.0 * std::exp(-0.5), 1e-15);
  EXPECT_NEAR(m.components[1].variance, 0.25 * std::exp(-1.0) + 1.0 - std::exp(-1.0), 1e-15);
  EXPECT_NEAR(m.components[1].variance, kSchedule.mode_variance(0.05, 0.25), 1e-15);
  EXPECT_NEAR(m.components[1].mean, kSchedule.mode_mean(0.05, 2.0), 1e-15);
}

TEST(VpMarginal, MatchesMonteCarloHistogram) {
  const double t = 0.05;
  const auto m = vp_marginal(kBimodal, kSchedule, t);
  constexpr int kN = 1'000'000;
  CounterRng rng(StreamKey::make(1, Stage::kTest));
  const std::vector<double> edges{-3.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0};
  std::vector<int> counts(edges.size() + 1, 0);
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < kN; ++i) {
    const double x0 = (rng.uniform() < 0.5 ? -2.0 : 2.0) + 0.5 * rng.normal();
    const double xt = kSchedule.signal(t) * x0 + kSchedule.noise_std(t) * rng.normal();
    sum += xt;
    sum_sq += xt * xt;
    counts[static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), xt) - edges.begin())]++;
  }
  const auto cdf = [&](double x) {
    double c = 0.0;
    for (const auto& comp : m.components) c += comp.weight * normal_cdf((x - comp.mean) / std::sqrt(comp.variance));
    return c;
  };
  for (std::size_t b = 0; b <= edges.size(); ++b) {
    const double lo = b == 0 ? 0.0 : cdf(edges[b - 1]);
    const double hi = b == edges.size() ? 1.0 : cdf(edges[b]);
    const double p = hi - lo;
    const double se = std::sqrt(p * (1 - p) / kN);
    EXPECT_NEAR(static_cast<double>(counts[b]) / kN, p, 4 * se + 1e-12) << "bin " << b;
  }
  const double var = m.variance();
  EXPECT_NEAR(sum / kN, 0.0, 4 * std::sqrt(var / kN));
  EXPECT_NEAR(sum_sq / kN, var, 4 * std::sqrt(2.0 * var * var / kN) * 2);
}

TEST(VpMarginal, SemigroupComposition) {
  // Diffusing to t1 and then by a further alpha_bar ratio equals diffusing to t2.
  const double t1 = 0.03, t2 = 0.11;
  const auto m1 = vp_marginal(kBimodal, kSchedule, t1);
  const auto m2 = vp_marginal(kBimodal, kSchedule, t2);
  const auto again = vp_marginal(m1, kSchedule, t2 - t1);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(again.components[i].mean, m2.components[i].mean, 1e-14);
    EXPECT_NEAR(again.components[i].variance, m2.components[i].variance, 1e-14);
  }
}

TEST(VpSchedule, TimeOutOfRangeRejected) {
  EXPECT_THROW(vp_marginal(kBimodal, kSchedule, 0.3), DomainError);
  EXPECT_THROW(vp_marginal(kBimodal, kSchedule, -1e-3), DomainError);
  EXPECT_EQ(kSchedule.alpha_bar(0.0), 1.0);
}

// ---- posterior ----

TEST(Posterior, WeightsSumToOne) {
  CounterRng rng(StreamKey::make(2, Stage::kTest));
  for (int i = 0; i < 50; ++i) {
    const double t = rng.uniform(1e-4, 0.25);
    const double x = 3.0 * rng.normal();
    double total = 0.0;
    for (const auto& c : posterior_mixture(kBimodal, kSchedule, t, x).components) total += c.weight;
    EXPECT_NEAR(total, 1.0, 1e-14);
  }
}

TEST(Posterior, BayesConsistency) {
  CounterRng rng(StreamKey::make(3, Stage::kTest));
  for (int i = 0; i < 50; ++i) {
    const double t = rng.uniform(1e-3, 0.25);
    const double x_t = 2.5 * rng.normal();
    const auto post = posterior_mixture(kBimodal, kSchedule, t, x_t);
    const double x0 = post.mean() + 0.3 * rng.normal();
    const double lhs = gmm_density(kBimodal, x0) *
                       gaussian_pdf(x_t, kSchedule.signal(t) * x0, kSchedule.noise_var(t));
    const double rhs = gmm_density(vp_marginal(kBimodal, kSchedule, t), x_t) * post.density(x0);
    EXPECT_NEAR(lhs / rhs, 1.0, 1e-10);
  }
}

TEST(Posterior, SingleGaussianConjugateMean) {
  const double s2 = 0.7, t = 0.08, x = 1.3;
  const auto post = posterior_mixture(GmmSpec::single(0.0, s2), kSchedule, t, x);
  const double ab = kSchedule.alpha_bar(t);
  EXPECT_NEAR(post.mean(), std::sqrt(ab) * s2 * x / (ab * s2 + 1 - ab), 1e-15);
}

TEST(Posterior, DerivativesMatchFiniteDifferences) {
  const double t = 0.04, x = 0.35, h = 1e-6;
  const auto p = posterior_mixture(kBimodal, kSchedule, t, x);
  const auto pp = posterior_mixture(kBimodal, kSchedule, t, x + h);
  const auto pm = posterior_mixture(kBimodal, kSchedule, t, x - h);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(p.components[i].d_weight, (pp.components[i].weight - pm.components[i].weight) / (2 * h), 1e-7);
    EXPECT_NEAR(p.components[i].d_mean, (pp.components[i].mean - pm.components[i].mean) / (2 * h), 1e-7);
  }
  const double dp = (pp.positive_mass().first - pm.positive_mass().first) / (2 * h);
  EXPECT_NEAR(p.positive_mass().second, dp, 1e-6);
}

TEST(Posterior, TimeZeroRejected) { EXPECT_THROW(posterior_mixture(kBimodal, kSchedule, 0.0, 0.1), DomainError); }

// ---- tilted target ----

TEST(Tilted, ConstantRewardLeavesReference) {
  const auto r = RewardSpec::constant(3.0, 0.7);
  for (double x : {-2.0, 0.1, 1.7}) EXPECT_NEAR(tilted_density(kBimodal, r, x), gmm_density(kBimodal, x), 1e-15);
  EXPECT_NEAR(tilted_marginal(kBimodal, r, kSchedule, 0.1, 0.4),
              gmm_density(vp_marginal(kBimodal, kSchedule, 0.1), 0.4), 1e-15);
}

TEST(Tilted, HardRewardTargetMassIsSigmoidOfInverseTau) {
  const double p = tilted_positive_mass(kBimodal, RewardSpec::hard(1.0));
  const double sig = 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(p, sig, 1e-12);  // symmetric mixture: exactly sigmoid(1)
  EXPECT_NEAR(p, 0.731, 5e-4);
}

TEST(Tilted, HardPartitionMatchesQuadrature) {
  const auto r = RewardSpec::hard(0.8);
  EXPECT_NEAR(tilted_partition(kBimodal, r) / tilted_partition_quadrature(kBimodal, r), 1.0, 1e-12);
}

TEST(Tilted, SmoothTargetMassMatchesImportanceSampling) {
  const auto r = RewardSpec::smooth(20.0, 1.0);
  const double exact = tilted_positive_mass(kBimodal, r);
  constexpr int kN = 10'000'000;
  CounterRng rng(StreamKey::make(4, Stage::kTest));
  double num = 0.0, den = 0.0;
  for (int i = 0; i < kN; ++i) {
    const double x = (rng.uniform() < 0.5 ? -2.0 : 2.0) + 0.5 * rng.normal();
    const double w = r.tilt(x);
    den += w;
    if (x > 0) num += w;
  }
  EXPECT_NEAR(num / den, exact, 1e-3);
}

TEST(Tilted, DensityIntegratesToOne) {
  for (const auto& r : {RewardSpec::hard(1.0), RewardSpec::smooth(20.0, 1.0), RewardSpec::smooth(5.0, 0.3)}) {
    const double z = tilted_partition(kBimodal, r);
    const auto [lo, hi] = kBimodal.support(10.0);
    const double total =
        quad::integrate([&](double x) { return tilted_density(kBimodal, r, x, z); }, lo, hi, oracle_quad(), {0.0})
            .value;
    EXPECT_NEAR(total, 1.0, 1e-8);
  }
}

TEST(Tilted, HardMarginalClosedFormMatchesQuadrature) {
  const auto r = RewardSpec::hard(1.0);
  const double closed = tilted_marginal(kBimodal, r, kSchedule, 0.05, 0.3);
  const double numeric = tilted_marginal_quadrature(kBimodal, r, kSchedule, 0.05, 0.3);
  EXPECT_NEAR(closed / numeric, 1.0, 1e-8);
}

TEST(Tilted, SmoothMarginalPathsAgree) {
  const auto r = RewardSpec::smooth(20.0, 1.0);
  for (double x : {-1.5, 0.0, 0.4, 2.2}) {
    EXPECT_NEAR(tilted_marginal(kBimodal, r, kSchedule, 0.02, x) /
                    tilted_marginal_quadrature(kBimodal, r, kSchedule, 0.02, x),
                1.0, 1e-9);
  }
}

TEST(Tilted, LargeTauApproachesReferenceMarginal) {
  const auto r = RewardSpec::hard(1e6);
  const double q = gmm_density(vp_marginal(kBimodal, kSchedule, 0.07), 0.9);
  EXPECT_NEAR(tilted_marginal(kBimodal, r, kSchedule, 0.07, 0.9) / q, 1.0, 1e-6);
}

TEST(Tilted, RewardShiftInvariance) {
  for (const auto& [a, b] : {std::pair{RewardSpec::hard(0.9), RewardSpec::hard(0.9, 5.0)},
                             std::pair{RewardSpec::smooth(20.0, 1.0), RewardSpec::smooth(20.0, 1.0, 5.0)}}) {
    for (double x : {-0.7, 0.05, 1.9}) {
      EXPECT_NEAR(tilted_density(kBimodal, a, x), tilted_density(kBimodal, b, x), 1e-10);
      EXPECT_NEAR(tilted_marginal(kBimodal, a, kSchedule, 0.06, x), tilted_marginal(kBimodal, b, kSchedule, 0.06, x),
                  1e-10);
      EXPECT_NEAR(analytic_drs(kBimodal, a, kSchedule, 0.06, x), analytic_drs(kBimodal, b, kSchedule, 0.06, x), 1e-10);
    }
  }
}

// ---- diffused reward score ----

TEST(Drs, SaturatesForLargePositiveInput) {
  EXPECT_NEAR(analytic_drs(kBimodal, RewardSpec::hard(1.0), kSchedule, 0.05, 12.0), 0.0, 1e-10);
}

TEST(Drs, PointsTowardRewardedModeAtOrigin) {
  EXPECT_GT(analytic_drs(kBimodal, RewardSpec::hard(1.0), kSchedule, 0.05, 0.0), 0.0);
  EXPECT_GT(analytic_drs(kBimodal, RewardSpec::smooth(20.0, 1.0), kSchedule, 0.05, 0.0), 0.0);
}

TEST(Drs, HardClosedFormMatchesDefinition) {
  const auto r = RewardSpec::hard(0.6);
  const double t = 0.03, x = -0.2;
  const auto post = posterior_mixture(kBimodal, kSchedule, t, x);
  const auto [p, dp] = post.positive_mass();
  const double lift = std::exp(1.0 / 0.6) - 1.0;
  EXPECT_NEAR(analytic_drs(kBimodal, r, kSchedule, t, x), lift * dp / (1.0 + lift * p), 1e-14);
}

TEST(Drs, DecompositionAgainstFiniteDifferenceOfLogMarginal) {
  CounterRng rng(StreamKey::make(5, Stage::kTest));
  for (const auto& r : {RewardSpec::hard(1.0), RewardSpec::smooth(20.0, 1.0)}) {
    for (int i = 0; i < 20; ++i) {
      const double t = rng.uniform(0.005, 0.25);
      const double x = 2.0 * rng.normal();
      const auto log_q = [&](double y) { return tilted_marginal_quadrature(kBimodal, r, kSchedule, t, y); };
      const double lhs = fd_log(log_q, x) - gmm_score(vp_marginal(kBimodal, kSchedule, t), x);
      EXPECT_NEAR(lhs, analytic_drs(kBimodal, r, kSchedule, t, x), 1e-6) << "t=" << t << " x=" << x;
    }
  }
}

TEST(Drs, DecaysTowardHorizon) {
  const auto r = RewardSpec::hard(1.0);
  const VpSchedule long_run{20.0, 2.0};
  EXPECT_LT(std::abs(analytic_drs(kBimodal, r, long_run, 2.0, 0.5)), 1e-3 * std::abs(analytic_drs(kBimodal, r, long_run, 0.02, 0.5)));
}

TEST(Drs, EnvelopeDecaysMonotonically) {
  const auto r = RewardSpec::hard(1.0);
  double previous = std::numeric_limits<double>::infinity();
  for (int i = 1; i <= 25; ++i) {
    const double t = 0.01 * i;
    double envelope = 0.0;
    for (int j = -60; j <= 60; ++j) envelope = std::max(envelope, std::abs(analytic_drs(kBimodal, r, kSchedule, t, 0.05 * j)));
    EXPECT_LE(envelope, previous) << "t=" << t;
    previous = envelope;
  }
}

TEST(Drs, TimeZeroRejected) {
  EXPECT_THROW(analytic_drs(kBimodal, RewardSpec::hard(1.0), kSchedule, 0.0, 0.0), DomainError);
}

// ---- flow velocity ----

TEST(Velocity, StandardNormalIsLinear) {
  // x_t ~ N(0, (1-t)^2 + t^2); E[x0 | x_t] = (1-t) x_t / v, so v(x) = x (1 - (1-t)/v_t) / t.
  const auto g = GmmSpec::single(0.0, 1.0);
  for (double t : {0.1, 0.5, 0.9}) {
    const double v = (1 - t) * (1 - t) + t * t;
    for (double x : {-1.0, 0.3, 2.0}) EXPECT_NEAR(analytic_velocity(g, t, x), x * (1 - (1 - t) / v) / t, 1e-14);
  }
}

TEST(Velocity, SymmetricZeroAtOrigin) { EXPECT_DOUBLE_EQ(analytic_velocity(kBimodal, 0.4, 0.0), 0.0); }

TEST(Velocity, EndpointsRejected) {
  EXPECT_THROW(analytic_velocity(kBimodal, 0.0, 0.1), DomainError);
  EXPECT_THROW(analytic_velocity(kBimodal, 1.0, 0.1), DomainError);
}

TEST(Velocity, EulerFromNoiseRecoversMixtureMoments) {
  constexpr int kN = 20000;
  constexpr int kSteps = 200;
  CounterRng rng(StreamKey::make(6, Stage::kTest));
  double sum = 0.0, sum_sq = 0.0, positive = 0.0;
  for (int i = 0; i < kN; ++i) {
    double x = rng.normal();
    // Integrate from t = 1 - 1e-6 down to a small t, then extrapolate.
    const double t_hi = 1.0 - 1e-6, t_lo = 1e-3;
    for (int k = 0; k < kSteps; ++k) {
      const double t = t_hi + (t_lo - t_hi) * k / kSteps;
      const double tn = t_hi + (t_lo - t_hi) * (k + 1) / kSteps;
      x += (tn - t) * analytic_velocity(kBimodal, t, x);
    }
    x -= t_lo * analytic_velocity(kBimodal, t_lo, x);
    sum += x;
    sum_sq += x * x;
    positive += x > 0 ? 1 : 0;
  }
  const double mean = sum / kN;
  const double var = sum_sq / kN - mean * mean;
  EXPECT_NEAR(mean, 0.0, 4 * std::sqrt(kBimodal.variance() / kN));
  EXPECT_NEAR(var, kBimodal.variance(), 0.05 * kBimodal.variance());
  EXPECT_NEAR(positive / kN, 0.5, 0.02);
}
