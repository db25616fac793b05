#pragma once

// Score and velocity fields that chains can evaluate either on a tape
// (differentiable in x) or directly.

#include <cmath>
#include <utility>

#include "didr/analytic/gmm.hpp"
#include "didr/analytic/velocity.hpp"
#include "didr/grad_core/mlp.hpp"

namespace didr {

/// Per-sample 1/sqrt(1 - alpha_bar(t)); t must be > 0.
inline RowVector inverse_noise_std(const VpSchedule& s, const RowVector& t) {
  RowVector out(t.size());
  for (Eigen::Index j = 0; j < t.size(); ++j) {
    if (!(t(j) > 0.0)) throw DomainError("score conversion needs t > 0");
    out(j) = 1.0 / s.noise_std(t(j));
  }
  return out;
}

class ScoreModel {
 public:
  virtual ~ScoreModel() = default;
  /// Score at (x, t) recorded on the tape; x is a 1 x B node.
  virtual ad::Var on_tape(ad::Tape& tape, ad::Var x, const RowVector& t) const = 0;
  virtual RowVector eval(const RowVector& x, const RowVector& t) const = 0;
};

/// Noise-prediction network; s = -eps_hat / sqrt(1 - alpha_bar).
class NetScore final : public ScoreModel {
 public:
  NetScore(const MlpNet& net, VpSchedule schedule) : net_(&net), schedule_(schedule) {}

  ad::Var on_tape(ad::Tape& tape, ad::Var x, const RowVector& t) const override {
    const ad::Var input = tape.concat_rows(x, tape.constant(t));
    const auto binding = forward(*net_, tape, input, /*param_grads=*/false);
    return tape.scale_cols(binding.output, -inverse_noise_std(schedule_, t));
  }

  RowVector eval(const RowVector& x, const RowVector& t) const override {
    Matrix input(2, x.size());
    input.row(0) = x;
    input.row(1) = t;
    const Matrix eps = didr::evaluate(*net_, input);
    return eps.row(0).cwiseProduct(-inverse_noise_std(schedule_, t));
  }

 private:
  const MlpNet* net_;
  VpSchedule schedule_;
};

/// Exact score of the forward marginal of a Gaussian mixture.
class AnalyticScore final : public ScoreModel {
 public:
  AnalyticScore(GmmSpec gmm, VpSchedule schedule) : gmm_(std::move(gmm)), schedule_(schedule) {}

  /// Score and its x-derivative at one point.
  std::pair<double, double> score_and_slope(double x, double t) const {
    const GmmSpec marg = vp_marginal(gmm_, schedule_, t);
    const auto resp = gmm_responsibilities(marg, x);
    double mean_score = 0.0;
    double mean_sq = 0.0;
    double curvature = 0.0;
    for (std::size_t i = 0; i < marg.components.size(); ++i) {
      const auto& c = marg.components[i];
      const double si = (c.mean - x) / c.variance;
      mean_score += resp[i] * si;
      mean_sq += resp[i] * si * si;
      curvature += resp[i] / c.variance;
    }
    return {mean_score, mean_sq - mean_score * mean_score - curvature};
  }

  ad::Var on_tape(ad::Tape& tape, ad::Var x, const RowVector& t) const override {
    const Matrix& xv = tape.value(x);
    Matrix value(1, xv.cols());
    Matrix slope(1, xv.cols());
    for (Eigen::Index j = 0; j < xv.cols(); ++j) {
      const auto [s, ds] = score_and_slope(xv(0, j), t(j));
      value(0, j) = s;
      slope(0, j) = ds;
    }
    return tape.pointwise(x, std::move(value), std::move(slope));
  }

  RowVector eval(const RowVector& x, const RowVector& t) const override {
    RowVector out(x.size());
    for (Eigen::Index j = 0; j < x.size(); ++j) out(j) = gmm_score(vp_marginal(gmm_, schedule_, t(j)), x(j));
    return out;
  }

 private:
  GmmSpec gmm_;
  VpSchedule schedule_;
};

class VelocityModel {
 public:
  virtual ~VelocityModel() = default;
  virtual ad::Var on_tape(ad::Tape& tape, ad::Var x, const RowVector& t) const = 0;
  virtual RowVector eval(const RowVector& x, const RowVector& t) const = 0;
};

/// v(x, t) = c everywhere.
class ConstantVelocity final : public VelocityModel {
 public:
  explicit ConstantVelocity(double c) : c_(c) {}

  ad::Var on_tape(ad::Tape& tape, ad::Var x, const RowVector&) const override {
    const Matrix& xv = tape.value(x);
    return tape.pointwise(x, Matrix::Constant(xv.rows(), xv.cols(), c_), Matrix::Zero(xv.rows(), xv.cols()));
  }

  RowVector eval(const RowVector& x, const RowVector&) const override { return RowVector::Constant(x.size(), c_); }

 private:
  double c_;
};

/// Exact rectified-flow velocity of a Gaussian mixture.
class AnalyticVelocity final : public VelocityModel {
 public:
  explicit AnalyticVelocity(GmmSpec gmm) : gmm_(std::move(gmm)) {}

  std::pair<double, double> velocity_and_slope(double x, double t) const {
    if (!(t > 0.0 && t < 1.0)) throw DomainError("analytic_velocity needs t in (0, 1)");
    const GmmSpec marg = flow_marginal(gmm_, t);
    const auto resp = gmm_responsibilities(marg, x);
    double mean = 0.0;
    double mean_score = 0.0;
    std::vector<double> comp_mean(gmm_.components.size());
    std::vector<double> comp_score(gmm_.components.size());
    double gain_avg = 0.0;
    for (std::size_t i = 0; i < gmm_.components.size(); ++i) {
      const auto& c = gmm_.components[i];
      const auto& m = marg.components[i];
      const double gain = (1.0 - t) * c.variance / m.variance;
      comp_mean[i] = c.mean + gain * (x - m.mean);
      comp_score[i] = (m.mean - x) / m.variance;
      mean += resp[i] * comp_mean[i];
      mean_score += resp[i] * comp_score[i];
      gain_avg += resp[i] * gain;
    }
    double d_mean = gain_avg;
    for (std::size_t i = 0; i < gmm_.components.size(); ++i) {
      d_mean += resp[i] * (comp_score[i] - mean_score) * comp_mean[i];
    }
    return {(x - mean) / t, (1.0 - d_mean) / t};
  }

  ad::Var on_tape(ad::Tape& tape, ad::Var x, const RowVector& t) const override {
    const Matrix& xv = tape.value(x);
    Matrix value(1, xv.cols());
    Matrix slope(1, xv.cols());
    for (Eigen::Index j = 0; j < xv.cols(); ++j) {
      const auto [v, dv] = velocity_and_slope(xv(0, j), t(j));
      value(0, j) = v;
      slope(0, j) = dv;
    }
    return tape.pointwise(x, std::move(value), std::move(slope));
  }

  RowVector eval(const RowVector& x, const RowVector& t) const override {
    RowVector out(x.size());
    for (Eigen::Index j = 0; j < x.size(); ++j) out(j) = analytic_velocity(gmm_, t(j), x(j));
    return out;
  }

 private:
  GmmSpec gmm_;
};

}  // namespace didr
