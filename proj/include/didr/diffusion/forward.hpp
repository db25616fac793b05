#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "didr/analytic/gmm.hpp"
#include "didr/grad_core/mlp.hpp"
#include "didr/diffusion/models.hpp"

namespace didr {

/// x_t = sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) noise.
inline double forward_sample(double x0, const VpSchedule& s, double t, double noise) {
  s.check_time(t);
  return s.signal(t) * x0 + s.noise_std(t) * noise;
}

inline RowVector forward_sample(const RowVector& x0, const VpSchedule& s, const RowVector& t, const RowVector& noise) {
  RowVector out(x0.size());
  for (Eigen::Index j = 0; j < x0.size(); ++j) out(j) = forward_sample(x0(j), s, t(j), noise(j));
  return out;
}

/// s = -eps_hat / sqrt(1 - alpha_bar(t)).
inline double score_from_eps(double eps_prediction, double t, const VpSchedule& s) {
  if (!(t > 0.0)) throw DomainError("score_from_eps needs t > 0");
  return -eps_prediction / s.noise_std(t);
}

/// Inverse of score_from_eps.
inline double eps_from_score(double score, double t, const VpSchedule& s) {
  if (!(t > 0.0)) throw DomainError("eps_from_score needs t > 0");
  return -score * s.noise_std(t);
}

using TimeWeight = std::function<double(double)>;

inline TimeWeight unit_weight() {
  return [](double) { return 1.0; };
}

struct DsmBatch {
  RowVector x0;
  RowVector t;
  RowVector noise;
};

struct DsmResult {
  double loss = 0.0;
  std::vector<Matrix> grads;  // parameter order of MlpNet::parameters()
};

/// mean_b lambda(t_b) (s(x_t, t_b) + noise_b / sqrt(1 - alpha_bar(t_b)))^2 and its parameter gradient.
inline DsmResult dsm_loss(const MlpNet& net, const VpSchedule& s, const DsmBatch& batch,
                          const TimeWeight& lambda = unit_weight(), bool with_grads = true) {
  const auto n = batch.x0.size();
  if (n == 0) throw ConfigError("dsm_loss: empty batch");
  if (batch.t.size() != n || batch.noise.size() != n) throw ConfigError("dsm_loss: batch size mismatch");
  if (net.shape.input_dim != 2) throw ConfigError("dsm_loss: score network must take (x, t)");

  const RowVector x_t = forward_sample(batch.x0, s, batch.t, batch.noise);
  const RowVector inv_std = inverse_noise_std(s, batch.t);
  RowVector weights(n);
  for (Eigen::Index j = 0; j < n; ++j) weights(j) = lambda(batch.t(j)) / static_cast<double>(n);

  ad::Tape tape;
  Matrix input(2, n);
  input.row(0) = x_t;
  input.row(1) = batch.t;
  const auto binding = forward(net, tape, tape.constant(std::move(input)), with_grads);
  const ad::Var score = tape.scale_cols(binding.output, -inv_std);
  const ad::Var residual = tape.add_const(score, batch.noise.cwiseProduct(inv_std));
  const ad::Var loss = tape.sum(tape.scale_cols(tape.square(residual), weights));

  DsmResult result;
  result.loss = tape.scalar(loss);
  if (!std::isfinite(result.loss)) throw TrainingFault("dsm_loss: non-finite loss", -1);
  if (with_grads) {
    tape.backward(loss);
    result.grads = binding.gradients(tape);
  }
  return result;
}

}  // namespace didr
