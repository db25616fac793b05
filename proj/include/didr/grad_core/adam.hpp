#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "didr/errors.hpp"
#include "didr/grad_core/tape.hpp"

namespace didr {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<ad::Matrix> first_moment;
  std::vector<ad::Matrix> second_moment;
  std::int64_t step_count = 0;

  AdamState() = default;
  AdamState(AdamConfig cfg, const std::vector<ad::Matrix>& params) : config(cfg) {
    for (const auto& p : params) {
      first_moment.push_back(ad::Matrix::Zero(p.rows(), p.cols()));
      second_moment.push_back(ad::Matrix::Zero(p.rows(), p.cols()));
    }
  }
};

/// One bias-corrected Adam update applied in place.
inline void adam_step(AdamState& state, std::vector<ad::Matrix>& params, const std::vector<ad::Matrix>& grads) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ConfigError("adam_step: parameter/gradient/state count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].rows() != grads[i].rows() || params[i].cols() != grads[i].cols() ||
        params[i].rows() != state.first_moment[i].rows() || params[i].cols() != state.first_moment[i].cols()) {
      throw ConfigError("adam_step: shape mismatch in tensor " + std::to_string(i));
    }
    if (!grads[i].allFinite()) {
      throw TrainingFault("adam_step: non-finite gradient in tensor " + std::to_string(i), state.step_count);
    }
  }
  const AdamConfig& c = state.config;
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto m = state.first_moment[i].array();
    auto v = state.second_moment[i].array();
    const auto g = grads[i].array();
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.square();
    params[i].array() -= c.lr * (m / correction1) / ((v / correction2).sqrt() + c.eps);
  }
}

}  // namespace didr
