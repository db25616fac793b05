#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "didr/errors.hpp"
#include "didr/grad_core/tape.hpp"
#include "didr/rng.hpp"

namespace didr {

using ad::Matrix;
using ad::RowVector;

enum class Activation : std::uint8_t { kSilu, kIdentity };

/// What the scalar output means. Score nets predict noise; generators emit samples.
enum class Head : std::uint8_t { kNoisePrediction, kDirectOutput };

inline std::string_view to_string(Activation a) { return a == Activation::kSilu ? "silu" : "identity"; }
inline std::string_view to_string(Head h) {
  return h == Head::kNoisePrediction ? "noise-prediction" : "direct-output";
}

struct MlpShape {
  int input_dim = 2;
  int hidden_width = 128;
  int depth = 3;  // hidden layers
  int output_dim = 1;
  Activation activation = Activation::kSilu;
  Head head = Head::kNoisePrediction;

  bool operator==(const MlpShape&) const = default;
};

/// Fully connected network. Layer i maps rows of layer i-1 to rows of layer i;
/// the activation follows every layer except the last.
struct MlpNet {
  MlpShape shape;
  std::vector<Matrix> weights;
  std::vector<Matrix> biases;  // column vectors

  std::size_t layer_count() const noexcept { return weights.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) n += weights[i].size() + biases[i].size();
    return n;
  }

  /// All parameter matrices in (W0, b0, W1, b1, ...) order.
  std::vector<Matrix> parameters() const {
    std::vector<Matrix> out;
    out.reserve(2 * weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.push_back(weights[i]);
      out.push_back(biases[i]);
    }
    return out;
  }

  void set_parameters(const std::vector<Matrix>& params) {
    if (params.size() != 2 * weights.size()) throw ConfigError("set_parameters: wrong parameter count");
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (params[2 * i].rows() != weights[i].rows() || params[2 * i].cols() != weights[i].cols() ||
          params[2 * i + 1].rows() != biases[i].rows()) {
        throw ConfigError("set_parameters: shape mismatch at layer " + std::to_string(i));
      }
      weights[i] = params[2 * i];
      biases[i] = params[2 * i + 1];
    }
  }

  bool operator==(const MlpNet& other) const {
    if (!(shape == other.shape) || weights.size() != other.weights.size()) return false;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] != other.weights[i] || biases[i] != other.biases[i]) return false;
    }
    return true;
  }
};

inline void validate(const MlpShape& s) {
  if (s.input_dim < 1 || s.output_dim < 1 || s.depth < 0 || (s.depth > 0 && s.hidden_width < 1)) {
    throw ConfigError("mlp: invalid shape (input " + std::to_string(s.input_dim) + ", width " +
                      std::to_string(s.hidden_width) + ", depth " + std::to_string(s.depth) + ")");
  }
}

/// Zero-filled network of the given shape.
inline MlpNet make_zero_mlp(const MlpShape& s) {
  validate(s);
  MlpNet net;
  net.shape = s;
  int fan_in = s.input_dim;
  for (int layer = 0; layer <= s.depth; ++layer) {
    const int fan_out = layer == s.depth ? s.output_dim : s.hidden_width;
    net.weights.push_back(Matrix::Zero(fan_out, fan_in));
    net.biases.push_back(Matrix::Zero(fan_out, 1));
    fan_in = fan_out;
  }
  return net;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
inline MlpNet make_mlp(const MlpShape& s, StreamKey key) {
  MlpNet net = make_zero_mlp(s);
  CounterRng rng(key);
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(net.weights[i].cols()));
    for (Eigen::Index c = 0; c < net.weights[i].cols(); ++c) {
      for (Eigen::Index r = 0; r < net.weights[i].rows(); ++r) net.weights[i](r, c) = rng.uniform(-bound, bound);
    }
    for (Eigen::Index r = 0; r < net.biases[i].rows(); ++r) net.biases[i](r, 0) = rng.uniform(-bound, bound);
  }
  return net;
}

/// Network parameters registered on a tape plus the output node.
struct MlpBinding {
  ad::Var output;
  std::vector<ad::Var> params;  // (W0, b0, W1, b1, ...)

  std::vector<Matrix> gradients(const ad::Tape& tape) const {
    std::vector<Matrix> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(tape.grad(p));
    return out;
  }
};

/// Records the network on `tape`. `input` has input_dim rows and one column per sample.
inline MlpBinding forward(const MlpNet& net, ad::Tape& tape, ad::Var input, bool param_grads = true) {
  if (tape.value(input).rows() != net.shape.input_dim) {
    throw ConfigError("forward: input has " + std::to_string(tape.value(input).rows()) +
                      " rows, network expects " + std::to_string(net.shape.input_dim));
  }
  MlpBinding binding;
  ad::Var h = input;
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    const ad::Var w = tape.leaf(net.weights[i], param_grads);
    const ad::Var b = tape.leaf(net.biases[i], param_grads);
    binding.params.push_back(w);
    binding.params.push_back(b);
    h = tape.affine(w, b, h);
    if (i + 1 < net.weights.size() && net.shape.activation == Activation::kSilu) h = tape.silu(h);
  }
  binding.output = h;
  return binding;
}

/// Tape-free evaluation, used for sampling and evaluation passes.
inline Matrix evaluate(const MlpNet& net, const Matrix& input) {
  if (input.rows() != net.shape.input_dim) {
    throw ConfigError("evaluate: input has " + std::to_string(input.rows()) + " rows, network expects " +
                      std::to_string(net.shape.input_dim));
  }
  Matrix h = input;
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    Matrix next = net.weights[i] * h;
    next.colwise() += net.biases[i].col(0);
    if (i + 1 < net.weights.size() && net.shape.activation == Activation::kSilu) {
      next = ad::silu_value(next);
    }
    h = std::move(next);
  }
  return h;
}

/// FNV-1a over the raw parameter bytes; used to assert frozen networks stay frozen.
inline std::uint64_t parameter_hash(const MlpNet& net) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto feed = [&h](const Matrix& m) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    feed(net.weights[i]);
    feed(net.biases[i]);
  }
  return h;
}

}  // namespace didr
