#pragma once

// Text container for network parameters.
//
//   didr-mlp <version>
//   input_dim <n>
//   hidden_width <n>
//   depth <n>
//   output_dim <n>
//   activation silu|identity
//   head noise-prediction|direct-output
//   layer <index> <rows> <cols>
//   <rows*cols weight values, row-major, hexfloat>
//   <rows bias values, hexfloat>
//   ... one block per layer ...
//   end
//
// Hexfloat keeps the round trip bit-exact.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include "didr/errors.hpp"
#include "didr/grad_core/mlp.hpp"

namespace didr {

inline constexpr int kMlpFormatVersion = 1;

namespace detail {

inline std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double parse_double(const std::string& token) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(token, &used);
  } catch (const std::exception&) {
    throw ConfigError("mlp file: bad number '" + token + "'");
  }
  if (used != token.size()) throw ConfigError("mlp file: bad number '" + token + "'");
  return v;
}

template <typename T>
T expect_field(std::istream& in, const std::string& name) {
  std::string key;
  T value{};
  if (!(in >> key) || key != name || !(in >> value)) {
    throw ConfigError("mlp file: expected field '" + name + "'");
  }
  return value;
}

}  // namespace detail

inline void write_mlp(std::ostream& out, const MlpNet& net) {
  out << "didr-mlp " << kMlpFormatVersion << '\n'
      << "input_dim " << net.shape.input_dim << '\n'
      << "hidden_width " << net.shape.hidden_width << '\n'
      << "depth " << net.shape.depth << '\n'
      << "output_dim " << net.shape.output_dim << '\n'
      << "activation " << to_string(net.shape.activation) << '\n'
      << "head " << to_string(net.shape.head) << '\n';
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    const Matrix& w = net.weights[i];
    out << "layer " << i << ' ' << w.rows() << ' ' << w.cols() << '\n';
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) out << (c ? " " : "") << detail::hexfloat(w(r, c));
      out << '\n';
    }
    for (Eigen::Index r = 0; r < net.biases[i].rows(); ++r) {
      out << (r ? " " : "") << detail::hexfloat(net.biases[i](r, 0));
    }
    out << '\n';
  }
  out << "end\n";
}

inline MlpNet read_mlp(std::istream& in) {
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != "didr-mlp") throw ConfigError("mlp file: missing header");
  if (version != kMlpFormatVersion) {
    throw ConfigError("mlp file: unsupported format version " + std::to_string(version));
  }
  MlpShape s;
  s.input_dim = detail::expect_field<int>(in, "input_dim");
  s.hidden_width = detail::expect_field<int>(in, "hidden_width");
  s.depth = detail::expect_field<int>(in, "depth");
  s.output_dim = detail::expect_field<int>(in, "output_dim");
  const auto act = detail::expect_field<std::string>(in, "activation");
  if (act == "silu") {
    s.activation = Activation::kSilu;
  } else if (act == "identity") {
    s.activation = Activation::kIdentity;
  } else {
    throw ConfigError("mlp file: unknown activation '" + act + "'");
  }
  const auto head = detail::expect_field<std::string>(in, "head");
  if (head == "noise-prediction") {
    s.head = Head::kNoisePrediction;
  } else if (head == "direct-output") {
    s.head = Head::kDirectOutput;
  } else {
    throw ConfigError("mlp file: unknown head '" + head + "'");
  }
  MlpNet net = make_zero_mlp(s);
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    std::string key;
    std::size_t index = 0;
    Eigen::Index rows = 0, cols = 0;
    if (!(in >> key >> index >> rows >> cols) || key != "layer" || index != i ||
        rows != net.weights[i].rows() || cols != net.weights[i].cols()) {
      throw ConfigError("mlp file: bad layer header for layer " + std::to_string(i));
    }
    std::string token;
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        if (!(in >> token)) throw ConfigError("mlp file: truncated weights");
        net.weights[i](r, c) = detail::parse_double(token);
      }
    }
    for (Eigen::Index r = 0; r < rows; ++r) {
      if (!(in >> token)) throw ConfigError("mlp file: truncated biases");
      net.biases[i](r, 0) = detail::parse_double(token);
    }
  }
  std::string tail;
  if (!(in >> tail) || tail != "end") throw ConfigError("mlp file: missing end marker");
  return net;
}

inline void save_mlp(const std::filesystem::path& path, const MlpNet& net) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  write_mlp(out, net);
}

inline MlpNet load_mlp(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  return read_mlp(in);
}

}  // namespace didr
