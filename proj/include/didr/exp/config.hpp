#pragma once

// Experiment configuration: a flat `key = value` text format with strict parsing.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "didr/align/pipeline.hpp"

namespace didr::exp {

inline constexpr int kFormatVersion = 1;

enum class Kind : std::uint8_t {
  kThresholdScan,
  kAlphaSweep,
  kTrainRef,
  kDistill,
  kAlign,
  kValidateDrs,
  kValidateGrad,
  kFullToy,
};

inline constexpr std::pair<Kind, std::string_view> kKindNames[] = {
    {Kind::kThresholdScan, "threshold-scan"}, {Kind::kAlphaSweep, "alpha-sweep"},
    {Kind::kTrainRef, "train-ref"},           {Kind::kDistill, "distill"},
    {Kind::kAlign, "align"},                  {Kind::kValidateDrs, "validate-drs"},
    {Kind::kValidateGrad, "validate-grad"},   {Kind::kFullToy, "full-toy"},
};

inline std::string_view to_string(Kind k) {
  for (const auto& [kind, name] : kKindNames) {
    if (kind == k) return name;
  }
  return "unknown";
}

inline Kind kind_from_string(std::string_view s) {
  for (const auto& [kind, name] : kKindNames) {
    if (name == s) return kind;
  }
  throw ConfigError("unknown experiment kind '" + std::string(s) + "'");
}

struct ScanConfig {
  double tau_min = 1.0;
  double tau_max = 2.0;
  int points = 41;
};

struct SweepConfig {
  double tau = 1.0;
  int points = 21;
};

/// DRP consistency check at one (t, x_t): chain counts 10^2 .. max_chains.
struct DrsCheckConfig {
  double t = 0.01;
  double x = 0.1;
  ChainKind kind = ChainKind::kExactPosterior;
  int max_chains = 100000;
  int replicates = 30;
};

/// Gradient check over alphas x t-grids.
struct GradCheckConfig {
  int alphas = 5;
  double alpha_min = 0.55;
  double alpha_max = 0.95;
  int grids = 4;
  double h = 1e-4;
};

struct ExperimentConfig {
  Kind kind = Kind::kFullToy;
  std::string preset = "paper";
  align::PipelineConfig pipeline;
  std::string checkpoint_dir;  // empty: the output directory
  ScanConfig scan;
  SweepConfig sweep;
  DrsCheckConfig drs;
  GradCheckConfig grad;

  void validate() const;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

/// Shortest round-trip text for a double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_number(const std::string& key, const std::string& text) {
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size() || !std::isfinite(v)) {
    throw ConfigError(key + ": expected a finite number, got '" + text + "'");
  }
  return v;
}

template <typename Int>
Int parse_integer(const std::string& key, const std::string& text) {
  Int v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
    throw ConfigError(key + ": expected an integer, got '" + text + "'");
  }
  return v;
}

struct Field {
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

inline Field number(std::string key, double& slot) {
  return {key, [key, &slot](const std::string& v) { slot = parse_number(key, v); },
          [&slot] { return format_double(slot); }};
}

template <typename Int>
Field integer(std::string key, Int& slot) {
  return {key, [key, &slot](const std::string& v) { slot = parse_integer<Int>(key, v); },
          [&slot] { return std::to_string(slot); }};
}

inline Field text(std::string key, std::string& slot) {
  return {key, [&slot](const std::string& v) { slot = v; }, [&slot] { return slot; }};
}

inline RewardKind reward_kind_from_string(const std::string& key, const std::string& v) {
  if (v == "hard") return RewardKind::kHard;
  if (v == "smooth") return RewardKind::kSmooth;
  if (v == "constant") return RewardKind::kConstant;
  throw ConfigError(key + ": expected hard, smooth or constant, got '" + v + "'");
}

inline std::string_view to_string(RewardKind k) {
  return k == RewardKind::kHard ? "hard" : k == RewardKind::kSmooth ? "smooth" : "constant";
}

inline ChainKind chain_kind(const std::string& key, const std::string& v) {
  try {
    return chain_kind_from_string(v);
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

/// Every settable key, in the order the resolved config is echoed.
inline std::vector<Field> fields(ExperimentConfig& c) {
  auto& p = c.pipeline;
  std::vector<Field> f;
  f.push_back(integer("seed", p.seed));
  f.push_back({"method", [&p](const std::string& v) { p.method = align::method_from_string(v); },
               [&p] { return std::string(align::to_string(p.method)); }});
  f.push_back(number("mu", p.mu));
  f.push_back(number("sigma", p.sigma));
  f.push_back(number("gamma", p.schedule.gamma));
  f.push_back(number("T", p.schedule.t_max));
  f.push_back(number("t_floor", p.t_floor));
  f.push_back({"reward", [&p](const std::string& v) { p.reward.kind = reward_kind_from_string("reward", v); },
               [&p] { return std::string(to_string(p.reward.kind)); }});
  f.push_back(number("beta", p.reward.beta));
  f.push_back(number("reward_shift", p.reward.shift));
  f.push_back({"tau", [&p](const std::string& v) { p.set_tau(parse_number("tau", v)); },
               [&p] { return format_double(p.tau()); }});
  f.push_back(integer("drp.chains", p.drp.chains));
  f.push_back(integer("drp.steps", p.drp.steps));
  f.push_back({"drp.kind", [&p](const std::string& v) { p.drp.kind = chain_kind("drp.kind", v); },
               [&p] { return std::string(didr::to_string(p.drp.kind)); }});
  f.push_back(integer("width", p.width));
  f.push_back(integer("depth", p.depth));
  f.push_back(integer("reference.steps", p.reference.steps));
  f.push_back(number("reference.lr", p.reference.lr));
  f.push_back(integer("reference.batch", p.reference.batch));
  f.push_back(integer("distill.steps", p.distill.steps));
  f.push_back(number("distill.lr", p.distill.lr));
  f.push_back(integer("distill.batch", p.distill.batch));
  f.push_back(integer("ddim_steps", p.ddim_steps));
  f.push_back(integer("distill_pool", p.distill_pool));
  f.push_back(integer("outer_steps", p.outer_steps));
  f.push_back(integer("ta_rounds", p.ta_rounds));
  f.push_back(number("ta.lr", p.ta_lr));
  f.push_back(integer("ta.batch", p.ta_batch));
  f.push_back(number("gen.lr", p.gen_lr));
  f.push_back(integer("gen.batch", p.gen_batch));
  f.push_back(integer("log_every", p.log_every));
  f.push_back(integer("log_samples", p.log_samples));
  f.push_back(integer("eval_samples", p.eval_samples));
  f.push_back(text("checkpoint_dir", c.checkpoint_dir));
  f.push_back(number("scan.tau_min", c.scan.tau_min));
  f.push_back(number("scan.tau_max", c.scan.tau_max));
  f.push_back(integer("scan.points", c.scan.points));
  f.push_back(number("sweep.tau", c.sweep.tau));
  f.push_back(integer("sweep.points", c.sweep.points));
  f.push_back(number("drs.t", c.drs.t));
  f.push_back(number("drs.x", c.drs.x));
  f.push_back({"drs.kind", [&c](const std::string& v) { c.drs.kind = chain_kind("drs.kind", v); },
               [&c] { return std::string(didr::to_string(c.drs.kind)); }});
  f.push_back(integer("drs.max_chains", c.drs.max_chains));
  f.push_back(integer("drs.replicates", c.drs.replicates));
  f.push_back(integer("grad.alphas", c.grad.alphas));
  f.push_back(number("grad.alpha_min", c.grad.alpha_min));
  f.push_back(number("grad.alpha_max", c.grad.alpha_max));
  f.push_back(integer("grad.grids", c.grad.grids));
  f.push_back(number("grad.h", c.grad.h));
  return f;
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  pipeline.validate();
  if (!(scan.tau_min > 0.0) || !(scan.tau_max > scan.tau_min)) throw ConfigError("scan: need 0 < tau_min < tau_max");
  if (scan.points < 2) throw ConfigError("scan.points must be >= 2");
  if (!(sweep.tau > 0.0)) throw ConfigError("sweep.tau must be > 0");
  if (sweep.points < 3) throw ConfigError("sweep.points must be >= 3");
  if (!(drs.t > 0.0) || drs.t > pipeline.schedule.t_max) throw ConfigError("drs.t must lie in (0, T]");
  if (drs.max_chains < 100) throw ConfigError("drs.max_chains must be >= 100");
  if (drs.replicates < 2) throw ConfigError("drs.replicates must be >= 2");
  if (drs.kind == ChainKind::kEulerFlow) throw ConfigError("drs.kind: euler-flow is not available for this check");
  if (grad.alphas < 1 || grad.grids < 1) throw ConfigError("grad.alphas and grad.grids must be >= 1");
  if (!(grad.h > 0.0)) throw ConfigError("grad.h must be > 0");
  if (!(grad.alpha_min - grad.h > 0.0) || !(grad.alpha_max + grad.h < 1.0) || grad.alpha_min > grad.alpha_max) {
    throw ConfigError("grad: need h < alpha_min <= alpha_max < 1 - h");
  }
}

/// One `key = value` assignment with where it came from, for diagnostics.
struct Assignment {
  std::string key;
  std::string value;
  std::string origin;
};

/// Reads assignments; blank lines and lines starting with '#' are skipped.
inline std::vector<Assignment> parse_assignments(std::istream& in, const std::string& origin) {
  std::vector<Assignment> out;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string body = detail::trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    const std::string where = origin + ":" + std::to_string(number);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value', got '" + body + "'");
    Assignment a{detail::trim(body.substr(0, eq)), detail::trim(body.substr(eq + 1)), where};
    if (a.key.empty()) throw ConfigError(where + ": missing key");
    out.push_back(std::move(a));
  }
  return out;
}

inline std::vector<Assignment> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  return parse_assignments(in, path.string());
}

/// `key=value` from the command line.
inline Assignment parse_override(const std::string& text) {
  std::istringstream in(text);
  auto parsed = parse_assignments(in, "--set");
  if (parsed.size() != 1) throw ConfigError("--set: expected key=value, got '" + text + "'");
  return parsed.front();
}

/// Applies `preset` first (paper or reduced), then the remaining keys in order.
inline ExperimentConfig resolve(Kind kind, const std::vector<Assignment>& assignments) {
  ExperimentConfig c;
  c.kind = kind;
  for (const auto& a : assignments) {
    if (a.key != "preset") continue;
    if (a.value != "paper" && a.value != "reduced") {
      throw ConfigError(a.origin + ": preset: expected paper or reduced, got '" + a.value + "'");
    }
    c.preset = a.value;
  }
  if (c.preset == "reduced") c.pipeline = align::PipelineConfig::reduced();
  auto table = detail::fields(c);
  for (const auto& a : assignments) {
    if (a.key == "preset") continue;
    auto it = std::find_if(table.begin(), table.end(), [&](const detail::Field& f) { return f.key == a.key; });
    if (it == table.end()) throw ConfigError(a.origin + ": unknown key '" + a.key + "'");
    try {
      it->set(a.value);
    } catch (const ConfigError& e) {
      throw ConfigError(a.origin + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

/// Fully resolved config in the input format, preceded by the kind and format stamp.
inline std::string resolved_text(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  std::ostringstream out;
  out << "# didr experiment config, format " << kFormatVersion << "\n";
  out << "# kind " << to_string(c.kind) << "\n";
  out << "preset = " << c.preset << "\n";
  for (const auto& f : detail::fields(c)) out << f.key << " = " << f.get() << "\n";
  return out.str();
}

/// FNV-1a of the resolved text.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : resolved_text(c)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace didr::exp
