#pragma once

// Globally adaptive 10/21-point Gauss-Kronrod integration. The interval with the
// largest error estimate is bisected until the summed error is within tolerance.

#include <algorithm>
#include <array>
#include <cmath>
#include <queue>
#include <vector>

#include "didr/errors.hpp"

namespace didr::quad {

struct Config {
  double abs_tol = 1e-10;
  double rel_tol = 1e-12;
  int max_intervals = 4000;
};

struct Result {
  double value = 0.0;
  double error = 0.0;
  int intervals = 0;
  bool converged = false;
};

namespace detail {

// Kronrod abscissae (descending) and weights; odd indices are the embedded Gauss nodes.
inline constexpr std::array<double, 11> kNodes = {
    0.995657163025808080735527280689003, 0.973906528517171720077964012084452,
    0.930157491355708226001207180059508, 0.865063366688984510732096688423493,
    0.780817726586416897063717578345042, 0.679409568299024406234327365114874,
    0.562757134668604683339000099272694, 0.433395394129247190799265943165784,
    0.294392862701460198131126603103866, 0.148874338981631210884826001129720,
    0.0};
inline constexpr std::array<double, 11> kKronrod = {
    0.011694638867371874278064396062192, 0.032558162307964727478818972459390,
    0.054755896574351996031381300244580, 0.075039674810919952767043140916190,
    0.093125454583697605535065465083366, 0.109387158802297641899210590325805,
    0.123491976262065851077208977110997, 0.134709217311473325928054001771707,
    0.142775938577060080797094273138717, 0.147739104901338491374841515972068,
    0.149445554002916905664936468389821};
inline constexpr std::array<double, 5> kGauss = {
    0.066671344308688137593568809893332, 0.149451349150580593145776339657697,
    0.219086362515982043995534934228163, 0.269266719309996355091226921569469,
    0.295524224714752870173892994651338};

struct Segment {
  double lo;
  double hi;
  double value;
  double error;
  bool operator<(const Segment& other) const { return error < other.error; }
};

template <typename F>
Segment rule21(F& f, double lo, double hi) {
  const double center = 0.5 * (lo + hi);
  const double half = 0.5 * (hi - lo);
  const double fc = f(center);
  double kronrod = fc * kKronrod[10];
  double gauss = 0.0;
  for (int i = 0; i < 10; ++i) {
    const double dx = half * kNodes[static_cast<std::size_t>(i)];
    const double pair = f(center - dx) + f(center + dx);
    kronrod += kKronrod[static_cast<std::size_t>(i)] * pair;
    if (i % 2 == 1) gauss += kGauss[static_cast<std::size_t>(i / 2)] * pair;
  }
  const double value = kronrod * half;
  const double error = std::abs((kronrod - gauss) * half);
  if (!std::isfinite(value)) throw QuadratureError("non-finite integrand", lo, hi);
  return {lo, hi, value, error};
}

}  // namespace detail

/// Integrates f over [lo, hi]. `breaks` (optional) are interior points where the
/// integrand is known to change character; the interval is pre-split there.
template <typename F>
Result integrate(F&& f, double lo, double hi, const Config& cfg = {}, const std::vector<double>& breaks = {}) {
  if (!(lo <= hi) || !std::isfinite(lo) || !std::isfinite(hi)) {
    throw QuadratureError("invalid integration bounds", lo, hi);
  }
  Result result;
  if (lo == hi) {
    result.converged = true;
    return result;
  }
  std::vector<double> cuts{lo};
  std::vector<double> inner;
  for (double b : breaks) {
    if (b > lo && b < hi) inner.push_back(b);
  }
  std::sort(inner.begin(), inner.end());
  for (double b : inner) {
    if (b > cuts.back()) cuts.push_back(b);
  }
  cuts.push_back(hi);

  std::priority_queue<detail::Segment> heap;
  double total = 0.0;
  double error = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    auto seg = detail::rule21(f, cuts[i], cuts[i + 1]);
    total += seg.value;
    error += seg.error;
    heap.push(seg);
  }
  while (error > std::max(cfg.abs_tol, cfg.rel_tol * std::abs(total)) &&
         static_cast<int>(heap.size()) < cfg.max_intervals) {
    const auto worst = heap.top();
    heap.pop();
    const double mid = 0.5 * (worst.lo + worst.hi);
    if (mid <= worst.lo || mid >= worst.hi) {
      heap.push(worst);
      break;
    }
    const auto left = detail::rule21(f, worst.lo, mid);
    const auto right = detail::rule21(f, mid, worst.hi);
    total += left.value + right.value - worst.value;
    error += left.error + right.error - worst.error;
    heap.push(left);
    heap.push(right);
  }
  // Re-sum to shed the drift of incremental updates.
  total = 0.0;
  error = 0.0;
  result.intervals = static_cast<int>(heap.size());
  std::vector<detail::Segment> segments;
  segments.reserve(heap.size());
  while (!heap.empty()) {
    segments.push_back(heap.top());
    heap.pop();
  }
  std::sort(segments.begin(), segments.end(),
            [](const detail::Segment& a, const detail::Segment& b) { return a.lo < b.lo; });
  for (const auto& s : segments) {
    total += s.value;
    error += s.error;
  }
  if (!std::isfinite(total)) throw QuadratureError("non-finite integral", lo, hi);
  result.value = total;
  result.error = error;
  result.converged = error <= std::max(cfg.abs_tol, cfg.rel_tol * std::abs(total));
  return result;
}

}  // namespace didr::quad
