#pragma once

// Central-difference verification of tape gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "clfe/tensor.hpp"

namespace clfe {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor of the relative error. Central differences carry an
  /// O(h^2) truncation error near 1e-10 at the default step, so gradients
  /// below the floor are compared in absolute terms.
  double floor = 1e-5;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose +h/-h probes fell on different sides of a kink.
  std::size_t skipped = 0;
  bool passed = true;
};

namespace detail {

struct ProbeResult {
  double value;
  std::uint64_t signature;
};

inline ProbeResult probe(const std::function<Tensor()>& loss_fn) {
  Tape::Pause no_tape;
  kink_probe = KinkProbe{};
  kink_probe.active = true;
  Tensor out = loss_fn();
  kink_probe.active = false;
  double v = 0.0;
  for (double x : out.data()) v += x;
  return {v, kink_probe.signature};
}

}  // namespace detail

/// Compares tape gradients of loss_fn with respect to every entry of params
/// against (f(x+h e_i) - f(x-h e_i)) / 2h. A non-scalar output is summed.
inline GradCheckReport grad_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                                  const GradCheckOptions& opt = {}) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    Tensor loss;
    {
      Tape::Scope scope(tape);
      loss = loss_fn();
      if (loss.numel() != 1) loss = sum(loss);
    }
    tape.backward(loss);
  }

  GradCheckReport report;
  const auto base = detail::probe(loss_fn);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    if (analytic.empty()) analytic.assign(p.numel(), 0.0);
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + opt.step;
      const auto plus = detail::probe(loss_fn);
      data[i] = saved - opt.step;
      const auto minus = detail::probe(loss_fn);
      data[i] = saved;
      if (plus.signature != minus.signature || plus.signature != base.signature) {
        ++report.skipped;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * opt.step);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error || !std::isfinite(rel)) {
        report.max_rel_error = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
        report.worst_param = pi;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= opt.tolerance;
  return report;
}

/// Single-input form: checks d f(x) / dx.
inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                  const GradCheckOptions& opt = {}) {
  std::vector<Tensor> params{x};
  return grad_check([&] { return f(params[0]); }, params, opt);
}

}  // namespace clfe
