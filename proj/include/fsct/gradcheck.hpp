#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "fsct/tensor.hpp"

namespace fsct {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t probes = 0;
  std::string worst;  // human-readable location of the worst probe
};

/// Compares reverse-mode gradients of `loss_fn` against central finite
/// differences. `loss_fn` must rebuild the graph from the given parameters on
/// every call. Probes every element when `max_probes_per_param` is 0.
inline GradCheckReport gradient_check(
    const std::vector<std::pair<std::string, Tensor>>& params,
    const std::function<Tensor()>& loss_fn, double h = 1e-5,
    std::size_t max_probes_per_param = 0, Rng* probe_rng = nullptr) {
  GradCheckReport report;

  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, p] : params) analytic.push_back(p.grad());

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor& p = params[pi].second;
    std::vector<std::size_t> probe_idx;
    if (max_probes_per_param == 0 || p.size() <= max_probes_per_param) {
      probe_idx.resize(p.size());
      for (std::size_t i = 0; i < p.size(); ++i) probe_idx[i] = i;
    } else if (probe_rng != nullptr) {
      probe_idx = probe_rng->choose(p.size(), max_probes_per_param);
    } else {
      const std::size_t stride = p.size() / max_probes_per_param;
      for (std::size_t i = 0; i < max_probes_per_param; ++i) probe_idx.push_back(i * stride);
    }
    for (std::size_t i : probe_idx) {
      double& slot = const_cast<Tensor&>(p).data()[i];
      const double saved = slot;
      slot = saved + h;
      const double up = loss_fn().value();
      slot = saved - h;
      const double down = loss_fn().value();
      slot = saved;
      const double fd = (up - down) / (2.0 * h);
      const double ad = analytic[pi][i];
      const double denom = std::max({1e-6, std::abs(ad), std::abs(fd)});
      const double rel = std::abs(ad - fd) / denom;
      ++report.probes;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = params[pi].first + "[" + std::to_string(i) + "] ad=" +
                       std::to_string(ad) + " fd=" + std::to_string(fd);
      }
    }
  }
  return report;
}

}  // namespace fsct
