#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fsct/model.hpp"
#include "fsct/tensor.hpp"

namespace fsct {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

/// Adam with decoupled weight decay. Moment buffers are created on attach in
/// the model's parameter order and persist across steps (and checkpoints).
class AdamW {
 public:
  explicit AdamW(const AdamWConfig& cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::size_t step_count() const { return step_; }
  void set_step_count(std::size_t s) { step_ = s; }

  void attach(ModelState& state) {
    names_.clear();
    moment1_.clear();
    moment2_.clear();
    state.for_each_param([this](const std::string& name, Tensor& p) {
      names_.push_back(name);
      moment1_.push_back(Tensor::zeros(p.shape()));
      moment2_.push_back(Tensor::zeros(p.shape()));
    });
  }

  bool attached() const { return !names_.empty(); }

  /// One update from the gradients currently stored on the parameters.
  void step(ModelState& state) {
    if (!attached()) throw std::logic_error("AdamW::step: attach a model first");
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    std::size_t i = 0;
    state.for_each_param([&](const std::string& name, Tensor& p) {
      if (i >= names_.size() || names_[i] != name)
        throw std::logic_error("AdamW::step: parameter list changed since attach at '" + name +
                               "'");
      const std::vector<double>& g = p.grad();
      std::vector<double>& m = moment1_[i].data();
      std::vector<double>& v = moment2_[i].data();
      std::vector<double>& w = p.data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        w[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[j]);
      }
      ++i;
    });
  }

  /// Moment buffers under stable names, for persistence.
  void for_each_moment(const std::function<void(const std::string&, Tensor&)>& fn) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      fn("adamw.m." + names_[i], moment1_[i]);
      fn("adamw.v." + names_[i], moment2_[i]);
    }
  }

 private:
  AdamWConfig cfg_;
  std::size_t step_ = 0;
  std::vector<std::string> names_;
  std::vector<Tensor> moment1_;
  std::vector<Tensor> moment2_;
};

}  // namespace fsct
