#pragma once

// Optimizers over nn::ModuleState parameter lists. Moment buffers are keyed by
// position, so the parameter order of a model must be stable across calls.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "aikd/checkpoint.hpp"
#include "aikd/nn.hpp"

namespace aikd::optim {

/// lr(epoch) = base * gamma^(number of milestones <= epoch), epochs counted from 0.
class MultiStepSchedule {
 public:
  MultiStepSchedule(double base_lr, std::vector<int> milestones, double gamma)
      : base_(base_lr), milestones_(std::move(milestones)), gamma_(gamma) {
    for (std::size_t i = 1; i < milestones_.size(); ++i)
      if (milestones_[i] <= milestones_[i - 1]) throw std::invalid_argument("lr milestones must be strictly increasing");
  }

  double at(int epoch) const {
    double lr = base_;
    for (int m : milestones_)
      if (epoch >= m) lr *= gamma_;
    return lr;
  }

 private:
  double base_;
  std::vector<int> milestones_;
  double gamma_;
};

/// SGD with (optionally Nesterov) momentum and L2 weight decay folded into the gradient.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay, bool nesterov)
      : momentum_(momentum), weight_decay_(weight_decay), nesterov_(nesterov) {}

  void step(const nn::ModuleState& state, double lr) {
    if (velocity_.empty())
      for (const auto& [name, p] : state.params) velocity_.emplace_back(p->value.shape);
    if (velocity_.size() != state.params.size()) throw std::logic_error("Sgd: parameter list changed");
    for (std::size_t k = 0; k < state.params.size(); ++k) {
      nn::Parameter& p = *state.params[k].second;
      Tensor& v = velocity_[k];
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double g = p.grad[i] + weight_decay_ * p.value[i];
        v[i] = momentum_ * v[i] + g;
        p.value[i] -= lr * (nesterov_ ? g + momentum_ * v[i] : v[i]);
      }
    }
  }

  void save_to(Checkpoint& ckpt, const std::string& prefix) const {
    for (std::size_t k = 0; k < velocity_.size(); ++k) ckpt.put(prefix + "v" + std::to_string(k), velocity_[k]);
  }
  void load_from(const Checkpoint& ckpt, const std::string& prefix, const nn::ModuleState& state) {
    velocity_.clear();
    if (!ckpt.contains(prefix + "v0")) return;
    for (std::size_t k = 0; k < state.params.size(); ++k) velocity_.push_back(ckpt.get(prefix + "v" + std::to_string(k)));
  }

 private:
  double momentum_, weight_decay_;
  bool nesterov_;
  std::vector<Tensor> velocity_;
};

class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const nn::ModuleState& state) {
    if (m_.empty())
      for (const auto& [name, p] : state.params) {
        m_.emplace_back(p->value.shape);
        v_.emplace_back(p->value.shape);
      }
    if (m_.size() != state.params.size()) throw std::logic_error("Adam: parameter list changed");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < state.params.size(); ++k) {
      nn::Parameter& p = *state.params[k].second;
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double g = p.grad[i];
        m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g;
        v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g * g;
        p.value[i] -= lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
      }
    }
  }

  long steps() const { return t_; }

  void save_to(Checkpoint& ckpt, const std::string& prefix) const {
    ckpt.put(prefix + "t", Tensor({1}, static_cast<double>(t_)));
    for (std::size_t k = 0; k < m_.size(); ++k) {
      ckpt.put(prefix + "m" + std::to_string(k), m_[k]);
      ckpt.put(prefix + "v" + std::to_string(k), v_[k]);
    }
  }
  void load_from(const Checkpoint& ckpt, const std::string& prefix, const nn::ModuleState& state) {
    m_.clear();
    v_.clear();
    t_ = static_cast<long>(ckpt.get(prefix + "t")[0]);
    if (t_ == 0) return;
    for (std::size_t k = 0; k < state.params.size(); ++k) {
      m_.push_back(ckpt.get(prefix + "m" + std::to_string(k)));
      v_.push_back(ckpt.get(prefix + "v" + std::to_string(k)));
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace aikd::optim
