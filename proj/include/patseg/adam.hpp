#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "patseg/tensor.hpp"

namespace patseg {

template <typename T>
struct AdamConfigT {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

using AdamConfig = AdamConfigT<float>;

// Adam with bias correction. One optimizer owns the moment buffers for a
// fixed parameter list; step() consumes the gradients currently stored on
// the parameters and then leaves them untouched (callers zero them).
template <typename T>
class AdamT {
 public:
  AdamT(std::vector<TensorT<T>> params, AdamConfigT<T> config = {})
      : params_(std::move(params)), config_(config) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  void step() {
    ++t_;
    const T bc1 = T(1) - std::pow(config_.beta1, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(config_.beta2, static_cast<T>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      const auto& g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      T* w = p.data();
      for (std::size_t j = 0; j < g.size(); ++j) {
        m[j] = config_.beta1 * m[j] + (T(1) - config_.beta1) * g[j];
        v[j] = config_.beta2 * v[j] + (T(1) - config_.beta2) * g[j] * g[j];
        const T mhat = m[j] / bc1;
        const T vhat = v[j] / bc2;
        w[j] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void set_lr(T lr) { config_.lr = lr; }

  std::int64_t step_count() const { return t_; }
  const std::vector<TensorT<T>>& params() const { return params_; }
  const AdamConfigT<T>& config() const { return config_; }

 private:
  std::vector<TensorT<T>> params_;
  AdamConfigT<T> config_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::int64_t t_ = 0;
};

using Adam = AdamT<float>;

}  // namespace patseg
