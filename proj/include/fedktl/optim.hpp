#pragma once

#include <cmath>
#include <map>
#include <string>

#include "fedktl/autograd.hpp"
#include "fedktl/error.hpp"
#include "fedktl/module.hpp"

namespace fedktl {

namespace detail {

template <Real T>
const Tensor<T>* checked_grad(const Gradients<T>& grads, const Parameter<T>& p) {
  auto it = grads.find(p.name);
  if (it == grads.end()) return nullptr;
  if (it->second.shape() != p.value.shape())
    throw ShapeError("optimizer: gradient shape " + shape_str(it->second.shape()) + " does not match parameter " +
                     p.name + " " + shape_str(p.value.shape()));
  it->second.check_finite("gradient of " + p.name);
  return &it->second;
}

}  // namespace detail

/// Plain stochastic gradient descent: p <- p - lr * g.
template <Real T>
class Sgd {
 public:
  explicit Sgd(double lr) : lr_(lr) { detail::require(lr > 0.0, "SGD learning rate must be positive"); }

  double learning_rate() const { return lr_; }

  /// Updates every unfrozen parameter of `m` that has an entry in `grads`.
  void step(Module<T>& m, const Gradients<T>& grads) const {
    if (m.frozen()) return;
    const T lr = static_cast<T>(lr_);
    for (auto& p : m.parameters()) {
      const auto* g = detail::checked_grad(grads, p);
      if (!g) continue;
      for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] -= lr * (*g)[i];
    }
  }

 private:
  double lr_;
};

struct AdamOptions {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Moments are keyed by parameter name.
template <Real T>
class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {
    detail::require(opts.lr > 0.0, "Adam learning rate must be positive");
  }

  const AdamOptions& options() const { return opts_; }
  long steps() const { return t_; }

  /// One step for all parameters of `m` present in `grads`. The shared step
  /// counter advances once per call.
  void step(Module<T>& m, const Gradients<T>& grads) {
    if (m.frozen()) return;
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (auto& p : m.parameters()) {
      const auto* g = detail::checked_grad(grads, p);
      if (!g) continue;
      auto& st = moments_[p.name];
      if (st.m.shape() != p.value.shape()) {
        st.m = Tensor<T>(p.value.shape());
        st.v = Tensor<T>(p.value.shape());
      }
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double gi = (*g)[i];
        const double mi = opts_.beta1 * st.m[i] + (1.0 - opts_.beta1) * gi;
        const double vi = opts_.beta2 * st.v[i] + (1.0 - opts_.beta2) * gi * gi;
        st.m[i] = static_cast<T>(mi);
        st.v[i] = static_cast<T>(vi);
        const double update = opts_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + opts_.eps);
        p.value[i] = static_cast<T>(p.value[i] - update);
      }
    }
  }

  void reset() {
    moments_.clear();
    t_ = 0;
  }

 private:
  struct Moments {
    Tensor<T> m, v;
  };
  AdamOptions opts_;
  std::map<std::string, Moments> moments_;
  long t_ = 0;
};

}  // namespace fedktl
