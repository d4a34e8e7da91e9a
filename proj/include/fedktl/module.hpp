#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "fedktl/autograd.hpp"
#include "fedktl/rng.hpp"
#include "fedktl/tensor.hpp"

namespace fedktl {

namespace layer {
struct Dense {
  std::size_t in, out;
};
struct BatchNorm {
  std::size_t dim;
};
struct Relu {};
struct Tanh {};
/// Adaptive average pooling from `in` features down to `out`.
struct AvgPool {
  std::size_t in, out;
};
}  // namespace layer

using LayerSpec = std::variant<layer::Dense, layer::BatchNorm, layer::Relu, layer::Tanh, layer::AvgPool>;

struct BatchNormOptions {
  double momentum = 0.9;  // weight of the previous running value
  double eps = 1e-5;
};

/// Width a layer produces given its input width, or 0 if it does not compose.
inline std::size_t layer_output_width(const LayerSpec& spec, std::size_t in) {
  return std::visit(
      [in](const auto& l) -> std::size_t {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, layer::Dense>) return l.in == in ? l.out : 0;
        if constexpr (std::is_same_v<L, layer::BatchNorm>) return l.dim == in ? in : 0;
        if constexpr (std::is_same_v<L, layer::AvgPool>) return (l.in == in && l.out >= 1 && l.out <= in) ? l.out : 0;
        return in;
      },
      spec);
}

template <Real T>
struct Parameter {
  std::string name;
  Tensor<T> value;
};

/// A sequential stack of layers with named parameters.
///
/// Parameter names are "<module>.<layer>.<weight|bias|gamma|beta>". Weights are
/// initialized uniformly in [-1/sqrt(fan_in), 1/sqrt(fan_in)] from a stream
/// keyed by (seed, module name, layer index).
template <Real T>
class Module {
 public:
  Module() = default;

  Module(std::string name, std::size_t input_width, std::vector<LayerSpec> layers, std::uint64_t seed,
         BatchNormOptions bn = {})
      : name_(std::move(name)), input_width_(input_width), layers_(std::move(layers)), bn_opts_(bn) {
    std::size_t width = input_width_;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::size_t next = layer_output_width(layers_[i], width);
      detail::require_shape(next != 0, "module " + name_ + ": layer " + std::to_string(i) +
                                           " does not accept width " + std::to_string(width));
      width = next;
    }
    output_width_ = width;
    reinitialize(seed);
  }

  /// Re-draws every parameter from `seed`; resets batch-norm running stats.
  void reinitialize(std::uint64_t seed) {
    params_.clear();
    slots_.assign(layers_.size(), Slot{});
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string prefix = name_ + "." + std::to_string(i) + ".";
      if (const auto* d = std::get_if<layer::Dense>(&layers_[i])) {
        Rng rng(stream_key(seed, name_, i));
        const double bound = 1.0 / std::sqrt(static_cast<double>(d->in));
        Tensor<T> w(Shape{d->out, d->in});
        for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
        Tensor<T> b(Shape{d->out});
        for (auto& v : b.data()) v = static_cast<T>(rng.uniform(-bound, bound));
        slots_[i].first = add_param(prefix + "weight", std::move(w));
        slots_[i].second = add_param(prefix + "bias", std::move(b));
      } else if (const auto* bn = std::get_if<layer::BatchNorm>(&layers_[i])) {
        slots_[i].first = add_param(prefix + "gamma", Tensor<T>(Shape{bn->dim}, T{1}));
        slots_[i].second = add_param(prefix + "beta", Tensor<T>(Shape{bn->dim}, T{0}));
        slots_[i].running_mean.assign(bn->dim, T{0});
        slots_[i].running_var.assign(bn->dim, T{1});
      }
    }
  }

  const std::string& name() const { return name_; }
  std::size_t input_width() const { return input_width_; }
  std::size_t output_width() const { return output_width_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  /// Running statistics of the batch-norm layer at `layer` (empty otherwise).
  const std::vector<T>& running_mean(std::size_t layer) const { return slots_.at(layer).running_mean; }
  const std::vector<T>& running_var(std::size_t layer) const { return slots_.at(layer).running_var; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Combined hash of every parameter and running statistic.
  std::uint64_t state_hash() const {
    std::uint64_t h = 0;
    for (const auto& p : params_) h = detail::mix64(h ^ content_hash(p.value));
    for (const auto& s : slots_) {
      h = detail::mix64(h ^ content_hash(Tensor<T>(Shape{s.running_mean.size()}, s.running_mean)));
      h = detail::mix64(h ^ content_hash(Tensor<T>(Shape{s.running_var.size()}, s.running_var)));
    }
    return h;
  }

  /// Records the forward pass on `tape`. In train mode batch-norm layers use
  /// batch statistics and update their running estimates.
  Var forward(Tape<T>& tape, Var x, bool train) { return run(*this, tape, x, train); }

  /// Evaluation-mode forward; never mutates the module.
  Var forward(Tape<T>& tape, Var x) const { return run(*this, tape, x, false); }

  /// Evaluation-mode forward on a plain tensor.
  Tensor<T> infer(const Tensor<T>& x) const {
    Tape<T> tape;
    return tape.value(forward(tape, tape.constant(x)));
  }

 private:
  struct Slot {
    std::size_t first = 0, second = 0;  // parameter indices
    std::vector<T> running_mean, running_var;
  };

  std::size_t add_param(std::string name, Tensor<T> v) {
    params_.push_back(Parameter<T>{std::move(name), std::move(v)});
    return params_.size() - 1;
  }

  template <typename Self>
  static Var run(Self& self, Tape<T>& tape, Var x, bool train) {
    constexpr bool mutable_self = !std::is_const_v<Self>;
    detail::require_shape(tape.value(x).cols() == self.input_width_,
                          "module " + self.name_ + ": input width " + std::to_string(tape.value(x).cols()) +
                              " does not match " + std::to_string(self.input_width_));
    const bool trainable = !self.frozen_;
    Var h = x;
    for (std::size_t i = 0; i < self.layers_.size(); ++i) {
      const auto& spec = self.layers_[i];
      auto& slot = self.slots_[i];
      if (std::holds_alternative<layer::Dense>(spec)) {
        const auto& w = self.params_[slot.first];
        const auto& b = self.params_[slot.second];
        h = linear(tape, h, tape.param(w.name, w.value, trainable), tape.param(b.name, b.value, trainable));
      } else if (std::holds_alternative<layer::BatchNorm>(spec)) {
        const auto& g = self.params_[slot.first];
        const auto& b = self.params_[slot.second];
        const Var gv = tape.param(g.name, g.value, trainable);
        const Var bv = tape.param(b.name, b.value, trainable);
        const T eps = static_cast<T>(self.bn_opts_.eps);
        if (train) {
          BatchStats<T> stats;
          h = batch_norm_train(tape, h, gv, bv, eps, &stats);
          if constexpr (mutable_self) {
            const T mom = static_cast<T>(self.bn_opts_.momentum);
            const std::size_t n = tape.value(h).rows();
            const T unbias = n > 1 ? static_cast<T>(n) / static_cast<T>(n - 1) : T{1};
            for (std::size_t j = 0; j < stats.mean.size(); ++j) {
              slot.running_mean[j] = mom * slot.running_mean[j] + (T{1} - mom) * stats.mean[j];
              slot.running_var[j] = mom * slot.running_var[j] + (T{1} - mom) * stats.var[j] * unbias;
            }
          } else {
            throw Error("train-mode forward on a const module");
          }
        } else {
          h = batch_norm_eval<T>(tape, h, gv, bv, slot.running_mean, slot.running_var, eps);
        }
      } else if (std::holds_alternative<layer::Relu>(spec)) {
        h = relu(tape, h);
      } else if (std::holds_alternative<layer::Tanh>(spec)) {
        h = fedktl::tanh(tape, h);
      } else {
        h = avg_pool(tape, h, std::get<layer::AvgPool>(spec).out);
      }
    }
    return h;
  }

  std::string name_;
  std::size_t input_width_ = 0;
  std::size_t output_width_ = 0;
  std::vector<LayerSpec> layers_;
  BatchNormOptions bn_opts_;
  std::vector<Parameter<T>> params_;
  std::vector<Slot> slots_;
  bool frozen_ = false;
};

}  // namespace fedktl
