#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fedktl/error.hpp"
#include "fedktl/tensor.hpp"

namespace fedktl {

/// Parameter name -> gradient.
template <Real T>
using Gradients = std::map<std::string, Tensor<T>>;

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order, so backward is a single reverse sweep.
///
/// Named leaves are deduplicated: registering the same parameter name twice
/// returns the same node, so a module applied to two batches accumulates a
/// single gradient.
template <Real T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  Var constant(Tensor<T> value) { return push(std::move(value), false, {}); }

  /// Leaf that receives a gradient, reported under `name`.
  Var input(const std::string& name, Tensor<T> value) {
    if (auto it = named_.find(name); it != named_.end()) return Var{it->second};
    Var v = push(std::move(value), true, {});
    named_.emplace(name, v.id);
    return v;
  }

  /// A parameter leaf. Frozen parameters enter the graph as constants.
  Var param(const std::string& name, const Tensor<T>& value, bool trainable) {
    return trainable ? input(name, value) : constant(value);
  }

  /// Interior node. Requires grad iff any parent does.
  Var op(Tensor<T> value, std::initializer_list<Var> parents, BackwardFn fn, const char* what) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite activation in ") + what);
    bool rg = false;
    for (Var p : parents) rg = rg || nodes_.at(p.id).requires_grad;
    return push(std::move(value), rg, rg ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  T item(Var v) const {
    const auto& t = value(v);
    detail::require_shape(t.size() == 1, "item() on non-scalar node");
    return t[0];
  }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator of `v`, zero-initialized on first use.
  Tensor<T>& grad(Var v) {
    auto& n = nodes_.at(v.id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Propagates d(loss)/d(node) for every node and returns the gradients of
  /// the named leaves the loss actually reaches.
  Gradients<T> backward(Var loss) {
    if (consumed_) throw Error("backward called twice on one graph");
    if (value(loss).size() != 1) throw ShapeError("backward: loss is not a scalar");
    consumed_ = true;
    Gradients<T> out;
    if (!requires_grad(loss)) return out;
    grad(loss)[0] = T{1};
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, n.grad);
    }
    for (const auto& [name, id] : named_) {
      const auto& n = nodes_[id];
      if (n.grad.empty()) continue;
      n.grad.check_finite("gradient of " + name);
      out.emplace(name, n.grad);
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Tensor<T> value, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), {}, rg, std::move(fn)});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> named_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Primitive differentiable operations. All matrices are [rows, cols].

/// y = x W^T + b, with x [n,in], W [out,in], b [out] (b may be invalid).
template <Real T>
Var linear(Tape<T>& t, Var x, Var w, Var b) {
  const auto& X = t.value(x);
  const auto& W = t.value(w);
  const std::size_t n = X.rows(), in = X.cols(), out = W.rows();
  detail::require_shape(W.cols() == in, "linear: input width " + std::to_string(in) + " does not match weight " +
                                            shape_str(W.shape()));
  Tensor<T> Y(Shape{n, out});
  for (std::size_t r = 0; r < n; ++r) {
    const auto xr = X.row(r);
    for (std::size_t o = 0; o < out; ++o) {
      const auto wr = W.row(o);
      T acc{0};
      for (std::size_t k = 0; k < in; ++k) acc += xr[k] * wr[k];
      Y.at(r, o) = acc;
    }
  }
  if (b.valid()) {
    const auto& B = t.value(b);
    detail::require_shape(B.size() == out, "linear: bias length mismatch");
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t o = 0; o < out; ++o) Y.at(r, o) += B[o];
  }
  return t.op(
      std::move(Y), {x, w, b.valid() ? b : x},
      [x, w, b, n, in, out](Tape<T>& tp, const Tensor<T>& gy) {
        const auto& X = tp.value(x);
        const auto& W = tp.value(w);
        if (tp.requires_grad(x)) {
          auto& gx = tp.grad(x);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t o = 0; o < out; ++o) {
              const T g = gy.at(r, o);
              if (g == T{0}) continue;
              const auto wr = W.row(o);
              auto gxr = gx.row(r);
              for (std::size_t k = 0; k < in; ++k) gxr[k] += g * wr[k];
            }
        }
        if (tp.requires_grad(w)) {
          auto& gw = tp.grad(w);
          for (std::size_t r = 0; r < n; ++r) {
            const auto xr = X.row(r);
            for (std::size_t o = 0; o < out; ++o) {
              const T g = gy.at(r, o);
              if (g == T{0}) continue;
              auto gwr = gw.row(o);
              for (std::size_t k = 0; k < in; ++k) gwr[k] += g * xr[k];
            }
          }
        }
        if (b.valid() && tp.requires_grad(b)) {
          auto& gb = tp.grad(b);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t o = 0; o < out; ++o) gb[o] += gy.at(r, o);
        }
      },
      "linear");
}

template <Real T>
Var relu(Tape<T>& t, Var x) {
  Tensor<T> y = t.value(x);
  for (auto& v : y.data()) v = v > T{0} ? v : T{0};
  return t.op(
      std::move(y), {x},
      [x](Tape<T>& tp, const Tensor<T>& gy) {
        const auto& X = tp.value(x);
        auto& gx = tp.grad(x);
        for (std::size_t i = 0; i < gx.size(); ++i)
          if (X[i] > T{0}) gx[i] += gy[i];
      },
      "relu");
}

template <Real T>
Var tanh(Tape<T>& t, Var x) {
  Tensor<T> y = t.value(x);
  for (auto& v : y.data()) v = std::tanh(v);
  const std::size_t self = t.size();
  return t.op(
      std::move(y), {x},
      [x, self](Tape<T>& tp, const Tensor<T>& gy) {
        const auto& Y = tp.value(Var{self});
        auto& gx = tp.grad(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * (T{1} - Y[i] * Y[i]);
      },
      "tanh");
}

/// Adaptive average pooling along the feature axis: [n,in] -> [n,out].
/// Output j averages inputs [floor(j*in/out), ceil((j+1)*in/out)).
template <Real T>
Var avg_pool(Tape<T>& t, Var x, std::size_t out) {
  const auto& X = t.value(x);
  const std::size_t n = X.rows(), in = X.cols();
  detail::require_shape(out >= 1 && out <= in, "avg_pool: target width must be in [1, input width]");
  std::vector<std::pair<std::size_t, std::size_t>> win(out);
  for (std::size_t j = 0; j < out; ++j) win[j] = {(j * in) / out, ((j + 1) * in + out - 1) / out};
  Tensor<T> Y(Shape{n, out});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < out; ++j) {
      T acc{0};
      for (std::size_t k = win[j].first; k < win[j].second; ++k) acc += X.at(r, k);
      Y.at(r, j) = acc / static_cast<T>(win[j].second - win[j].first);
    }
  return t.op(
      std::move(Y), {x},
      [x, win, n, out](Tape<T>& tp, const Tensor<T>& gy) {
        auto& gx = tp.grad(x);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < out; ++j) {
            const T g = gy.at(r, j) / static_cast<T>(win[j].second - win[j].first);
            for (std::size_t k = win[j].first; k < win[j].second; ++k) gx.at(r, k) += g;
          }
      },
      "avg_pool");
}

/// Batch statistics produced by a training-mode batch_norm.
template <Real T>
struct BatchStats {
  std::vector<T> mean;
  std::vector<T> var;  // biased
};

/// Training-mode batch normalization over the rows of x.
template <Real T>
Var batch_norm_train(Tape<T>& t, Var x, Var gamma, Var beta, T eps, BatchStats<T>* stats = nullptr) {
  const auto& X = t.value(x);
  const std::size_t n = X.rows(), d = X.cols();
  detail::require_shape(t.value(gamma).size() == d && t.value(beta).size() == d, "batch_norm: affine width mismatch");
  std::vector<T> mean(d, T{0}), var(d, T{0}), inv_std(d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) mean[j] += X.at(r, j);
  for (auto& m : mean) m /= static_cast<T>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      const T c = X.at(r, j) - mean[j];
      var[j] += c * c;
    }
  for (auto& v : var) v /= static_cast<T>(n);
  for (std::size_t j = 0; j < d; ++j) inv_std[j] = T{1} / std::sqrt(var[j] + eps);
  Tensor<T> xhat(Shape{n, d});
  Tensor<T> Y(Shape{n, d});
  const auto& G = t.value(gamma);
  const auto& B = t.value(beta);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      xhat.at(r, j) = (X.at(r, j) - mean[j]) * inv_std[j];
      Y.at(r, j) = G[j] * xhat.at(r, j) + B[j];
    }
  if (stats) *stats = BatchStats<T>{mean, var};
  return t.op(
      std::move(Y), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std, n, d](Tape<T>& tp, const Tensor<T>& gy) {
        const auto& G = tp.value(gamma);
        std::vector<T> sum_g(d, T{0}), sum_gx(d, T{0});
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < d; ++j) {
            sum_g[j] += gy.at(r, j);
            sum_gx[j] += gy.at(r, j) * xhat.at(r, j);
          }
        if (tp.requires_grad(gamma)) {
          auto& gg = tp.grad(gamma);
          for (std::size_t j = 0; j < d; ++j) gg[j] += sum_gx[j];
        }
        if (tp.requires_grad(beta)) {
          auto& gb = tp.grad(beta);
          for (std::size_t j = 0; j < d; ++j) gb[j] += sum_g[j];
        }
        if (tp.requires_grad(x)) {
          auto& gx = tp.grad(x);
          const T inv_n = T{1} / static_cast<T>(n);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j)
              gx.at(r, j) += G[j] * inv_std[j] *
                             (gy.at(r, j) - sum_g[j] * inv_n - xhat.at(r, j) * sum_gx[j] * inv_n);
        }
      },
      "batch_norm");
}

/// Evaluation-mode batch normalization: a fixed per-feature affine map.
template <Real T>
Var batch_norm_eval(Tape<T>& t, Var x, Var gamma, Var beta, std::span<const T> running_mean,
                    std::span<const T> running_var, T eps) {
  const auto& X = t.value(x);
  const std::size_t n = X.rows(), d = X.cols();
  detail::require_shape(running_mean.size() == d && running_var.size() == d, "batch_norm: running stats width");
  std::vector<T> inv_std(d), mean(running_mean.begin(), running_mean.end());
  for (std::size_t j = 0; j < d; ++j) inv_std[j] = T{1} / std::sqrt(running_var[j] + eps);
  const auto& G = t.value(gamma);
  const auto& B = t.value(beta);
  Tensor<T> Y(Shape{n, d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) Y.at(r, j) = G[j] * (X.at(r, j) - mean[j]) * inv_std[j] + B[j];
  return t.op(
      std::move(Y), {x, gamma, beta},
      [x, gamma, beta, mean, inv_std, n, d](Tape<T>& tp, const Tensor<T>& gy) {
        const auto& X = tp.value(x);
        const auto& G = tp.value(gamma);
        if (tp.requires_grad(x)) {
          auto& gx = tp.grad(x);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) gx.at(r, j) += gy.at(r, j) * G[j] * inv_std[j];
        }
        if (tp.requires_grad(gamma)) {
          auto& gg = tp.grad(gamma);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += gy.at(r, j) * (X.at(r, j) - mean[j]) * inv_std[j];
        }
        if (tp.requires_grad(beta)) {
          auto& gb = tp.grad(beta);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += gy.at(r, j);
        }
      },
      "batch_norm");
}

template <Real T>
Var add(Tape<T>& t, Var a, Var b) {
  detail::require_shape(t.value(a).size() == t.value(b).size(), "add: size mismatch");
  Tensor<T> y = t.value(a);
  const auto& B = t.value(b);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += B[i];
  return t.op(
      std::move(y), {a, b},
      [a, b](Tape<T>& tp, const Tensor<T>& gy) {
        for (Var v : {a, b}) {
          if (!tp.requires_grad(v)) continue;
          auto& g = tp.grad(v);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
        }
      },
      "add");
}

template <Real T>
Var scale(Tape<T>& t, Var a, T c) {
  Tensor<T> y = t.value(a);
  for (auto& v : y.data()) v *= c;
  return t.op(
      std::move(y), {a},
      [a, c](Tape<T>& tp, const Tensor<T>& gy) {
        auto& g = tp.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * gy[i];
      },
      "scale");
}

template <Real T>
Var sum(Tape<T>& t, Var a) {
  return t.op(
      Tensor<T>::scalar(t.value(a).sum()), {a},
      [a](Tape<T>& tp, const Tensor<T>& gy) {
        auto& g = tp.grad(a);
        for (auto& v : g.data()) v += gy[0];
      },
      "sum");
}

/// Sum of squares, as a scalar.
template <Real T>
Var sum_squares(Tape<T>& t, Var a) {
  T s{0};
  for (T v : t.value(a).data()) s += v * v;
  return t.op(
      Tensor<T>::scalar(s), {a},
      [a](Tape<T>& tp, const Tensor<T>& gy) {
        const auto& A = tp.value(a);
        auto& g = tp.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += T{2} * A[i] * gy[0];
      },
      "sum_squares");
}

/// sum_r w_r * mean_j (a_rj - b_rj)^2. With all w_r = 1/rows this is the
/// element-wise mean squared error.
template <Real T>
Var weighted_row_mse(Tape<T>& t, Var a, Var b, std::vector<T> weights) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  detail::require_shape(A.shape() == B.shape() || (A.size() == B.size() && A.rows() == B.rows()),
                        "mse: shape mismatch " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  detail::require_shape(weights.size() == A.rows(), "mse: weight count mismatch");
  const std::size_t n = A.rows(), d = A.cols();
  T s{0};
  for (std::size_t r = 0; r < n; ++r) {
    T row{0};
    for (std::size_t j = 0; j < d; ++j) {
      const T e = A.at(r, j) - B.at(r, j);
      row += e * e;
    }
    s += weights[r] * row / static_cast<T>(d);
  }
  return t.op(
      Tensor<T>::scalar(s), {a, b},
      [a, b, weights = std::move(weights), n, d](Tape<T>& tp, const Tensor<T>& gy) {
        const auto& A = tp.value(a);
        const auto& B = tp.value(b);
        Tensor<T>* ga = tp.requires_grad(a) ? &tp.grad(a) : nullptr;
        Tensor<T>* gb = tp.requires_grad(b) ? &tp.grad(b) : nullptr;
        for (std::size_t r = 0; r < n; ++r) {
          const T c = T{2} * weights[r] * gy[0] / static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T e = c * (A.at(r, j) - B.at(r, j));
            if (ga) ga->at(r, j) += e;
            if (gb) gb->at(r, j) -= e;
          }
        }
      },
      "mse");
}

/// Element-wise mean squared error between equally shaped tensors.
template <Real T>
Var mse(Tape<T>& t, Var a, Var b) {
  const std::size_t n = t.value(a).rows();
  return weighted_row_mse(t, a, b, std::vector<T>(n, T{1} / static_cast<T>(n)));
}

/// Per-group row means: out[g] = mean{x[r] : group[r] == g}. Every group in
/// [0, groups) must be non-empty.
template <Real T>
Var segment_mean(Tape<T>& t, Var x, std::vector<std::size_t> group, std::size_t groups) {
  const auto& X = t.value(x);
  const std::size_t n = X.rows(), d = X.cols();
  detail::require_shape(group.size() == n, "segment_mean: group count mismatch");
  std::vector<std::size_t> count(groups, 0);
  Tensor<T> Y(Shape{groups, d});
  for (std::size_t r = 0; r < n; ++r) {
    detail::require_shape(group[r] < groups, "segment_mean: group id out of range");
    ++count[group[r]];
    for (std::size_t j = 0; j < d; ++j) Y.at(group[r], j) += X.at(r, j);
  }
  for (std::size_t g = 0; g < groups; ++g) {
    detail::require_shape(count[g] > 0, "segment_mean: empty group");
    for (std::size_t j = 0; j < d; ++j) Y.at(g, j) /= static_cast<T>(count[g]);
  }
  return t.op(
      std::move(Y), {x},
      [x, group = std::move(group), count, n, d](Tape<T>& tp, const Tensor<T>& gy) {
        auto& gx = tp.grad(x);
        for (std::size_t r = 0; r < n; ++r) {
          const T inv = T{1} / static_cast<T>(count[group[r]]);
          for (std::size_t j = 0; j < d; ++j) gx.at(r, j) += gy.at(group[r], j) * inv;
        }
      },
      "segment_mean");
}

template <Real T>
Var gather_rows(Tape<T>& t, Var x, std::vector<std::size_t> idx) {
  Tensor<T> y = t.value(x).gather_rows(idx);
  return t.op(
      std::move(y), {x},
      [x, idx = std::move(idx)](Tape<T>& tp, const Tensor<T>& gy) {
        auto& gx = tp.grad(x);
        const std::size_t d = gx.cols();
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < d; ++j) gx.at(idx[i], j) += gy.at(i, j);
      },
      "gather_rows");
}

/// Mean softmax cross-entropy of logits [n,C] against integer labels.
template <Real T>
Var softmax_cross_entropy(Tape<T>& t, Var logits, std::vector<std::size_t> labels) {
  const auto& Z = t.value(logits);
  const std::size_t n = Z.rows(), C = Z.cols();
  detail::require_shape(labels.size() == n, "cross_entropy: label count mismatch");
  Tensor<T> prob(Shape{n, C});
  T loss{0};
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= C) throw ConfigError("cross_entropy: label out of range");
    const auto z = Z.row(r);
    const T mx = *std::max_element(z.begin(), z.end());
    T s{0};
    for (std::size_t c = 0; c < C; ++c) s += (prob.at(r, c) = std::exp(z[c] - mx));
    for (std::size_t c = 0; c < C; ++c) prob.at(r, c) /= s;
    loss += mx + std::log(s) - z[labels[r]];
  }
  loss /= static_cast<T>(n);
  return t.op(
      Tensor<T>::scalar(loss), {logits},
      [logits, labels = std::move(labels), prob = std::move(prob), n, C](Tape<T>& tp, const Tensor<T>& gy) {
        auto& g = tp.grad(logits);
        const T c0 = gy[0] / static_cast<T>(n);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < C; ++c)
            g.at(r, c) += c0 * (prob.at(r, c) - (c == labels[r] ? T{1} : T{0}));
      },
      "cross_entropy");
}

}  // namespace fedktl
