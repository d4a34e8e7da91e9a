#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "fedktl/autograd.hpp"
#include "fedktl/error.hpp"
#include "fedktl/tensor.hpp"

namespace fedktl {

/// Multipliers applied to the median squared distance to form the kernel
/// bandwidths sigma^2.
inline constexpr double kMedianMultipliers[] = {0.25, 0.5, 1.0, 2.0, 4.0};

/// Bandwidths sigma_k with sigma_k^2 = median(pairwise squared distances of
/// X u Y) * multiplier_k. Falls back to a median of 1 when all points coincide.
template <Real T>
std::vector<double> median_heuristic_bandwidths(const Tensor<T>& X, const Tensor<T>& Y,
                                                std::span<const double> multipliers = kMedianMultipliers) {
  const std::size_t n = X.rows() + Y.rows();
  auto point = [&](std::size_t i) { return i < X.rows() ? X.row(i) : Y.row(i - X.rows()); };
  std::vector<double> d2;
  d2.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) d2.push_back(static_cast<double>(squared_distance(point(i), point(j))));
  double median = 1.0;
  if (!d2.empty()) {
    auto mid = d2.begin() + static_cast<std::ptrdiff_t>(d2.size() / 2);
    std::nth_element(d2.begin(), mid, d2.end());
    median = *mid;
  }
  if (!(median > 0.0)) median = 1.0;
  std::vector<double> sigmas;
  for (double m : multipliers) sigmas.push_back(std::sqrt(median * m));
  return sigmas;
}

namespace detail {

template <Real T>
bool lexicographically_before(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows()) return a.rows() < b.rows();
  return std::lexicographical_compare(a.data().begin(), a.data().end(), b.data().begin(), b.data().end());
}

// Inverse bandwidths 1/(2 sigma_k^2). When each is twice the next (the
// median-heuristic ladder), one exp plus repeated squaring gives them all.
struct KernelLadder {
  std::vector<double> w;
  bool doubling = false;

  explicit KernelLadder(std::span<const double> sigmas) {
    for (double s : sigmas) w.push_back(1.0 / (2.0 * s * s));
    doubling = w.size() > 1;
    for (std::size_t k = 0; k + 1 < w.size(); ++k)
      if (std::abs(w[k] - 2.0 * w[k + 1]) > 1e-12 * w[k]) doubling = false;
  }

  // Averaged kernel value at squared distance dist2, and its derivative with
  // respect to dist2.
  void at(double dist2, double& kv, double& dk) const {
    kv = 0.0;
    dk = 0.0;
    if (doubling) {
      double e = std::exp(-dist2 * w.back());
      for (std::size_t k = w.size(); k-- > 0;) {
        kv += e;
        dk -= e * w[k];
        e *= e;
      }
    } else {
      for (double wk : w) {
        const double e = std::exp(-dist2 * wk);
        kv += e;
        dk -= e * wk;
      }
    }
    kv /= static_cast<double>(w.size());
    dk /= static_cast<double>(w.size());
  }
};

// Mean kernel value over A x B, and optionally the gradient of that mean with
// respect to each row of A (gradient w.r.t. B follows by symmetry).
template <Real T>
double mean_kernel(const Tensor<T>& A, const Tensor<T>& B, std::span<const double> sigmas, Tensor<double>* grad_a) {
  const std::size_t n = A.rows(), m = B.rows(), d = A.cols();
  const KernelLadder ladder(sigmas);
  const double norm = 1.0 / (static_cast<double>(n) * static_cast<double>(m));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = A.row(i);
    for (std::size_t j = 0; j < m; ++j) {
      const auto b = B.row(j);
      double kv, dk;
      ladder.at(static_cast<double>(squared_distance(a, b)), kv, dk);
      total += kv;
      if (grad_a && dk != 0.0) {
        const double c = 2.0 * dk * norm;
        for (std::size_t q = 0; q < d; ++q) grad_a->at(i, q) += c * (static_cast<double>(a[q]) - b[q]);
      }
    }
  }
  return total * norm;
}

// mean_kernel(A, A, ...) visiting each unordered pair once.
template <Real T>
double mean_self_kernel(const Tensor<T>& A, std::span<const double> sigmas, Tensor<double>* grad_a) {
  const std::size_t n = A.rows(), d = A.cols();
  const KernelLadder ladder(sigmas);
  const double norm = 1.0 / (static_cast<double>(n) * static_cast<double>(n));
  double off = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = A.row(i);
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto b = A.row(j);
      double kv, dk;
      ladder.at(static_cast<double>(squared_distance(a, b)), kv, dk);
      off += kv;
      if (grad_a && dk != 0.0) {
        const double c = 2.0 * dk * norm;
        for (std::size_t q = 0; q < d; ++q) {
          const double diff = c * (static_cast<double>(a[q]) - b[q]);
          grad_a->at(i, q) += diff;
          grad_a->at(j, q) -= diff;
        }
      }
    }
  }
  return (static_cast<double>(n) + 2.0 * off) * norm;  // k(a, a) = 1
}

}  // namespace detail

/// Biased (V-statistic) squared MMD between the row sets X and Y under the
/// averaged RBF kernel k(a,b) = mean_k exp(-|a-b|^2 / (2 sigma_k^2)).
/// Differentiable in both X and Y. The value is exactly symmetric in (X, Y).
template <Real T>
Var mmd_rbf(Tape<T>& t, Var x, Var y, std::vector<double> sigmas) {
  const bool swap = detail::lexicographically_before(t.value(y), t.value(x));
  const Var a = swap ? y : x, b = swap ? x : y;
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.rows() == 0 || B.rows() == 0) throw ConfigError("mmd_rbf: empty sample set");
  detail::require_shape(A.cols() == B.cols(), "mmd_rbf: dimension mismatch");
  if (sigmas.empty()) throw ConfigError("mmd_rbf: no bandwidths");
  for (double s : sigmas)
    if (!(s > 0.0)) throw ConfigError("mmd_rbf: bandwidth must be positive");

  // Gradient buffers only for the sides that need them; a constant side
  // (a fresh W sample) costs one value pass.
  const bool need_a = t.requires_grad(a), need_b = t.requires_grad(b);
  Tensor<double> gaa, gab, gbb, gba;
  if (need_a) gaa = gab = Tensor<double>(Shape{A.rows(), A.cols()});
  if (need_b) gbb = gba = Tensor<double>(Shape{B.rows(), B.cols()});
  const double kaa = detail::mean_self_kernel(A, sigmas, need_a ? &gaa : nullptr);
  const double kbb = detail::mean_self_kernel(B, sigmas, need_b ? &gbb : nullptr);
  double kab;
  if (need_a || !need_b) {
    kab = detail::mean_kernel(A, B, sigmas, need_a ? &gab : nullptr);
    if (need_b) detail::mean_kernel(B, A, sigmas, &gba);
  } else {
    kab = detail::mean_kernel(B, A, sigmas, &gba);
  }
  const double value = (kaa + kbb) - 2.0 * kab;

  return t.op(
      Tensor<T>::scalar(static_cast<T>(value)), {a, b},
      [a, b, gaa = std::move(gaa), gab = std::move(gab), gbb = std::move(gbb), gba = std::move(gba)](
          Tape<T>& tp, const Tensor<T>& gy) {
        const double g = gy[0];
        // d mean k(A,A) / dA_i counts row i on both sides of the pair.
        if (tp.requires_grad(a)) {
          auto& ga = tp.grad(a);
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += static_cast<T>(g * (2.0 * gaa[i] - 2.0 * gab[i]));
        }
        if (tp.requires_grad(b)) {
          auto& gb = tp.grad(b);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += static_cast<T>(g * (2.0 * gbb[i] - 2.0 * gba[i]));
        }
      },
      "mmd_rbf");
}

/// Plain evaluation of mmd_rbf.
template <Real T>
T mmd_rbf_value(const Tensor<T>& X, const Tensor<T>& Y, std::vector<double> sigmas) {
  Tape<T> t;
  return t.item(mmd_rbf(t, t.constant(X), t.constant(Y), std::move(sigmas)));
}

}  // namespace fedktl
