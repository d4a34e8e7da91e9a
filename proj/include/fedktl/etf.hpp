#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "fedktl/autograd.hpp"
#include "fedktl/error.hpp"
#include "fedktl/rng.hpp"
#include "fedktl/tensor.hpp"

namespace fedktl {

/// Fixed classifier of C unit vectors in R^K with pairwise cosine -1/(C-1).
/// Column c of `vectors` ([K, C]) is the class-c direction.
template <Real T>
struct SimplexEtf {
  std::size_t dim = 0;      // K
  std::size_t classes = 0;  // C
  Tensor<T> vectors;        // V, [K, C]
  Tensor<T> rotation;       // U, [K, C]

  T component(std::size_t k, std::size_t c) const { return vectors.at(k, c); }

  std::vector<T> column(std::size_t c) const {
    std::vector<T> v(dim);
    for (std::size_t k = 0; k < dim; ++k) v[k] = vectors.at(k, c);
    return v;
  }

  template <Real U>
  SimplexEtf<U> cast() const {
    return SimplexEtf<U>{dim, classes, vectors.template cast<U>(), rotation.template cast<U>()};
  }
};

namespace detail {

// Orthonormalizes the columns of a [rows, cols] matrix in place with two
// passes of modified Gram-Schmidt. Returns false on (near) rank deficiency.
inline bool orthonormalize_columns(std::vector<double>& a, std::size_t rows, std::size_t cols) {
  for (std::size_t j = 0; j < cols; ++j) {
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t p = 0; p < j; ++p) {
        double dot = 0.0;
        for (std::size_t r = 0; r < rows; ++r) dot += a[r * cols + j] * a[r * cols + p];
        for (std::size_t r = 0; r < rows; ++r) a[r * cols + j] -= dot * a[r * cols + p];
      }
    double norm = 0.0;
    for (std::size_t r = 0; r < rows; ++r) norm += a[r * cols + j] * a[r * cols + j];
    norm = std::sqrt(norm);
    if (norm < 1e-8) return false;
    for (std::size_t r = 0; r < rows; ++r) a[r * cols + j] /= norm;
  }
  return true;
}

}  // namespace detail

/// V = sqrt(C/(C-1)) U (I - 11^T/C), with U a seeded random rotation.
///
/// For K >= C, U has orthonormal columns (U^T U = I_C). For K = C-1 no such U
/// exists; U is then a partial isometry onto span(1)^perp (U U^T = I_K,
/// U^T U = I_C - 11^T/C), which yields the same Gram matrix for V.
template <Real T = double>
SimplexEtf<T> synthesize_etf(std::size_t classes, std::size_t dim, std::uint64_t seed) {
  detail::require(classes >= 2, "synthesize_etf: need at least two classes");
  detail::require(dim + 1 >= classes, "synthesize_etf: ETF dimension K must be at least C-1");
  const std::size_t C = classes, K = dim;
  constexpr int kMaxAttempts = 8;
  std::vector<double> u;
  bool ok = false;
  for (int attempt = 0; attempt < kMaxAttempts && !ok; ++attempt) {
    Rng rng(stream_key(seed, "etf", attempt));
    if (K >= C) {
      u.assign(K * C, 0.0);
      for (auto& v : u) v = rng.normal();
      ok = detail::orthonormalize_columns(u, K, C);
    } else {
      // Rows of B: orthonormal basis of span(1)^perp in R^C; U = R B with R a
      // random K x K rotation.
      std::vector<double> basis(C * C, 0.0);
      for (std::size_t r = 0; r < C; ++r) basis[r * C] = 1.0;
      for (std::size_t r = 0; r < C; ++r)
        for (std::size_t c = 1; c < C; ++c) basis[r * C + c] = rng.normal();
      ok = detail::orthonormalize_columns(basis, C, C);
      std::vector<double> rot(K * K);
      for (auto& v : rot) v = rng.normal();
      ok = ok && detail::orthonormalize_columns(rot, K, K);
      if (!ok) continue;
      u.assign(K * C, 0.0);
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j < K; ++j) acc += rot[k * K + j] * basis[c * C + (j + 1)];
          u[k * C + c] = acc;
        }
    }
  }
  if (!ok) throw NumericError("synthesize_etf: orthonormalization failed after retries");

  const double scale = std::sqrt(static_cast<double>(C) / static_cast<double>(C - 1));
  SimplexEtf<T> etf{K, C, Tensor<T>(Shape{K, C}), Tensor<T>(Shape{K, C})};
  for (std::size_t k = 0; k < K; ++k) {
    double row_mean = 0.0;
    for (std::size_t c = 0; c < C; ++c) row_mean += u[k * C + c];
    row_mean /= static_cast<double>(C);
    for (std::size_t c = 0; c < C; ++c) {
      etf.rotation.at(k, c) = static_cast<T>(u[k * C + c]);
      etf.vectors.at(k, c) = static_cast<T>(scale * (u[k * C + c] - row_mean));
    }
  }
  return etf;
}

/// Cosine similarity between `feature` and every ETF vector.
template <Real T>
std::vector<T> cosine_logits(std::span<const T> feature, const SimplexEtf<T>& etf) {
  detail::require_shape(feature.size() == etf.dim, "cosine_logits: feature dimension mismatch");
  T norm{0};
  for (T v : feature) norm += v * v;
  norm = std::sqrt(norm);
  if (!(norm > T{0})) throw NumericError("cosine_logits: zero feature vector");
  std::vector<T> out(etf.classes, T{0});
  for (std::size_t k = 0; k < etf.dim; ++k)
    for (std::size_t c = 0; c < etf.classes; ++c) out[c] += feature[k] * etf.vectors.at(k, c);
  for (auto& v : out) v = std::clamp(v / norm, T{-1}, T{1});
  return out;
}

/// Index of the largest cosine logit.
template <Real T>
std::size_t predict_class(std::span<const T> feature, const SimplexEtf<T>& etf) {
  const auto logits = cosine_logits(feature, etf);
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

/// Re-scale s and additive angular margin m. s=1, m=0 gives plain softmax
/// cross-entropy over cosines.
struct ArcFaceParams {
  double scale = 64.0;
  double margin = 0.5;

  void validate() const {
    detail::require(scale > 0.0, "ArcFace scale must be positive");
    detail::require(margin >= 0.0 && margin < std::numbers::pi / 2, "ArcFace margin must lie in [0, pi/2)");
  }
};

/// Mean ArcFace loss of features [n, K] against labels, with cosine logits
/// to the ETF vectors and the margin added to the true-class angle
/// (clamped so theta_y + m <= pi).
template <Real T>
Var arcface_loss(Tape<T>& t, Var features, std::vector<std::size_t> labels, const SimplexEtf<T>& etf,
                 ArcFaceParams params) {
  params.validate();
  const auto& Fm = t.value(features);
  const std::size_t n = Fm.rows(), K = Fm.cols(), C = etf.classes;
  detail::require_shape(K == etf.dim, "arcface_loss: feature dimension does not match ETF dimension");
  detail::require_shape(labels.size() == n && n > 0, "arcface_loss: label count mismatch");
  const double s = params.scale, m = params.margin;
  const double cos_m = std::cos(m), sin_m = std::sin(m);

  // Per-sample: norms, cosines, and dL/dcos for the backward pass.
  std::vector<double> norms(n);
  Tensor<double> cosv(Shape{n, C});
  Tensor<double> dcos(Shape{n, C});
  double loss = 0.0;
  std::vector<double> z(C), p(C);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t y = labels[r];
    if (y >= C) throw ConfigError("arcface_loss: label out of range");
    const auto f = Fm.row(r);
    double nrm = 0.0;
    for (std::size_t k = 0; k < K; ++k) nrm += static_cast<double>(f[k]) * f[k];
    nrm = std::sqrt(nrm);
    if (!(nrm > 0.0)) throw NumericError("arcface_loss: zero feature vector");
    norms[r] = nrm;
    for (std::size_t c = 0; c < C; ++c) {
      double dot = 0.0;
      for (std::size_t k = 0; k < K; ++k) dot += static_cast<double>(f[k]) * etf.vectors.at(k, c);
      cosv.at(r, c) = std::clamp(dot / nrm, -1.0, 1.0);
    }
    // Target logit cos(min(theta_y + m, pi)) and its derivative w.r.t. cos(theta_y).
    const double cy = cosv.at(r, y);
    const double theta = std::acos(cy);
    double target = 0.0, dtarget = 0.0;
    if (m == 0.0) {
      target = cy;
      dtarget = 1.0;
    } else if (theta + m >= std::numbers::pi) {
      target = -1.0;
      dtarget = 0.0;
    } else {
      const double sin_t = std::sqrt(std::max(0.0, 1.0 - cy * cy));
      target = cy * cos_m - sin_t * sin_m;
      dtarget = cos_m + sin_m * cy / std::max(sin_t, 1e-12);
    }
    for (std::size_t c = 0; c < C; ++c) z[c] = s * (c == y ? target : cosv.at(r, c));
    // log-sum-exp relative to the maximum, with log1p for the residual mass.
    const std::size_t top = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    double rest = 0.0;
    for (std::size_t c = 0; c < C; ++c)
      if (c != top) rest += std::exp(z[c] - z[top]);
    loss += z[top] + std::log1p(rest) - z[y];
    const double denom = 1.0 + rest;
    for (std::size_t c = 0; c < C; ++c) p[c] = (c == top ? 1.0 : std::exp(z[c] - z[top])) / denom;
    for (std::size_t c = 0; c < C; ++c) {
      const double dz = p[c] - (c == y ? 1.0 : 0.0);
      dcos.at(r, c) = s * dz * (c == y ? dtarget : 1.0);
    }
  }
  loss /= static_cast<double>(n);

  return t.op(
      Tensor<T>::scalar(static_cast<T>(loss)), {features},
      [features, V = etf.vectors, norms = std::move(norms), cosv = std::move(cosv), dcos = std::move(dcos), n, K,
       C](Tape<T>& tp, const Tensor<T>& gy) {
        const auto& Fm = tp.value(features);
        auto& gf = tp.grad(features);
        const double scale_out = static_cast<double>(gy[0]) / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
          const auto f = Fm.row(r);
          const double inv = 1.0 / norms[r];
          // d cos_c / d f = v_c / |f| - cos_c f / |f|^2
          for (std::size_t k = 0; k < K; ++k) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c)
              acc += dcos.at(r, c) * (V.at(k, c) * inv - cosv.at(r, c) * f[k] * inv * inv);
            gf.at(r, k) += static_cast<T>(scale_out * acc);
          }
        }
      },
      "arcface_loss");
}

}  // namespace fedktl
