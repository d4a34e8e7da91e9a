#pragma once

#include <cstddef>
#include <map>
#include <vector>

#include "fedktl/tensor.hpp"

namespace fedktl {

// The two payloads that cross the client/server boundary. Neither carries
// model parameters.

/// Class-wise mean features of one client in the ETF space (K-dimensional).
template <Real T>
struct PrototypeSet {
  std::size_t owner = 0;
  std::size_t dim = 0;
  std::map<std::size_t, std::vector<T>> entries;  // class -> P_i^c

  /// Elements uploaded: |C_i| * K.
  std::size_t element_count() const { return entries.size() * dim; }
};

/// A generated image and the latent centroid that produced it.
template <Real T>
struct ImageVectorPair {
  std::size_t label = 0;
  std::vector<T> latent;  // Q^c, H elements
  std::vector<T> image;   // I^c = G_s(Q^c), d_img elements
  std::size_t round = 0;

  /// Elements downloaded for this pair: d_img + H.
  std::size_t element_count() const { return latent.size() + image.size(); }
};

template <Real T>
using PairList = std::vector<ImageVectorPair<T>>;

template <Real T>
Tensor<T> stack_latents(const PairList<T>& pairs) {
  const std::size_t h = pairs.empty() ? 0 : pairs.front().latent.size();
  Tensor<T> out(Shape{pairs.size(), h});
  for (std::size_t i = 0; i < pairs.size(); ++i) std::copy(pairs[i].latent.begin(), pairs[i].latent.end(), out.row(i).begin());
  return out;
}

template <Real T>
Tensor<T> stack_images(const PairList<T>& pairs) {
  const std::size_t d = pairs.empty() ? 0 : pairs.front().image.size();
  Tensor<T> out(Shape{pairs.size(), d});
  for (std::size_t i = 0; i < pairs.size(); ++i) std::copy(pairs[i].image.begin(), pairs[i].image.end(), out.row(i).begin());
  return out;
}

}  // namespace fedktl
