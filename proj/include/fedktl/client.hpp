#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "fedktl/autograd.hpp"
#include "fedktl/datagen.hpp"
#include "fedktl/etf.hpp"
#include "fedktl/knowledge.hpp"
#include "fedktl/module.hpp"
#include "fedktl/optim.hpp"
#include "fedktl/rng.hpp"

namespace fedktl {

/// Fully connected extractor recipe: `depth` blocks of FC(width) [+BN] + ReLU,
/// then average pooling down to the shared feature width K'.
struct ExtractorRecipe {
  std::size_t depth = 1;
  std::size_t width = 64;
  bool batch_norm = false;

  friend bool operator==(const ExtractorRecipe&, const ExtractorRecipe&) = default;
};

using Palette = std::vector<ExtractorRecipe>;

/// Four heterogeneous extractors.
inline Palette default_palette() { return {{1, 64, false}, {2, 128, false}, {3, 128, true}, {3, 256, true}}; }

struct ClientDims {
  std::size_t input = 0;    // d
  std::size_t feature = 0;  // K'
  std::size_t etf = 0;      // K
  std::size_t latent = 0;   // H
  std::size_t classes = 0;  // C
};

inline std::vector<LayerSpec> extractor_layers(const ExtractorRecipe& r, std::size_t input, std::size_t feature) {
  detail::require(r.depth >= 1, "extractor recipe: depth must be at least 1");
  detail::require(r.width >= feature, "extractor recipe: width " + std::to_string(r.width) +
                                          " is smaller than the feature width K'=" + std::to_string(feature));
  std::vector<LayerSpec> layers;
  std::size_t in = input;
  for (std::size_t i = 0; i < r.depth; ++i) {
    layers.push_back(layer::Dense{in, r.width});
    if (r.batch_norm) layers.push_back(layer::BatchNorm{r.width});
    layers.push_back(layer::Relu{});
    in = r.width;
  }
  if (r.width != feature) layers.push_back(layer::AvgPool{r.width, feature});
  return layers;
}

/// Stable name of the auxiliary projection; identical for every client so
/// that identical seeds yield identical parameters.
inline constexpr const char* kHPrimeName = "h_prime";

inline std::uint64_t h_prime_seed(std::uint64_t shared_seed, std::size_t round) {
  return stream_key(shared_seed, "h_prime.round", round);
}

/// One client's models. With an ETF head, g = h o f is scored by cosine
/// against the shared ETF; with a learned head (ablation), `classifier`
/// replaces both h and the ETF.
template <Real T>
struct ClientModel {
  std::size_t id = 0;
  std::size_t architecture = 0;
  ClientDims dims;
  Module<T> f;
  Module<T> h;
  Module<T> h_prime;
  std::optional<Module<T>> classifier;
  std::shared_ptr<const SimplexEtf<T>> etf;
  Tensor<T> prototype_projection;  // [K, K'], learned-head mode only

  bool learned_head() const { return classifier.has_value(); }

  std::uint64_t state_hash() const {
    std::uint64_t hsh = detail::mix64(f.state_hash() ^ (h.state_hash() << 1) ^ (h_prime.state_hash() << 2));
    if (classifier) hsh = detail::mix64(hsh ^ classifier->state_hash());
    return hsh;
  }
};

/// Architecture (i mod X) from the palette; parameters keyed by (seed, i).
/// `learned_head` builds the ablation variant without ETF.
template <Real T>
ClientModel<T> build_client(std::size_t i, const Palette& palette, const ClientDims& dims,
                            std::shared_ptr<const SimplexEtf<T>> etf, std::uint64_t seed, bool learned_head = false) {
  detail::require(!palette.empty(), "build_client: palette is empty");
  detail::require(etf != nullptr, "build_client: missing ETF");
  detail::require(etf->dim == dims.etf && etf->classes == dims.classes, "build_client: ETF shape does not match K, C");
  ClientModel<T> m;
  m.id = i;
  m.architecture = i % palette.size();
  m.dims = dims;
  const std::string prefix = "client" + std::to_string(i);
  m.f = Module<T>(prefix + ".f", dims.input, extractor_layers(palette[m.architecture], dims.input, dims.feature), seed);
  m.h = Module<T>(prefix + ".h", dims.feature, {layer::Dense{dims.feature, dims.etf}}, seed);
  m.h_prime = Module<T>(kHPrimeName, dims.feature, {layer::Dense{dims.feature, dims.latent}}, h_prime_seed(seed, 0));
  m.etf = std::move(etf);
  if (learned_head) {
    m.classifier = Module<T>(prefix + ".classifier", dims.feature, {layer::Dense{dims.feature, dims.classes}}, seed);
    // Shared across clients so that projected prototypes are comparable.
    Rng rng(stream_key(seed, "prototype_projection"));
    m.prototype_projection = Tensor<T>(Shape{dims.etf, dims.feature});
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims.feature));
    for (auto& v : m.prototype_projection.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  return m;
}

/// Re-draws h' from (shared_seed, round) only, identically on every client.
template <Real T>
void reinit_h_prime(ClientModel<T>& m, std::size_t round, std::uint64_t shared_seed) {
  m.h_prime.reinitialize(h_prime_seed(shared_seed, round));
}

/// L_i^M = mean over pairs of mse(h'(f(I^c)), Q^c).
template <Real T>
Var knowledge_transfer_loss(Tape<T>& t, ClientModel<T>& m, const PairList<T>& pairs, bool train = true) {
  detail::require(!pairs.empty(), "knowledge_transfer_loss: no image-vector pairs");
  const auto images = stack_images(pairs);
  const auto latents = stack_latents(pairs);
  detail::require_shape(images.cols() == m.dims.input, "knowledge_transfer_loss: image dimension " +
                                                           std::to_string(images.cols()) + " != client input " +
                                                           std::to_string(m.dims.input));
  detail::require_shape(latents.cols() == m.dims.latent, "knowledge_transfer_loss: pair latent dimension " +
                                                             std::to_string(latents.cols()) + " != H");
  const Var feat = m.f.forward(t, t.constant(images), train);
  const Var pred = m.h_prime.forward(t, feat, train);
  return mse(t, pred, t.constant(latents));
}

/// L_i^A on a batch: ArcFace against the ETF, or softmax cross-entropy with
/// the learned head.
template <Real T>
Var classification_loss(Tape<T>& t, ClientModel<T>& m, const Tensor<T>& x, std::vector<std::size_t> labels,
                        const ArcFaceParams& arc, bool train = true) {
  const Var feat = m.f.forward(t, t.constant(x), train);
  if (m.learned_head()) return softmax_cross_entropy(t, m.classifier->forward(t, feat, train), std::move(labels));
  return arcface_loss(t, m.h.forward(t, feat, train), std::move(labels), *m.etf, arc);
}

struct LocalTrainOptions {
  double mu = 50.0;
  std::size_t batch = 10;
  double lr = 0.01;
  std::size_t epochs = 1;
  ArcFaceParams arcface{};
  bool knowledge_transfer = true;  // false: drop the mu * L_i^M term
  bool pairs_as_samples = false;   // true: pair images join the labeled pool, no L_i^M
};

struct LocalTrainResult {
  double loss_a = 0.0;  // mean over steps
  double loss_m = 0.0;  // mean over steps; 0 without pairs
  std::size_t steps = 0;
};

/// Local epochs of SGD on L_i = L_i^A + mu L_i^M. Each epoch shuffles the
/// pool into batches and takes floor(n/batch) steps (one step when n < batch).
/// L_i^M is evaluated on all pairs at every step.
template <Real T>
LocalTrainResult local_train(ClientModel<T>& m, const Dataset& ds, const std::vector<std::size_t>& train,
                             const PairList<T>& pairs, const LocalTrainOptions& opts, std::uint64_t key) {
  detail::require(opts.batch >= 1, "local_train: batch size must be positive");
  const std::size_t pair_samples = opts.pairs_as_samples ? pairs.size() : 0;
  const std::size_t pool_size = train.size() + pair_samples;
  if (pool_size == 0) throw ConfigError("local_train: client " + std::to_string(m.id) + " has an empty train split");
  for (const auto& p : pairs)
    detail::require_shape(p.latent.size() == m.dims.latent, "local_train: pair latent dimension != H");
  const bool use_m = !pairs.empty() && opts.knowledge_transfer && !opts.pairs_as_samples && opts.mu != 0.0;

  Tensor<T> pair_images;
  if (pair_samples) pair_images = stack_images(pairs);

  Sgd<T> sgd(opts.lr);
  LocalTrainResult result;
  std::vector<std::size_t> pool(pool_size);  // < train.size(): dataset sample, else pair index
  for (std::size_t e = 0; e < opts.epochs; ++e) {
    std::iota(pool.begin(), pool.end(), 0);
    Rng rng(stream_key(key, "local.shuffle", e));
    rng.shuffle(pool);
    const std::size_t steps = std::max<std::size_t>(1, pool_size / opts.batch);
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t begin = s * opts.batch;
      const std::size_t end = std::min(pool_size, begin + opts.batch);
      Tensor<T> x(Shape{end - begin, m.dims.input});
      std::vector<std::size_t> labels;
      for (std::size_t k = begin; k < end; ++k) {
        const std::size_t p = pool[k];
        auto row = x.row(k - begin);
        if (p < train.size()) {
          const auto src = ds.sample(train[p]);
          std::copy(src.begin(), src.end(), row.begin());
          labels.push_back(ds.labels[train[p]]);
        } else {
          const auto src = pair_images.row(p - train.size());
          detail::require_shape(src.size() == m.dims.input, "local_train: pair image dimension != client input");
          std::copy(src.begin(), src.end(), row.begin());
          labels.push_back(pairs[p - train.size()].label);
        }
      }
      Tape<T> tape;
      Var loss = classification_loss(tape, m, x, std::move(labels), opts.arcface, true);
      result.loss_a += tape.item(loss);
      if (use_m) {
        const Var lm = knowledge_transfer_loss(tape, m, pairs, true);
        result.loss_m += tape.item(lm);
        loss = add(tape, loss, scale(tape, lm, static_cast<T>(opts.mu)));
      }
      const auto grads = tape.backward(loss);
      sgd.step(m.f, grads);
      sgd.step(m.h, grads);
      sgd.step(m.h_prime, grads);
      if (m.classifier) sgd.step(*m.classifier, grads);
      ++result.steps;
    }
  }
  result.loss_a /= static_cast<double>(result.steps);
  result.loss_m /= static_cast<double>(result.steps);
  return result;
}

/// Evaluation-mode features used for prototypes: g(x) = h(f(x)) in ETF mode,
/// projected f(x) in learned-head mode. [n, K].
template <Real T>
Tensor<T> prototype_features(const ClientModel<T>& m, const Tensor<T>& x) {
  const auto feat = m.f.infer(x);
  if (!m.learned_head()) return m.h.infer(feat);
  const auto& P = m.prototype_projection;
  Tensor<T> out(Shape{feat.rows(), P.rows()});
  for (std::size_t r = 0; r < feat.rows(); ++r)
    for (std::size_t k = 0; k < P.rows(); ++k) {
      T acc{0};
      for (std::size_t j = 0; j < P.cols(); ++j) acc += P.at(k, j) * feat.at(r, j);
      out.at(r, k) = acc;
    }
  return out;
}

/// P_i^c = mean of the client's class-c training features (evaluation mode).
template <Real T>
PrototypeSet<T> extract_prototypes(const ClientModel<T>& m, const Dataset& ds, const std::vector<std::size_t>& train) {
  PrototypeSet<T> set{m.id, m.dims.etf, {}};
  if (train.empty()) return set;
  const auto g = prototype_features(m, ds.rows<T>(train));
  std::map<std::size_t, std::size_t> count;
  for (std::size_t r = 0; r < train.size(); ++r) {
    const std::size_t c = ds.labels[train[r]];
    auto& acc = set.entries[c];
    if (acc.empty()) acc.assign(m.dims.etf, T{0});
    for (std::size_t k = 0; k < m.dims.etf; ++k) acc[k] += g.at(r, k);
    ++count[c];
  }
  for (auto& [c, acc] : set.entries)
    for (auto& v : acc) v /= static_cast<T>(count[c]);
  return set;
}

/// Predicted class per row: argmax cosine to the ETF vectors (ETF mode) or
/// argmax logit (learned head).
template <Real T>
std::vector<std::size_t> predict(const ClientModel<T>& m, const Tensor<T>& x) {
  std::vector<std::size_t> out(x.rows());
  const auto feat = m.f.infer(x);
  if (m.learned_head()) {
    const auto logits = m.classifier->infer(feat);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const auto row = logits.row(r);
      out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
  }
  const auto g = m.h.infer(feat);
  for (std::size_t r = 0; r < x.rows(); ++r) out[r] = predict_class<T>(g.row(r), *m.etf);
  return out;
}

/// Fraction of correctly classified test samples.
template <Real T>
double evaluate(const ClientModel<T>& m, const Dataset& ds, const std::vector<std::size_t>& test) {
  detail::require(!test.empty(), "evaluate: client " + std::to_string(m.id) + " has an empty test split");
  const auto pred = predict(m, ds.rows<T>(test));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) correct += pred[i] == ds.labels[test[i]];
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace fedktl
