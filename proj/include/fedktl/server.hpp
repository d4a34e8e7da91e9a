#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedktl/autograd.hpp"
#include "fedktl/generator.hpp"
#include "fedktl/knowledge.hpp"
#include "fedktl/mmd.hpp"
#include "fedktl/module.hpp"
#include "fedktl/optim.hpp"
#include "fedktl/rng.hpp"

namespace fedktl {

/// All prototypes uploaded in one round, ordered by (client, class).
template <Real T>
class PrototypeBank {
 public:
  struct Entry {
    std::size_t client;
    std::size_t label;
    std::vector<T> prototype;
  };

  PrototypeBank() = default;
  explicit PrototypeBank(std::size_t dim) : dim_(dim) {}

  /// Adds every entry of `set`. Sets must arrive in ascending owner order.
  void add(const PrototypeSet<T>& set) {
    if (dim_ == 0) dim_ = set.dim;
    detail::require_shape(set.dim == dim_, "prototype bank: prototype dimension mismatch");
    if (!entries_.empty() && set.owner <= entries_.back().client && !set.entries.empty())
      throw Error("prototype bank: sets must be added in ascending client order");
    for (const auto& [label, proto] : set.entries) {
      detail::require_shape(proto.size() == dim_, "prototype bank: prototype length mismatch");
      entries_.push_back(Entry{set.owner, label, proto});
    }
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t dim() const { return dim_; }
  const std::vector<Entry>& entries() const { return entries_; }

  /// [size, K] matrix of prototypes.
  Tensor<T> matrix() const {
    Tensor<T> m(Shape{entries_.size(), dim_});
    for (std::size_t i = 0; i < entries_.size(); ++i)
      std::copy(entries_[i].prototype.begin(), entries_[i].prototype.end(), m.row(i).begin());
    return m;
  }

  /// M_c: clients that uploaded class c.
  std::map<std::size_t, std::vector<std::size_t>> owners() const {
    std::map<std::size_t, std::vector<std::size_t>> m;
    for (const auto& e : entries_) m[e.label].push_back(e.client);
    return m;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<Entry> entries_;
};

/// Server-side map from ETF space (K) into the generator's latent space (H):
/// FC(K->H), BatchNorm(H), FC(H->H), trained with Adam.
template <Real T>
struct FeatureTransformer {
  Module<T> net;
  Adam<T> optimizer;

  FeatureTransformer(std::size_t etf_dim, std::size_t latent_dim, std::uint64_t seed, double lr)
      : net("server.F", etf_dim,
            {layer::Dense{etf_dim, latent_dim}, layer::BatchNorm{latent_dim}, layer::Dense{latent_dim, latent_dim}},
            seed),
        optimizer(AdamOptions{.lr = lr}) {}

  /// Fresh parameters and optimizer state.
  void reset(std::uint64_t seed) {
    net.reinitialize(seed);
    optimizer.reset();
  }
};

/// L^MSE over F's outputs for every bank row:
///   (1/|classes|) sum_c (1/|M_c|) sum_{i in M_c} mse(F(P_i^c), Q^c),
/// with Q^c the mean of F(P_j^c) over M_c. Gradients flow through both terms.
template <Real T>
Var mse_centroid_loss(Tape<T>& t, Var outputs, const PrototypeBank<T>& bank) {
  detail::require(!bank.empty(), "mse_centroid_loss: empty prototype bank");
  detail::require_shape(t.value(outputs).rows() == bank.size(), "mse_centroid_loss: output rows != bank size");
  std::map<std::size_t, std::size_t> group_of_label;
  for (const auto& e : bank.entries()) group_of_label.emplace(e.label, 0);
  std::size_t g = 0;
  for (auto& [label, idx] : group_of_label) idx = g++;
  std::vector<std::size_t> group(bank.size());
  std::vector<std::size_t> count(g, 0);
  for (std::size_t r = 0; r < bank.size(); ++r) {
    group[r] = group_of_label.at(bank.entries()[r].label);
    ++count[group[r]];
  }
  std::vector<T> weights(bank.size());
  for (std::size_t r = 0; r < bank.size(); ++r)
    weights[r] = T{1} / (static_cast<T>(g) * static_cast<T>(count[group[r]]));
  const Var centroids = segment_mean(t, outputs, group, g);
  const Var targets = gather_rows(t, centroids, group);
  return weighted_row_mse(t, outputs, targets, std::move(weights));
}

/// L^MSE with F applied to the bank in training mode.
template <Real T>
Var mse_centroid_loss(Tape<T>& t, Module<T>& F, const PrototypeBank<T>& bank) {
  return mse_centroid_loss(t, F.forward(t, t.constant(bank.matrix()), true), bank);
}

struct ServerTrainOptions {
  double lambda = 1.0;        // weight of L^MSE
  std::size_t batch = 100;    // B_S
  std::size_t epochs = 100;   // E_S
  bool use_mmd = true;        // false: ablation without L^MMD
  bool use_mse = true;        // false: ablation without L^MSE
};

struct ServerTrainReport {
  std::vector<double> loss;  // total loss per epoch (mean over minibatches)
  std::vector<double> mmd;   // L^MMD per epoch (mean over minibatches)
  std::vector<double> mse;   // L^MSE per epoch (mean over minibatches)
};

/// Key of the W batch drawn for (round, epoch, minibatch).
inline std::uint64_t latent_batch_key(std::uint64_t seed, std::size_t round, std::size_t epoch, std::size_t batch) {
  return stream_key(seed, "server.w", round, epoch, batch);
}

/// One optimizer step of F on L = L^MMD(F(P_batch), W) + lambda L^MSE(F, bank).
/// F is applied once to the whole bank in training mode; the minibatch rows
/// are gathered from that output. Returns {total, mmd, mse}.
template <Real T>
std::array<double, 3> feature_transformer_step(FeatureTransformer<T>& ft, const PrototypeBank<T>& bank,
                                               const std::vector<std::size_t>& batch, const Tensor<T>& latent_batch,
                                               const ServerTrainOptions& opts) {
  Tape<T> tape;
  const Var out = ft.net.forward(tape, tape.constant(bank.matrix()), true);
  std::optional<Var> total;
  double mmd_v = 0.0, mse_v = 0.0;
  if (opts.use_mmd) {
    const Var xb = gather_rows(tape, out, batch);
    const Var w = tape.constant(latent_batch);
    const Var l = mmd_rbf(tape, xb, w, median_heuristic_bandwidths(tape.value(xb), latent_batch));
    mmd_v = tape.item(l);
    total = l;
  }
  if (opts.use_mse && opts.lambda != 0.0) {
    const Var l = mse_centroid_loss(tape, out, bank);
    mse_v = tape.item(l);
    const Var weighted = scale(tape, l, static_cast<T>(opts.lambda));
    total = total ? add(tape, *total, weighted) : weighted;
  }
  if (!total) return {0.0, 0.0, 0.0};
  const double value = tape.item(*total);
  if (!std::isfinite(value)) throw NumericError("feature transformer: non-finite loss");
  const auto grads = tape.backward(*total);
  ft.optimizer.step(ft.net, grads);
  return {value, mmd_v, mse_v};
}

/// E_S epochs over the bank. Each epoch shuffles the bank into minibatches of
/// at most B_S entries and takes one Adam step per minibatch against a fresh
/// W sample of the same size.
template <Real T>
ServerTrainReport train_feature_transformer(FeatureTransformer<T>& ft, const PrototypeBank<T>& bank,
                                            const FrozenGenerator<T>& gen, const ServerTrainOptions& opts,
                                            std::uint64_t seed, std::size_t round) {
  detail::require(!bank.empty(), "train_feature_transformer: empty prototype bank");
  detail::require(opts.batch >= 1, "train_feature_transformer: batch size must be positive");
  detail::require_shape(bank.dim() == ft.net.input_width(), "train_feature_transformer: prototype dimension != K");
  ServerTrainReport report;
  std::vector<std::size_t> order(bank.size());
  for (std::size_t e = 0; e < opts.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(stream_key(seed, "server.shuffle", round, e));
    rng.shuffle(order);
    double tot = 0.0, mm = 0.0, ms = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0, b = 0; start < order.size(); start += opts.batch, ++b) {
      const std::size_t stop = std::min(order.size(), start + opts.batch);
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(stop));
      const auto w = opts.use_mmd ? gen.sample_latents(batch.size(), latent_batch_key(seed, round, e, b))
                                  : Tensor<T>(Shape{0, gen.latent_dim()});
      try {
        const auto r = feature_transformer_step(ft, bank, batch, w, opts);
        tot += r[0];
        mm += r[1];
        ms += r[2];
      } catch (const NumericError& err) {
        throw NumericError("server round " + std::to_string(round) + " epoch " + std::to_string(e) + ": " +
                           err.what());
      }
      ++steps;
    }
    report.loss.push_back(tot / static_cast<double>(steps));
    report.mmd.push_back(mm / static_cast<double>(steps));
    report.mse.push_back(ms / static_cast<double>(steps));
  }
  return report;
}

template <Real T>
using CentroidMap = std::map<std::size_t, std::vector<T>>;

/// Q^c = mean of F(P_i^c) over M_c in evaluation mode. Classes absent from
/// this bank keep their entry from `previous` when one exists.
template <Real T>
CentroidMap<T> compute_global_centroids(const FeatureTransformer<T>& ft, const PrototypeBank<T>& bank,
                                        const CentroidMap<T>& previous = {}) {
  CentroidMap<T> out = previous;
  if (bank.empty()) return out;
  const auto q = ft.net.infer(bank.matrix());
  std::map<std::size_t, std::pair<std::vector<T>, std::size_t>> acc;
  for (std::size_t r = 0; r < bank.size(); ++r) {
    auto& [sum, count] = acc[bank.entries()[r].label];
    if (sum.empty()) sum.assign(q.cols(), T{0});
    for (std::size_t j = 0; j < q.cols(); ++j) sum[j] += q.at(r, j);
    ++count;
  }
  for (auto& [label, sc] : acc) {
    for (auto& v : sc.first) v /= static_cast<T>(sc.second);
    out[label] = std::move(sc.first);
  }
  return out;
}

/// F applied to every bank entry (evaluation mode).
template <Real T>
Tensor<T> transform_bank(const FeatureTransformer<T>& ft, const PrototypeBank<T>& bank) {
  return ft.net.infer(bank.matrix());
}

namespace detail {

template <Real T>
PairList<T> make_pairs(const CentroidMap<T>& centroids, const Tensor<T>& images, std::size_t round) {
  PairList<T> pairs;
  std::size_t i = 0;
  for (const auto& [label, q] : centroids) {
    const auto img = images.row(i++);
    pairs.push_back(ImageVectorPair<T>{label, q, std::vector<T>(img.begin(), img.end()), round});
  }
  return pairs;
}

template <Real T>
Tensor<T> centroid_matrix(const CentroidMap<T>& centroids, std::size_t latent_dim) {
  Tensor<T> m(Shape{centroids.size(), latent_dim});
  std::size_t i = 0;
  for (const auto& [label, q] : centroids) {
    detail::require_shape(q.size() == latent_dim, "generate_pairs: latent dimension mismatch");
    std::copy(q.begin(), q.end(), m.row(i++).begin());
  }
  return m;
}

}  // namespace detail

/// One pair per available class: I^c = G_s(Q^c). Ordered by class.
template <Real T>
PairList<T> generate_pairs(const CentroidMap<T>& centroids, const FrozenGenerator<T>& gen, std::size_t round) {
  detail::require(!centroids.empty(), "generate_pairs: no centroids");
  const auto latents = detail::centroid_matrix(centroids, gen.latent_dim());
  return detail::make_pairs(centroids, gen.synthesize(latents), round);
}

/// As generate_pairs, with synthesis delegated to an external generator.
template <Real T>
PairList<T> generate_pairs(const CentroidMap<T>& centroids, GeneratorBridge& bridge, std::size_t latent_dim,
                           std::size_t round) {
  detail::require(!centroids.empty(), "generate_pairs: no centroids");
  const auto latents = detail::centroid_matrix(centroids, latent_dim);
  bridge.export_latents(latents, round);
  return detail::make_pairs(centroids, bridge.template import_images<T>(round), round);
}

/// Fixed pairs from C random W latents, used when upload and alignment are
/// disabled (conditional-generator variant).
template <Real T>
PairList<T> random_latent_pairs(const FrozenGenerator<T>& gen, std::size_t classes, std::uint64_t seed) {
  const auto latents = gen.sample_latents(classes, stream_key(seed, "server.random_pairs"));
  CentroidMap<T> centroids;
  for (std::size_t c = 0; c < classes; ++c) {
    const auto r = latents.row(c);
    centroids[c] = std::vector<T>(r.begin(), r.end());
  }
  return detail::make_pairs(centroids, gen.synthesize(latents), 0);
}

/// Independently per element: with probability p add Normal(0, s^2).
template <Real T>
void perturb_gaussian(std::span<T> values, double s, double p, std::uint64_t key) {
  detail::require(s >= 0.0, "perturb_gaussian: scale must be non-negative");
  detail::require(p >= 0.0 && p <= 1.0, "perturb_gaussian: coefficient must lie in [0,1]");
  if (s == 0.0 || p == 0.0) return;
  Rng rng(key);
  for (auto& v : values) {
    const bool hit = rng.uniform() < p;
    const double noise = rng.normal();
    if (hit) v = static_cast<T>(v + s * noise);
  }
}

template <Real T>
Tensor<T> perturb_gaussian(Tensor<T> t, double s, double p, std::uint64_t key) {
  perturb_gaussian(t.data(), s, p, key);
  return t;
}

}  // namespace fedktl
