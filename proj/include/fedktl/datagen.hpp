#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fedktl/binary_io.hpp"
#include "fedktl/error.hpp"
#include "fedktl/rng.hpp"
#include "fedktl/tensor.hpp"

namespace fedktl {

/// Labeled samples with flat float32 features, row-major [n, d].
struct Dataset {
  std::size_t n = 0;
  std::size_t d = 0;
  std::size_t classes = 0;
  std::vector<float> features;
  std::vector<std::uint32_t> labels;

  std::span<const float> sample(std::size_t i) const { return std::span<const float>(features).subspan(i * d, d); }

  template <Real T>
  Tensor<T> rows(std::span<const std::size_t> idx) const {
    Tensor<T> out(Shape{idx.size(), d});
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(sample(idx[i]).begin(), d, out.row(i).begin());
    return out;
  }

  std::vector<std::size_t> labels_of(std::span<const std::size_t> idx) const {
    std::vector<std::size_t> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
    return out;
  }

  /// Sample indices per class.
  std::vector<std::vector<std::size_t>> by_class() const {
    std::vector<std::vector<std::size_t>> out(classes);
    for (std::size_t i = 0; i < n; ++i) out[labels[i]].push_back(i);
    return out;
  }

  void validate() const {
    if (features.size() != n * d || labels.size() != n) throw ShapeError("dataset: buffer sizes disagree with n, d");
    for (auto y : labels)
      if (y >= classes) throw FormatError("label out of range");
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Class c is an isotropic Gaussian with standard deviation `spread` around
/// a random unit-norm center. Samples are stored class by class.
inline Dataset make_synthetic_dataset(std::size_t classes, std::size_t d, std::size_t per_class, double spread,
                                      std::uint64_t seed) {
  detail::require(classes >= 1 && d >= 1 && per_class >= 1, "synthetic dataset: counts must be positive");
  detail::require(spread > 0.0, "synthetic dataset: spread must be positive");
  Dataset ds{classes * per_class, d, classes, {}, {}};
  ds.features.reserve(ds.n * d);
  ds.labels.reserve(ds.n);
  Rng center_rng(stream_key(seed, "dataset.centers"));
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<double> mu(d);
    double norm = 0.0;
    do {
      norm = 0.0;
      for (auto& v : mu) {
        v = center_rng.normal();
        norm += v * v;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (auto& v : mu) v /= norm;
    Rng rng(stream_key(seed, "dataset.samples", c));
    for (std::size_t s = 0; s < per_class; ++s) {
      for (std::size_t j = 0; j < d; ++j) ds.features.push_back(static_cast<float>(mu[j] + spread * rng.normal()));
      ds.labels.push_back(static_cast<std::uint32_t>(c));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// KTLD file: "KTLD" | u32 version=1 | u64 n | u64 d | u32 C | f32[n*d] | u32[n]

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

inline void write_dataset_file(const Dataset& ds, const std::filesystem::path& path) {
  ds.validate();
  io::ByteWriter w;
  w.magic("KTLD");
  w.u32(kDatasetFormatVersion);
  w.u64(ds.n);
  w.u64(ds.d);
  w.u32(static_cast<std::uint32_t>(ds.classes));
  for (float v : ds.features) w.f32(v);
  for (auto y : ds.labels) w.u32(y);
  w.save(path);
}

inline Dataset read_dataset_file(const std::filesystem::path& path) {
  auto r = io::ByteReader::load(path);
  r.expect_magic("KTLD");
  if (const auto v = r.u32(); v != kDatasetFormatVersion)
    throw FormatError("unsupported KTLD version " + std::to_string(v));
  Dataset ds;
  ds.n = r.u64();
  ds.d = r.u64();
  ds.classes = r.u32();
  if (ds.d != 0 && ds.n > (std::uint64_t{1} << 40) / ds.d) throw FormatError("truncated file: implausible n*d");
  r.need(static_cast<std::uint64_t>(ds.n) * ds.d * 4 + static_cast<std::uint64_t>(ds.n) * 4, "payload");
  ds.features.resize(ds.n * ds.d);
  for (auto& v : ds.features) v = r.f32();
  ds.labels.resize(ds.n);
  for (auto& y : ds.labels) {
    y = r.u32();
    if (y >= ds.classes) throw FormatError("label out of range");
  }
  r.expect_end();
  return ds;
}

// ---------------------------------------------------------------------------
// Partitioning

struct ClientSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Per-client sample assignment, class sets, and 3:1 train/test splits.
struct PartitionPlan {
  std::vector<std::vector<std::size_t>> assignments;
  std::vector<std::vector<std::size_t>> classes;  // sorted C_i over the client's samples
  std::vector<ClientSplit> splits;

  std::size_t clients() const { return assignments.size(); }
};

/// Test share of an n-sample client: round(n/4), ties toward train.
inline std::size_t test_count(std::size_t n) { return (n + 1) / 4; }

/// Largest-remainder apportionment of `total` items by `shares` (sum 1).
inline std::vector<std::size_t> apportion(std::size_t total, std::span<const double> shares) {
  std::vector<std::size_t> counts(shares.size());
  std::vector<std::pair<double, std::size_t>> rem(shares.size());
  std::size_t used = 0;
  for (std::size_t i = 0; i < shares.size(); ++i) {
    const double exact = shares[i] * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    used += counts[i];
    rem[i] = {exact - std::floor(exact), i};
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < total; ++k, ++used) ++counts[rem[k % rem.size()].second];
  while (used > total) {  // only reachable through floating-point overshoot
    auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --used;
  }
  return counts;
}

namespace detail {

inline PartitionPlan finalize_plan(const Dataset& ds, std::vector<std::vector<std::size_t>> assignments,
                                   std::uint64_t seed) {
  PartitionPlan plan;
  plan.assignments = std::move(assignments);
  for (std::size_t i = 0; i < plan.assignments.size(); ++i) {
    auto& a = plan.assignments[i];
    std::sort(a.begin(), a.end());
    std::set<std::size_t> cls;
    for (auto s : a) cls.insert(ds.labels[s]);
    plan.classes.emplace_back(cls.begin(), cls.end());
    std::vector<std::size_t> shuffled = a;
    Rng rng(stream_key(seed, "split", i));
    rng.shuffle(shuffled);
    const std::size_t t = test_count(shuffled.size());
    ClientSplit split;
    split.test.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(t));
    split.train.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(t), shuffled.end());
    plan.splits.push_back(std::move(split));
  }
  return plan;
}

}  // namespace detail

/// Pathological split: client i owns `classes_per_client` consecutive classes
/// of a seeded class permutation (wrapping), and each class's samples are
/// divided among its owners with unbalanced shares
/// 0.1/k + 0.9 * Dirichlet(0.5) over the k owners.
inline PartitionPlan partition_pathological(const Dataset& ds, std::size_t clients, std::size_t classes_per_client,
                                            std::uint64_t seed) {
  const std::size_t C = ds.classes;
  detail::require(clients >= 1 && classes_per_client >= 1, "pathological partition: counts must be positive");
  detail::require(classes_per_client <= C, "pathological partition: more classes per client than classes");
  detail::require(clients * classes_per_client >= C, "pathological partition: N * classes_per_client < C");
  std::vector<std::size_t> order(C);
  std::iota(order.begin(), order.end(), 0);
  Rng perm(stream_key(seed, "pathological.classes"));
  perm.shuffle(order);
  std::vector<std::vector<std::size_t>> owners(C);
  for (std::size_t i = 0; i < clients; ++i)
    for (std::size_t j = 0; j < classes_per_client; ++j) owners[order[(i * classes_per_client + j) % C]].push_back(i);

  const auto pools = ds.by_class();
  std::vector<std::vector<std::size_t>> assignments(clients);
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t k = owners[c].size();
    auto pool = pools[c];
    detail::require(pool.size() >= k, "pathological partition: class " + std::to_string(c) +
                                          " has fewer samples than owning clients");
    Rng rng(stream_key(seed, "pathological.shares", c));
    rng.shuffle(pool);
    auto q = rng.dirichlet(k, 0.5);
    for (auto& s : q) s = 0.1 / static_cast<double>(k) + 0.9 * s;
    auto counts = apportion(pool.size(), q);
    // Every owner receives at least one sample.
    for (std::size_t j = 0; j < k; ++j)
      if (counts[j] == 0) {
        auto donor = std::max_element(counts.begin(), counts.end());
        --*donor;
        ++counts[j];
      }
    std::size_t pos = 0;
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t m = 0; m < counts[j]; ++m) assignments[owners[c][j]].push_back(pool[pos++]);
  }
  return detail::finalize_plan(ds, std::move(assignments), seed);
}

/// Practical split: for every class, client shares q ~ Dir(beta * 1_N) with
/// largest-remainder rounding. Allocations are redrawn (bounded) until every
/// client holds at least `min_per_client` samples.
inline PartitionPlan partition_dirichlet(const Dataset& ds, std::size_t clients, double beta, std::uint64_t seed,
                                         std::size_t min_per_client = 1, int max_attempts = 1000) {
  detail::require(beta > 0.0, "dirichlet partition: beta must be positive");
  detail::require(clients >= 1, "dirichlet partition: need at least one client");
  detail::require(min_per_client >= 1, "dirichlet partition: min_per_client must be positive");
  detail::require(ds.n >= clients * min_per_client, "dirichlet partition: not enough samples for every client");
  const auto pools = ds.by_class();
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    std::vector<std::vector<std::size_t>> assignments(clients);
    for (std::size_t c = 0; c < ds.classes; ++c) {
      auto pool = pools[c];
      Rng rng(stream_key(seed, "dirichlet", attempt, c));
      rng.shuffle(pool);
      const auto q = rng.dirichlet(clients, beta);
      const auto counts = apportion(pool.size(), q);
      std::size_t pos = 0;
      for (std::size_t i = 0; i < clients; ++i)
        for (std::size_t m = 0; m < counts[i]; ++m) assignments[i].push_back(pool[pos++]);
    }
    const bool ok = std::all_of(assignments.begin(), assignments.end(),
                                [&](const auto& a) { return a.size() >= min_per_client; });
    if (ok) return detail::finalize_plan(ds, std::move(assignments), seed);
  }
  throw ConfigError("dirichlet partition: a client received too few samples after " + std::to_string(max_attempts) +
                    " redraws");
}

/// Every sample to client 0.
inline PartitionPlan partition_single(const Dataset& ds, std::uint64_t seed) {
  std::vector<std::size_t> all(ds.n);
  std::iota(all.begin(), all.end(), 0);
  return detail::finalize_plan(ds, {std::move(all)}, seed);
}

}  // namespace fedktl
