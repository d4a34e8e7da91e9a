#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fedktl/client.hpp"
#include "fedktl/config.hpp"
#include "fedktl/datagen.hpp"
#include "fedktl/etf.hpp"
#include "fedktl/generator.hpp"
#include "fedktl/mmd.hpp"
#include "fedktl/server.hpp"

namespace fedktl {

/// ceil(rho * N) distinct ids drawn with a PRNG keyed by (seed, round), sorted.
inline std::vector<std::size_t> select_participants(std::size_t clients, double rho, std::size_t round,
                                                    std::uint64_t seed) {
  detail::require(rho > 0.0 && rho <= 1.0, "select_participants: rho must lie in (0, 1]");
  const auto k = std::min(clients, static_cast<std::size_t>(std::ceil(rho * static_cast<double>(clients) - 1e-9)));
  std::vector<std::size_t> ids(clients);
  std::iota(ids.begin(), ids.end(), 0);
  if (k == clients) return ids;
  Rng rng(stream_key(seed, "participants", round));
  rng.shuffle(ids);
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------------------
// Communication ledger, counted in transmitted elements.

struct CommEntry {
  std::size_t round = 0;
  std::size_t client = 0;
  std::size_t upload = 0;
  std::size_t download = 0;
};

struct CommLedger {
  std::vector<CommEntry> entries;

  void record(std::size_t round, std::size_t client, std::size_t upload, std::size_t download) {
    entries.push_back({round, client, upload, download});
  }
};

struct LedgerTotals {
  std::size_t upload = 0;
  std::size_t download = 0;
};

inline LedgerTotals ledger_totals(const CommLedger& ledger) {
  LedgerTotals t;
  for (const auto& e : ledger.entries) {
    t.upload += e.upload;
    t.download += e.download;
  }
  return t;
}

/// Upload cost of one prototype set: |C_i| * K.
template <Real T>
std::size_t upload_elements(const PrototypeSet<T>& set) {
  return set.element_count();
}

/// Download cost of one pair list: |pairs| * (d_img + H).
template <Real T>
std::size_t download_elements(const PairList<T>& pairs) {
  std::size_t n = 0;
  for (const auto& p : pairs) n += p.element_count();
  return n;
}

// ---------------------------------------------------------------------------

struct ClientRoundStats {
  std::size_t client = 0;
  bool participated = false;
  double accuracy = 0.0;
  double loss_a = std::numeric_limits<double>::quiet_NaN();
  double loss_m = std::numeric_limits<double>::quiet_NaN();
  std::size_t upload = 0;
  std::size_t download = 0;
  std::size_t samples = 0;  // n_i
};

struct RoundReport {
  std::size_t round = 0;
  std::vector<std::size_t> participants;
  std::vector<ClientRoundStats> clients;  // all N, by id
  double mean_accuracy = 0.0;
  double weighted_accuracy = 0.0;  // weights n_i
  double mean_loss_a = 0.0;        // over participants
  double mean_loss_m = 0.0;
  ServerTrainReport server;
  double mmd_before = std::numeric_limits<double>::quiet_NaN();  // F(bank) vs W, before this round's F training
  double mmd_after = std::numeric_limits<double>::quiet_NaN();
  std::size_t pairs = 0;  // pairs generated for the next round
  LedgerTotals ledger;    // this round
};

/// Linear resampling of a signal of length n to length m; identity when n == m.
template <Real T>
std::vector<T> resample_linear(std::span<const T> x, std::size_t m) {
  const std::size_t n = x.size();
  if (n == m) return {x.begin(), x.end()};
  detail::require(n >= 1 && m >= 1, "resample_linear: empty signal");
  std::vector<T> out(m);
  for (std::size_t j = 0; j < m; ++j) {
    const double pos = m == 1 ? 0.0 : static_cast<double>(j) * static_cast<double>(n - 1) / static_cast<double>(m - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, n - 1);
    const double w = pos - static_cast<double>(lo);
    out[j] = static_cast<T>((1.0 - w) * x[lo] + w * x[hi]);
  }
  return out;
}

/// Builds the dataset described by the config (synthetic or KTLD file).
inline Dataset load_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset_path) {
    auto ds = read_dataset_file(*cfg.dataset_path);
    if (ds.classes != cfg.classes)
      throw ConfigError("config: dataset file has C=" + std::to_string(ds.classes) + " but config says classes=" +
                        std::to_string(cfg.classes));
    return ds;
  }
  return make_synthetic_dataset(cfg.classes, cfg.input_dim, cfg.per_class, cfg.cluster_spread, cfg.data_seed);
}

inline PartitionPlan make_partition(const ExperimentConfig& cfg, const Dataset& ds) {
  if (cfg.mode == Mode::single_client) return partition_single(ds, cfg.data_seed);
  if (cfg.partition == PartitionKind::pathological)
    return partition_pathological(ds, cfg.clients, cfg.classes_per_client, cfg.data_seed);
  return partition_dirichlet(ds, cfg.clients, cfg.beta, cfg.data_seed, cfg.min_samples_per_client);
}

/// Full state of one federated trial. The dataset, partition and generator
/// depend on the config's data seed; everything trained depends on `seed`.
template <Real T>
class Simulation {
 public:
  Simulation(ExperimentConfig cfg, std::uint64_t seed, std::shared_ptr<const Dataset> data = nullptr)
      : cfg_(std::move(cfg)),
        seed_(seed),
        data_(data ? std::move(data) : std::make_shared<const Dataset>(load_dataset(cfg_))),
        plan_(make_partition(cfg_, *data_)),
        gen_(cfg_.noise_dim, cfg_.latent_dim, cfg_.image_dim, stream_key(cfg_.data_seed, "generator")),
        server_(cfg_.resolved_etf_dim(), cfg_.latent_dim, stream_key(seed, "server"), cfg_.server_lr) {
    cfg_.validate();
    detail::require(data_->classes == cfg_.classes, "simulation: dataset class count != config classes");
    const std::size_t K = cfg_.resolved_etf_dim();
    etf_ = std::make_shared<const SimplexEtf<T>>(
        synthesize_etf<double>(cfg_.classes, K, stream_key(seed, "etf")).template cast<T>());
    const ClientDims dims{data_->d, cfg_.feature_dim, K, cfg_.latent_dim, cfg_.classes};
    for (std::size_t i = 0; i < plan_.clients(); ++i) {
      if (plan_.splits[i].train.empty() || plan_.splits[i].test.empty())
        throw ConfigError("client " + std::to_string(i) + " has an empty train or test split (" +
                          std::to_string(plan_.assignments[i].size()) + " samples)");
      clients_.push_back(build_client<T>(i, cfg_.palette, dims, etf_, stream_key(seed, "client", i),
                                         cfg_.ablation == Ablation::no_etf));
    }
    if (cfg_.bridge_dir) bridge_.emplace(*cfg_.bridge_dir, cfg_.latent_dim, cfg_.image_dim);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const Dataset& dataset() const { return *data_; }
  const PartitionPlan& plan() const { return plan_; }
  const FrozenGenerator<T>& generator() const { return gen_; }
  const FeatureTransformer<T>& server() const { return server_; }
  const std::vector<ClientModel<T>>& clients() const { return clients_; }
  const PairList<T>& pairs() const { return pairs_; }
  const CentroidMap<T>& centroids() const { return centroids_; }
  const CommLedger& ledger() const { return ledger_; }
  const SimplexEtf<T>& etf() const { return *etf_; }
  std::size_t next_round() const { return round_; }

  /// One pass of the knowledge-transfer loop followed by evaluation of every client.
  RoundReport run_round() {
    const std::size_t round = round_++;
    const bool transfer = cfg_.ablation != Ablation::no_transfer;
    const bool upload = transfer && cfg_.ablation != Ablation::conditional;
    RoundReport report;
    report.round = round;

    // (a) participants
    report.participants = select_participants(clients_.size(), cfg_.participation, round, seed_);

    // (b) download
    PairList<T> delivered = pairs_;
    if (cfg_.download_noise.enabled)
      for (std::size_t k = 0; k < delivered.size(); ++k)
        perturb_gaussian<T>(delivered[k].image, cfg_.download_noise.scale, cfg_.download_noise.coefficient,
                            stream_key(seed_, "noise.NG", round, k));
    const std::size_t download = download_elements(delivered);
    for (auto& p : delivered) p.image = resample_linear<T>(p.image, data_->d);

    // (c) local training
    std::vector<LocalTrainResult> results(report.participants.size());
    auto train_one = [&](std::size_t k) {
      const std::size_t i = report.participants[k];
      try {
        reinit_h_prime(clients_[i], round, seed_);
        results[k] = local_train(clients_[i], *data_, plan_.splits[i].train, delivered, local_options(),
                                 stream_key(seed_, "local", round, i));
      } catch (const Error& e) {
        throw_tagged(e, "round " + std::to_string(round) + " client " + std::to_string(i));
      }
    };
    for_each_parallel(report.participants.size(), train_one);

    // (d) prototypes and (e) upload
    PrototypeBank<T> bank(cfg_.resolved_etf_dim());
    std::vector<std::size_t> uploaded(clients_.size(), 0);
    if (upload) {
      for (std::size_t i : report.participants) {
        auto set = extract_prototypes(clients_[i], *data_, plan_.splits[i].train);
        if (cfg_.upload_noise.enabled)
          for (auto& [c, v] : set.entries)
            perturb_gaussian<T>(v, cfg_.upload_noise.scale, cfg_.upload_noise.coefficient,
                                stream_key(seed_, "noise.NC", round, i, c));
        uploaded[i] = upload_elements(set);
        bank.add(set);
      }
    }

    // (f) server alignment and (g) pairs for the next round
    if (upload && !bank.empty()) {
      if (!cfg_.server_warm_start && round > 0) server_.reset(stream_key(seed_, "server", round));
      report.mmd_before = alignment_mmd(bank, round);
      ServerTrainOptions opts;
      opts.lambda = cfg_.lambda;
      opts.batch = cfg_.server_batch;
      opts.epochs = cfg_.server_epochs;
      opts.use_mmd = cfg_.ablation != Ablation::no_mmd;
      opts.use_mse = cfg_.ablation != Ablation::no_mse;
      report.server = train_feature_transformer(server_, bank, gen_, opts, seed_, round);
      report.mmd_after = alignment_mmd(bank, round);
      centroids_ = compute_global_centroids(server_, bank, centroids_);
      if (bridge_)
        pairs_ = generate_pairs(centroids_, *bridge_, cfg_.latent_dim, round);
      else
        pairs_ = generate_pairs(centroids_, gen_, round);
    } else if (cfg_.ablation == Ablation::conditional && pairs_.empty()) {
      pairs_ = random_latent_pairs(gen_, cfg_.classes, seed_);
    }
    report.pairs = pairs_.size();

    // evaluation of every client
    std::vector<std::size_t> slot(clients_.size(), report.participants.size());
    for (std::size_t k = 0; k < report.participants.size(); ++k) slot[report.participants[k]] = k;
    double weight_sum = 0.0;
    for (std::size_t i = 0; i < clients_.size(); ++i) {
      ClientRoundStats s;
      s.client = i;
      s.samples = plan_.assignments[i].size();
      s.accuracy = evaluate(clients_[i], *data_, plan_.splits[i].test);
      if (slot[i] < report.participants.size()) {
        s.participated = true;
        s.loss_a = results[slot[i]].loss_a;
        s.loss_m = results[slot[i]].loss_m;
        s.download = download;
        s.upload = uploaded[i];
        report.mean_loss_a += s.loss_a;
        report.mean_loss_m += s.loss_m;
      }
      ledger_.record(round, i, s.upload, s.download);
      report.ledger.upload += s.upload;
      report.ledger.download += s.download;
      report.mean_accuracy += s.accuracy;
      report.weighted_accuracy += s.accuracy * static_cast<double>(s.samples);
      weight_sum += static_cast<double>(s.samples);
      report.clients.push_back(s);
    }
    report.mean_accuracy /= static_cast<double>(clients_.size());
    report.weighted_accuracy /= weight_sum;
    if (!report.participants.empty()) {
      report.mean_loss_a /= static_cast<double>(report.participants.size());
      report.mean_loss_m /= static_cast<double>(report.participants.size());
    }
    return report;
  }

  /// Fresh W probe size floor; an equally sized probe leaves a large
  /// finite-sample floor on the V-statistic for small banks.
  static constexpr std::size_t kMmdProbeLatents = 1000;

  /// mmd_rbf between F(bank) (evaluation mode) and a fresh W sample,
  /// median-heuristic bandwidths.
  double alignment_mmd(const PrototypeBank<T>& bank, std::size_t round) const {
    const auto q = transform_bank(server_, bank);
    const auto w = gen_.sample_latents(std::max(q.rows(), kMmdProbeLatents),
                                       stream_key(seed_, "mmd.probe", round));
    return static_cast<double>(mmd_rbf_value(q, w, median_heuristic_bandwidths(q, w)));
  }

 private:
  LocalTrainOptions local_options() const {
    LocalTrainOptions o;
    o.mu = cfg_.mu;
    o.batch = cfg_.batch;
    o.lr = cfg_.client_lr;
    o.epochs = cfg_.local_epochs;
    o.arcface = {cfg_.arcface_scale, cfg_.arcface_margin};
    if (cfg_.ablation == Ablation::contrastive) o.arcface = {1.0, 0.0};
    o.knowledge_transfer = cfg_.ablation != Ablation::no_transfer;
    o.pairs_as_samples = cfg_.ablation == Ablation::no_centroids;
    return o;
  }

  [[noreturn]] static void throw_tagged(const Error& e, const std::string& tag) {
    const std::string msg = tag + ": " + e.what();
    if (dynamic_cast<const ConfigError*>(&e)) throw ConfigError(msg);
    if (dynamic_cast<const ShapeError*>(&e)) throw ShapeError(msg);
    if (dynamic_cast<const NumericError*>(&e)) throw NumericError(msg);
    if (dynamic_cast<const FormatError*>(&e)) throw FormatError(msg);
    throw Error(msg);
  }

  // Work items touch disjoint state; results land in fixed slots, so the
  // outcome does not depend on scheduling.
  void for_each_parallel(std::size_t n, const std::function<void(std::size_t)>& fn) const {
    const std::size_t workers = std::min(cfg_.threads, n);
    if (workers <= 1) {
      for (std::size_t k = 0; k < n; ++k) fn(k);
      return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t k = w; k < n; k += workers) {
          try {
            fn(k);
          } catch (...) {
            errors[k] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  ExperimentConfig cfg_;
  std::uint64_t seed_;
  std::shared_ptr<const Dataset> data_;
  PartitionPlan plan_;
  FrozenGenerator<T> gen_;
  FeatureTransformer<T> server_;
  std::shared_ptr<const SimplexEtf<T>> etf_;
  std::vector<ClientModel<T>> clients_;
  std::optional<GeneratorBridge> bridge_;
  PairList<T> pairs_;
  CentroidMap<T> centroids_;
  CommLedger ledger_;
  std::size_t round_ = 0;
};

// ---------------------------------------------------------------------------
// Reports

/// Shortest round-trip decimal form; "nan" for NaN.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline constexpr const char* kRoundsCsvHeader = "round,client_id,acc,loss_A,loss_M,up_elems,down_elems\n";

/// CSV rows of one round: one per client, then the aggregate row (client_id
/// -1: weighted accuracy, participant-mean losses, ledger totals).
inline std::string rounds_csv_rows(const RoundReport& r) {
  std::string out;
  auto row = [&](const std::string& id, double acc, double la, double lm, std::size_t up, std::size_t down) {
    out += std::to_string(r.round) + ',' + id + ',' + format_number(acc) + ',' + format_number(la) + ',' +
           format_number(lm) + ',' + std::to_string(up) + ',' + std::to_string(down) + '\n';
  };
  for (const auto& c : r.clients) row(std::to_string(c.client), c.accuracy, c.loss_a, c.loss_m, c.upload, c.download);
  row("-1", r.weighted_accuracy, r.mean_loss_a, r.mean_loss_m, r.ledger.upload, r.ledger.download);
  return out;
}

struct TrialResult {
  std::uint64_t seed = 0;
  std::vector<RoundReport> rounds;
  LedgerTotals ledger;

  double final_weighted_accuracy() const { return rounds.empty() ? 0.0 : rounds.back().weighted_accuracy; }
  double final_mean_accuracy() const { return rounds.empty() ? 0.0 : rounds.back().mean_accuracy; }
};

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n - 1); 0 for one trial
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  m.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

struct ExperimentResult {
  std::vector<TrialResult> trials;
  MeanStd weighted_accuracy;
  MeanStd mean_accuracy;
};

/// Per-trial round CSV name: rounds.csv for the first seed, then
/// rounds_seed<seed>.csv.
inline std::string rounds_csv_name(std::size_t trial, std::uint64_t seed) {
  return trial == 0 ? "rounds.csv" : "rounds_seed" + std::to_string(seed) + ".csv";
}

inline nlohmann::json summary_json(const ExperimentConfig& cfg, const ExperimentResult& res) {
  nlohmann::json trials = nlohmann::json::array();
  for (std::size_t k = 0; k < res.trials.size(); ++k) {
    const auto& t = res.trials[k];
    double mmd0 = std::numeric_limits<double>::quiet_NaN(), mmd_final = mmd0;
    if (!t.rounds.empty()) {
      mmd0 = t.rounds.front().mmd_before;
      mmd_final = t.rounds.back().mmd_after;
    }
    auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
    trials.push_back({{"seed", t.seed},
                      {"rounds_csv", rounds_csv_name(k, t.seed)},
                      {"final_weighted_accuracy", t.final_weighted_accuracy()},
                      {"final_mean_accuracy", t.final_mean_accuracy()},
                      {"mmd_round0_before", num(mmd0)},
                      {"mmd_final_after", num(mmd_final)},
                      {"upload_elements", t.ledger.upload},
                      {"download_elements", t.ledger.download}});
  }
  return {{"schema", "ktl-summary/1"},
          {"ablation", to_string(cfg.ablation)},
          {"rounds", cfg.rounds},
          {"trials", trials},
          {"final_weighted_accuracy", {{"mean", res.weighted_accuracy.mean}, {"stddev", res.weighted_accuracy.stddev}}},
          {"final_mean_accuracy", {{"mean", res.mean_accuracy.mean}, {"stddev", res.mean_accuracy.stddev}}},
          {"evaluation",
           {{"clients", "all clients every round, including non-participants"},
            {"weighted_mean", "weights n_i (samples held by client i)"},
            {"stddev", "sample standard deviation over trials"}}}};
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

using RoundCallback = std::function<void(std::uint64_t seed, const RoundReport&)>;

/// Runs every seed of the config for T rounds. When `out` is set, writes the
/// round CSVs, summary.json and config.resolved.json there.
template <Real T = float>
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out = {},
                                const RoundCallback& on_round = {}) {
  cfg.validate();
  if (out) {
    std::filesystem::create_directories(*out);
    write_text_file(*out / "config.resolved.json", config_to_json(cfg).dump(2) + "\n");
  }
  const auto data = std::make_shared<const Dataset>(load_dataset(cfg));
  ExperimentResult res;
  std::vector<double> weighted, plain;
  for (std::size_t k = 0; k < cfg.seeds.size(); ++k) {
    Simulation<T> sim(cfg, cfg.seeds[k], data);
    TrialResult trial;
    trial.seed = cfg.seeds[k];
    std::string csv = kRoundsCsvHeader;
    for (std::size_t r = 0; r < cfg.rounds; ++r) {
      trial.rounds.push_back(sim.run_round());
      csv += rounds_csv_rows(trial.rounds.back());
      if (on_round) on_round(trial.seed, trial.rounds.back());
    }
    trial.ledger = ledger_totals(sim.ledger());
    if (out) write_text_file(*out / rounds_csv_name(k, trial.seed), csv);
    weighted.push_back(trial.final_weighted_accuracy());
    plain.push_back(trial.final_mean_accuracy());
    res.trials.push_back(std::move(trial));
  }
  res.weighted_accuracy = mean_std(weighted);
  res.mean_accuracy = mean_std(plain);
  if (out) write_text_file(*out / "summary.json", summary_json(cfg, res).dump(2) + "\n");
  return res;
}

}  // namespace fedktl
