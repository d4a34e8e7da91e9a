// fedktl: run experiments, generate datasets, validate configs.

#include <cstdint>
#include <cstdio>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "fedktl/fedktl.hpp"

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

// Parses "C=10 d=32 per-class=200 [spread=0.5] [seed=0]" style assignments.
std::map<std::string, std::string> parse_assignments(const std::vector<std::string>& items) {
  std::map<std::string, std::string> kv;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw fedktl::ConfigError("expected key=value, got '" + item + "'");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return kv;
}

template <class V>
V take(std::map<std::string, std::string>& kv, const std::string& key, std::optional<V> fallback = std::nullopt) {
  const auto it = kv.find(key);
  if (it == kv.end()) {
    if (fallback) return *fallback;
    throw fedktl::ConfigError("gen-data: missing " + key + "=..");
  }
  V v{};
  try {
    if constexpr (std::is_floating_point_v<V>)
      v = std::stod(it->second);
    else
      v = static_cast<V>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw fedktl::ConfigError("gen-data: bad value for " + key + ": '" + it->second + "'");
  }
  kv.erase(it);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FedKTL desk-scale simulator"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run an experiment");
  std::string config_path, ablation, out_dir = "out", bridge_dir;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--seed", seed, "Run a single trial with this seed");
  run->add_option("--ablation", ablation, "Ablation variant");
  run->add_option("--out", out_dir, "Output directory");
  run->add_option("--bridge", bridge_dir, "Generator bridge directory");
  run->add_flag("--quiet", quiet, "No per-round progress");

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset file");
  std::vector<std::string> synthetic;
  std::string data_out;
  gen->add_option("--synthetic", synthetic, "C=.. d=.. per-class=.. [spread=..] [seed=..]")->required();
  gen->add_option("--out", data_out, "Output .ktld path")->required();

  auto* validate = app.add_subcommand("validate", "Check a config file");
  std::string validate_path;
  validate->add_option("--config", validate_path, "Experiment config (JSON)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  fedktl::ExperimentConfig cfg;
  try {
    if (*validate) {
      fedktl::load_config(validate_path);
      std::cout << "ok\n";
      return 0;
    }
    if (*gen) {
      auto kv = parse_assignments(synthetic);
      const auto C = take<std::size_t>(kv, "C");
      const auto d = take<std::size_t>(kv, "d");
      const auto per_class = take<std::size_t>(kv, "per-class");
      const auto spread = take<double>(kv, "spread", 0.5);
      const auto data_seed = take<std::uint64_t>(kv, "seed", 0);
      if (!kv.empty()) throw fedktl::ConfigError("gen-data: unknown key '" + kv.begin()->first + "'");
      if (C < 1 || d < 1 || per_class < 1 || !(spread > 0.0))
        throw fedktl::ConfigError("gen-data: C, d, per-class and spread must be positive");
      fedktl::write_dataset_file(fedktl::make_synthetic_dataset(C, d, per_class, spread, data_seed), data_out);
      std::cout << "wrote " << C * per_class << " samples to " << data_out << "\n";
      return 0;
    }
    cfg = fedktl::load_config(config_path);
    if (seed) cfg.seeds = {*seed};
    if (!ablation.empty()) cfg.ablation = fedktl::parse_ablation(ablation);
    if (!bridge_dir.empty()) cfg.bridge_dir = bridge_dir;
    cfg.validate();
  } catch (const fedktl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }

  try {
    auto progress = [&](std::uint64_t s, const fedktl::RoundReport& r) {
      if (quiet) return;
      std::fprintf(stderr, "seed %llu round %zu: acc %.4f (weighted %.4f) loss_A %.4f loss_M %.4f\n",
                   static_cast<unsigned long long>(s), r.round, r.mean_accuracy, r.weighted_accuracy, r.mean_loss_a,
                   r.mean_loss_m);
    };
    const auto res = fedktl::run_experiment<float>(cfg, std::filesystem::path(out_dir), progress);
    std::printf("final weighted accuracy: %.4f +- %.4f over %zu trial(s)\n", res.weighted_accuracy.mean,
                res.weighted_accuracy.stddev, res.trials.size());
  } catch (const fedktl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
