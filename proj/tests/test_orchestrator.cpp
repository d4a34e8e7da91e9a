#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "test_helpers.hpp"

using namespace fedktl;
namespace fs = std::filesystem;

namespace {

ExperimentConfig toy_config() {
  ExperimentConfig c;
  c.classes = 3;
  c.input_dim = 8;
  c.per_class = 24;
  c.clients = 4;
  c.beta = 0.5;
  c.palette = {{1, 8, false}, {2, 12, true}};
  c.feature_dim = 8;
  c.latent_dim = 4;
  c.noise_dim = 6;
  c.image_dim = 12;
  c.server_epochs = 3;
  c.server_batch = 5;
  c.rounds = 2;
  c.arcface_scale = 8.0;
  c.arcface_margin = 0.2;
  c.mu = 2.0;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "fedktl_tests" / name;
  fs::remove_all(dir);
  return dir;
}

std::size_t train_classes(const Simulation<double>& sim, std::size_t i) {
  std::set<std::size_t> s;
  for (auto idx : sim.plan().splits[i].train) s.insert(sim.dataset().labels[idx]);
  return s.size();
}

}  // namespace

TEST(Participants, FullParticipationSelectsEveryone) {
  const auto p = select_participants(7, 1.0, 3, 1);
  EXPECT_EQ(p, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6}));
}

TEST(Participants, HalfOfFiftyIsTwentyFiveDistinctSorted) {
  for (std::size_t round = 0; round < 20; ++round) {
    const auto p = select_participants(50, 0.5, round, 9);
    ASSERT_EQ(p.size(), 25u);
    EXPECT_TRUE(std::is_sorted(p.begin(), p.end()));
    EXPECT_EQ(std::set<std::size_t>(p.begin(), p.end()).size(), 25u);
    EXPECT_LT(p.back(), 50u);
    EXPECT_EQ(p, select_participants(50, 0.5, round, 9));
  }
  EXPECT_NE(select_participants(50, 0.5, 0, 9), select_participants(50, 0.5, 1, 9));
  EXPECT_EQ(select_participants(10, 0.11, 0, 1).size(), 2u);  // ceil
  EXPECT_THROW(select_participants(10, 0.0, 0, 1), ConfigError);
}

TEST(Ledger, ElementFormulas) {
  PrototypeSet<float> set{0, 100, {}};
  for (std::size_t c = 0; c < 10; ++c) set.entries[c] = std::vector<float>(100);
  EXPECT_EQ(upload_elements(set), 1000u);
  PairList<float> pairs(10);
  for (auto& p : pairs) {
    p.latent.resize(32);
    p.image.resize(192);
  }
  EXPECT_EQ(download_elements(pairs), 2240u);
  CommLedger ledger;
  ledger.record(0, 0, 1000, 0);
  ledger.record(1, 0, 1000, 2240);
  const auto t = ledger_totals(ledger);
  EXPECT_EQ(t.upload, 2000u);
  EXPECT_EQ(t.download, 2240u);
}

TEST(Resample, IdentityEndpointsAndLinearity) {
  const std::vector<double> x{1, 2, 3, 4, 5};
  EXPECT_EQ(resample_linear<double>(x, 5), x);
  const auto y = resample_linear<double>(x, 9);
  ASSERT_EQ(y.size(), 9u);
  for (std::size_t j = 0; j < 9; ++j) EXPECT_NEAR(y[j], 1.0 + 0.5 * static_cast<double>(j), 1e-12);
  const auto z = resample_linear<double>(x, 3);
  EXPECT_EQ(z, (std::vector<double>{1, 3, 5}));
}

TEST(Simulation, RoundZeroHasNoPairsThenLedgerFollowsFormulas) {
  Simulation<double> sim(toy_config(), 1);
  const auto r0 = sim.run_round();
  const std::size_t K = 3;
  for (const auto& c : r0.clients) {
    ASSERT_TRUE(c.participated);
    EXPECT_EQ(c.loss_m, 0.0);
    EXPECT_EQ(c.download, 0u);
    EXPECT_EQ(c.upload, train_classes(sim, c.client) * K);
  }
  EXPECT_EQ(r0.pairs, sim.centroids().size());
  EXPECT_GT(r0.pairs, 0u);
  const auto r1 = sim.run_round();
  for (const auto& c : r1.clients) {
    EXPECT_EQ(c.download, r0.pairs * (12 + 4));
    EXPECT_GT(c.loss_m, 0.0);
    EXPECT_LE(c.upload, c.download);
  }
  const auto totals = ledger_totals(sim.ledger());
  EXPECT_EQ(totals.upload, r0.ledger.upload + r1.ledger.upload);
  EXPECT_EQ(totals.download, r1.ledger.download);
}

TEST(Simulation, NoTransferAblationHasAnAllZeroLedger) {
  auto cfg = toy_config();
  cfg.ablation = Ablation::no_transfer;
  Simulation<double> sim(cfg, 1);
  for (int r = 0; r < 3; ++r) {
    const auto rep = sim.run_round();
    EXPECT_EQ(rep.pairs, 0u);
    EXPECT_TRUE(std::isnan(rep.mmd_before));
  }
  for (const auto& e : sim.ledger().entries) {
    EXPECT_EQ(e.upload, 0u);
    EXPECT_EQ(e.download, 0u);
  }
}

TEST(Simulation, NonParticipantsAreUntouched) {
  auto cfg = toy_config();
  cfg.clients = 6;
  cfg.participation = 0.5;
  Simulation<double> sim(cfg, 2);
  for (int r = 0; r < 3; ++r) {
    std::vector<std::uint64_t> before;
    for (const auto& c : sim.clients()) before.push_back(c.state_hash());
    const auto rep = sim.run_round();
    ASSERT_EQ(rep.participants.size(), 3u);
    for (const auto& s : rep.clients) {
      if (s.participated) {
        EXPECT_NE(sim.clients()[s.client].state_hash(), before[s.client]);
      } else {
        EXPECT_EQ(sim.clients()[s.client].state_hash(), before[s.client]);
        EXPECT_TRUE(std::isnan(s.loss_a));
        EXPECT_EQ(s.upload + s.download, 0u);
      }
    }
  }
}

TEST(Simulation, ThreadCountDoesNotChangeResults) {
  auto a_cfg = toy_config(), b_cfg = toy_config();
  b_cfg.threads = 3;
  Simulation<double> a(a_cfg, 4), b(b_cfg, 4);
  for (int r = 0; r < 3; ++r) {
    const auto ra = a.run_round(), rb = b.run_round();
    EXPECT_EQ(rounds_csv_rows(ra), rounds_csv_rows(rb));
  }
  for (std::size_t i = 0; i < a.clients().size(); ++i) EXPECT_EQ(a.clients()[i].state_hash(), b.clients()[i].state_hash());
  EXPECT_EQ(a.server().net.state_hash(), b.server().net.state_hash());
}

TEST(Simulation, HPrimeAgreesAcrossClientsAfterReinit) {
  Simulation<double> sim(toy_config(), 3);
  sim.run_round();
  // h' was re-drawn and then trained locally, so only the fresh draw is shared
  auto a = sim.clients()[0], b = sim.clients()[1];
  reinit_h_prime(a, 5, 3);
  reinit_h_prime(b, 5, 3);
  EXPECT_EQ(a.h_prime.state_hash(), b.h_prime.state_hash());
}

TEST(Simulation, ServerWarmStartAndColdStartDiffer) {
  auto cold = toy_config();
  cold.server_warm_start = false;
  Simulation<double> a(toy_config(), 5), b(cold, 5);
  a.run_round();
  b.run_round();
  EXPECT_EQ(a.server().net.state_hash(), b.server().net.state_hash());
  a.run_round();
  b.run_round();
  EXPECT_NE(a.server().net.state_hash(), b.server().net.state_hash());
}

TEST(Simulation, EmptySplitIsAConfigError) {
  auto cfg = toy_config();
  cfg.per_class = 2;
  cfg.min_samples_per_client = 1;
  cfg.clients = 6;
  EXPECT_THROW(Simulation<double>(cfg, 0), ConfigError);
}

class AblationRuns : public ::testing::TestWithParam<Ablation> {};

TEST_P(AblationRuns, TwoRoundsProduceFiniteReports) {
  auto cfg = toy_config();
  cfg.ablation = GetParam();
  Simulation<double> sim(cfg, 1);
  for (int r = 0; r < 2; ++r) {
    const auto rep = sim.run_round();
    EXPECT_GE(rep.weighted_accuracy, 0.0);
    EXPECT_LE(rep.weighted_accuracy, 1.0);
    EXPECT_TRUE(std::isfinite(rep.mean_loss_a));
  }
  if (GetParam() == Ablation::conditional) {
    EXPECT_EQ(sim.pairs().size(), cfg.classes);
    for (const auto& e : sim.ledger().entries) EXPECT_EQ(e.upload, 0u);
  }
  if (GetParam() == Ablation::no_centroids)
    for (double v : {sim.run_round().mean_loss_m}) EXPECT_EQ(v, 0.0);
}

INSTANTIATE_TEST_SUITE_P(All, AblationRuns,
                         ::testing::Values(Ablation::none, Ablation::no_transfer, Ablation::no_mse, Ablation::no_mmd,
                                           Ablation::no_etf, Ablation::no_centroids, Ablation::conditional,
                                           Ablation::contrastive),
                         [](const auto& info) { return std::string("variant") + std::to_string(static_cast<int>(info.param)); });

TEST(Simulation, NoiseOptionsPerturbDeterministically) {
  auto cfg = toy_config();
  cfg.upload_noise = {true, 0.05, 0.2};
  cfg.download_noise = {true, 0.2, 0.2};
  Simulation<double> a(cfg, 1), b(cfg, 1), clean(toy_config(), 1);
  for (int r = 0; r < 2; ++r) {
    EXPECT_EQ(rounds_csv_rows(a.run_round()), rounds_csv_rows(b.run_round()));
    clean.run_round();
  }
  EXPECT_NE(a.server().net.state_hash(), clean.server().net.state_hash());
}

TEST(Simulation, SingleClientMode) {
  auto cfg = toy_config();
  cfg.mode = Mode::single_client;
  cfg.clients = 1;
  Simulation<double> sim(cfg, 1);
  EXPECT_EQ(sim.plan().assignments[0].size(), sim.dataset().n);
  sim.run_round();
  const auto r = sim.run_round();
  EXPECT_EQ(r.clients.size(), 1u);
  EXPECT_EQ(r.pairs, cfg.classes);
}

TEST(Reports, CsvRowsAndNumberFormatting) {
  EXPECT_EQ(format_number(std::numeric_limits<double>::quiet_NaN()), "nan");
  EXPECT_EQ(format_number(0.25), "0.25");
  EXPECT_EQ(format_number(1.0), "1");
  auto cfg = toy_config();
  cfg.participation = 0.5;
  Simulation<double> sim(cfg, 1);
  const auto rows = rounds_csv_rows(sim.run_round());
  EXPECT_EQ(std::count(rows.begin(), rows.end(), '\n'), 5);
  EXPECT_NE(rows.find(",nan,nan,0,0\n"), std::string::npos);
  EXPECT_NE(rows.find("0,-1,"), std::string::npos);
}

TEST(Reports, MeanAndSampleStddev) {
  const auto m = mean_std({1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(m.mean, 2.0);
  EXPECT_DOUBLE_EQ(m.stddev, 1.0);
  EXPECT_EQ(mean_std({4.0}).stddev, 0.0);
}

TEST(Experiment, WritesOutputsAndAggregatesSeeds) {
  auto cfg = toy_config();
  cfg.rounds = 1;
  cfg.seeds = {3, 4, 5};
  const auto dir = fresh_dir("experiment");
  const auto res = run_experiment<double>(cfg, dir);
  ASSERT_EQ(res.trials.size(), 3u);
  for (const auto* f : {"config.resolved.json", "summary.json", "rounds.csv", "rounds_seed4.csv", "rounds_seed5.csv"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  std::vector<double> acc;
  for (const auto& t : res.trials) acc.push_back(t.final_weighted_accuracy());
  const auto ms = mean_std(acc);
  EXPECT_DOUBLE_EQ(res.weighted_accuracy.mean, ms.mean);
  EXPECT_DOUBLE_EQ(res.weighted_accuracy.stddev, ms.stddev);
  const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(summary["schema"], "ktl-summary/1");
  EXPECT_EQ(summary["trials"].size(), 3u);
  const auto csv = slurp(dir / "rounds.csv");
  EXPECT_EQ(csv.rfind(kRoundsCsvHeader, 0), 0u);
  const auto resolved = load_config(dir / "config.resolved.json");
  EXPECT_EQ(config_to_json(resolved), config_to_json(cfg));
}

TEST(Experiment, RepeatedRunsAreByteIdentical) {
  auto cfg = toy_config();
  cfg.seeds = {7};
  const auto a = fresh_dir("repeat_a"), b = fresh_dir("repeat_b");
  run_experiment<float>(cfg, a);
  run_experiment<float>(cfg, b);
  for (const auto* f : {"config.resolved.json", "summary.json", "rounds.csv"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}

TEST(Experiment, RoundCallbackSeesEveryRound) {
  auto cfg = toy_config();
  cfg.seeds = {1, 2};
  std::vector<std::pair<std::uint64_t, std::size_t>> seen;
  run_experiment<double>(cfg, std::nullopt, [&](std::uint64_t s, const RoundReport& r) { seen.emplace_back(s, r.round); });
  EXPECT_EQ(seen, (std::vector<std::pair<std::uint64_t, std::size_t>>{{1, 0}, {1, 1}, {2, 0}, {2, 1}}));
}
