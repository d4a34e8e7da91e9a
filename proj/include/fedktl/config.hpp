#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedktl/client.hpp"
#include "fedktl/error.hpp"

namespace fedktl {

enum class Ablation { none, no_transfer, no_mse, no_mmd, no_etf, no_centroids, conditional, contrastive };

struct AblationInfo {
  Ablation value;
  const char* name;
};

inline constexpr AblationInfo kAblations[] = {
    {Ablation::none, "none"},          {Ablation::no_transfer, "-L_i^M"},   {Ablation::no_mse, "-L^MSE"},
    {Ablation::no_mmd, "-L^MMD"},      {Ablation::no_etf, "-ETF"},          {Ablation::no_centroids, "-Q̄"},
    {Ablation::conditional, "+CS"},    {Ablation::contrastive, "*L_i^A"},
};

inline std::string to_string(Ablation a) {
  for (const auto& info : kAblations)
    if (info.value == a) return info.name;
  return "none";
}

/// Accepts the canonical names plus ASCII spellings ("-Qbar", "-Q").
inline Ablation parse_ablation(const std::string& s) {
  for (const auto& info : kAblations)
    if (s == info.name) return info.value;
  if (s == "-Qbar" || s == "-Q" || s == "-Q_bar") return Ablation::no_centroids;
  if (s == "*L_A" || s == "contrastive") return Ablation::contrastive;
  std::string known;
  for (const auto& info : kAblations) known += std::string(known.empty() ? "" : ", ") + info.name;
  throw ConfigError("unknown ablation '" + s + "' (expected one of: " + known + ")");
}

enum class Mode { federated, single_client };
enum class PartitionKind { dirichlet, pathological };

struct NoiseOption {
  bool enabled = false;
  double scale = 0.0;        // s
  double coefficient = 0.2;  // p
};

struct ExperimentConfig {
  // data
  std::optional<std::filesystem::path> dataset_path;  // KTLD file; synthetic otherwise
  std::size_t classes = 10;
  std::size_t input_dim = 32;
  std::size_t per_class = 200;
  double cluster_spread = 0.5;
  std::uint64_t data_seed = 0;

  // federation
  Mode mode = Mode::federated;
  std::size_t clients = 20;
  double participation = 1.0;
  PartitionKind partition = PartitionKind::dirichlet;
  double beta = 0.1;
  std::size_t classes_per_client = 2;
  std::size_t min_samples_per_client = 4;

  // models
  Palette palette = default_palette();
  std::size_t etf_dim = 0;  // K; 0 resolves to C
  std::size_t feature_dim = 64;
  std::size_t latent_dim = 32;
  std::size_t noise_dim = 64;
  std::size_t image_dim = 192;

  // optimization
  double mu = 50.0;
  double lambda = 1.0;
  double arcface_scale = 64.0;
  double arcface_margin = 0.5;
  double client_lr = 0.01;
  double server_lr = 0.01;
  std::size_t server_batch = 100;
  std::size_t server_epochs = 100;
  bool server_warm_start = true;
  std::size_t batch = 10;
  std::size_t rounds = 1000;
  std::size_t local_epochs = 1;

  Ablation ablation = Ablation::none;
  NoiseOption upload_noise{false, 0.05, 0.2};    // NC
  NoiseOption download_noise{false, 0.2, 0.2};   // NG
  std::vector<std::uint64_t> seeds{0};
  std::size_t threads = 1;
  std::optional<std::filesystem::path> bridge_dir;

  std::size_t resolved_etf_dim() const { return etf_dim == 0 ? classes : etf_dim; }

  void validate() const {
    auto req = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError("config: " + msg);
    };
    req(classes >= 2, "classes must be at least 2");
    req(dataset_path || (input_dim >= 1 && per_class >= 1), "synthetic dataset needs dim and per_class >= 1");
    req(dataset_path || cluster_spread > 0.0, "cluster_spread must be positive");
    req(clients >= 1, "clients must be at least 1");
    req(participation > 0.0 && participation <= 1.0, "participation must lie in (0, 1]");
    req(mode == Mode::federated || clients == 1, "single-client mode requires clients = 1");
    req(beta > 0.0, "beta must be positive");
    req(partition != PartitionKind::pathological || clients * classes_per_client >= classes,
        "pathological partition needs clients * classes_per_client >= classes");
    req(classes_per_client >= 1 && classes_per_client <= classes, "classes_per_client must lie in [1, classes]");
    req(min_samples_per_client >= 1, "min_samples_per_client must be positive");
    req(!palette.empty(), "palette must not be empty");
    for (const auto& r : palette) {
      req(r.depth >= 1, "palette depth must be at least 1");
      req(r.width >= feature_dim, "palette width must be at least feature_dim");
    }
    req(etf_dim == 0 || etf_dim + 1 >= classes, "etf_dim must be at least classes - 1");
    req(feature_dim >= 1 && latent_dim >= 1 && noise_dim >= 1 && image_dim >= 1, "dimensions must be positive");
    req(std::isfinite(mu) && mu >= 0.0, "mu must be non-negative");
    req(std::isfinite(lambda) && lambda >= 0.0, "lambda must be non-negative");
    req(arcface_scale > 0.0, "arcface scale must be positive");
    req(arcface_margin >= 0.0 && arcface_margin < std::numbers::pi / 2, "arcface margin must lie in [0, pi/2)");
    req(client_lr > 0.0 && server_lr > 0.0, "learning rates must be positive");
    req(server_batch >= 1 && batch >= 1, "batch sizes must be positive");
    req(rounds >= 1, "rounds must be at least 1");
    req(local_epochs >= 1, "local_epochs must be at least 1");
    for (const auto* n : {&upload_noise, &download_noise}) {
      req(n->scale >= 0.0, "noise scale must be non-negative");
      req(n->coefficient >= 0.0 && n->coefficient <= 1.0, "noise coefficient must lie in [0, 1]");
    }
    req(!seeds.empty(), "seeds must not be empty");
    req(threads >= 1, "threads must be at least 1");
  }
};

inline constexpr const char* kConfigSchema = "ktl-config/1";

namespace detail {

using nlohmann::json;

// Reads an object while rejecting keys it does not know.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError("config: " + where_ + " must be an object");
  }

  template <class V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError("config: " + where_ + "." + key + ": " + e.what());
    }
    check_value(key, out);
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("config: unknown key '" + where_ + (where_.empty() ? "" : ".") + k + "'");
  }

 private:
  template <class V>
  void check_value(const char* key, const V& v) const {
    if constexpr (std::is_floating_point_v<V>)
      if (!std::isfinite(v)) throw ConfigError("config: " + where_ + "." + key + " must be finite");
  }

  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline void read_noise(const json* j, NoiseOption& n, const std::string& where) {
  if (!j) return;
  ObjectReader r(*j, where);
  r.get("enabled", n.enabled);
  r.get("s", n.scale);
  r.get("p", n.coefficient);
  r.finish();
}

inline json noise_json(const NoiseOption& n) { return {{"enabled", n.enabled}, {"s", n.scale}, {"p", n.coefficient}}; }

}  // namespace detail

/// Parses a "ktl-config/1" document. Missing fields keep their defaults;
/// unknown keys and a wrong schema tag are errors.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::ObjectReader;
  ExperimentConfig c;
  ObjectReader top(j, "");
  std::string schema;
  top.get("schema", schema);
  if (schema != kConfigSchema)
    throw ConfigError("config: schema must be \"" + std::string(kConfigSchema) + "\", got \"" + schema + "\"");

  if (const auto* d = top.child("dataset")) {
    ObjectReader r(*d, "dataset");
    std::string path;
    r.get("path", path);
    if (!path.empty()) c.dataset_path = path;
    r.get("classes", c.classes);
    r.get("dim", c.input_dim);
    r.get("per_class", c.per_class);
    r.get("cluster_spread", c.cluster_spread);
    r.get("seed", c.data_seed);
    r.finish();
  }
  std::string mode = "federated";
  top.get("mode", mode);
  if (mode == "federated")
    c.mode = Mode::federated;
  else if (mode == "single-client")
    c.mode = Mode::single_client;
  else
    throw ConfigError("config: mode must be \"federated\" or \"single-client\"");
  top.get("clients", c.clients);
  top.get("participation", c.participation);
  if (const auto* p = top.child("partition")) {
    ObjectReader r(*p, "partition");
    std::string kind = "dirichlet";
    r.get("kind", kind);
    if (kind == "dirichlet")
      c.partition = PartitionKind::dirichlet;
    else if (kind == "pathological")
      c.partition = PartitionKind::pathological;
    else
      throw ConfigError("config: partition.kind must be \"dirichlet\" or \"pathological\"");
    r.get("beta", c.beta);
    r.get("classes_per_client", c.classes_per_client);
    r.get("min_samples_per_client", c.min_samples_per_client);
    r.finish();
  }
  if (const auto* p = top.child("palette")) {
    if (!p->is_array()) throw ConfigError("config: palette must be an array");
    c.palette.clear();
    for (std::size_t i = 0; i < p->size(); ++i) {
      ObjectReader r((*p)[i], "palette[" + std::to_string(i) + "]");
      ExtractorRecipe rec;
      r.get("depth", rec.depth);
      r.get("width", rec.width);
      r.get("batch_norm", rec.batch_norm);
      r.finish();
      c.palette.push_back(rec);
    }
  }
  top.get("K", c.etf_dim);
  top.get("K_prime", c.feature_dim);
  top.get("H", c.latent_dim);
  top.get("Z", c.noise_dim);
  top.get("d_img", c.image_dim);
  top.get("mu", c.mu);
  top.get("lambda", c.lambda);
  top.get("s", c.arcface_scale);
  top.get("m", c.arcface_margin);
  top.get("eta_c", c.client_lr);
  top.get("eta_S", c.server_lr);
  top.get("B_S", c.server_batch);
  top.get("E_S", c.server_epochs);
  top.get("server_warm_start", c.server_warm_start);
  top.get("batch", c.batch);
  top.get("T", c.rounds);
  top.get("E", c.local_epochs);
  std::string ablation = "none";
  top.get("ablation", ablation);
  c.ablation = parse_ablation(ablation);
  if (const auto* n = top.child("noise")) {
    ObjectReader r(*n, "noise");
    detail::read_noise(r.child("NC"), c.upload_noise, "noise.NC");
    detail::read_noise(r.child("NG"), c.download_noise, "noise.NG");
    r.finish();
  }
  top.get("seeds", c.seeds);
  top.get("threads", c.threads);
  std::string bridge;
  top.get("bridge", bridge);
  if (!bridge.empty()) c.bridge_dir = bridge;
  top.finish();
  c.validate();
  return c;
}

/// Fully resolved configuration, suitable for re-loading.
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json palette = nlohmann::json::array();
  for (const auto& r : c.palette) palette.push_back({{"depth", r.depth}, {"width", r.width}, {"batch_norm", r.batch_norm}});
  nlohmann::json dataset = {{"classes", c.classes},
                            {"dim", c.input_dim},
                            {"per_class", c.per_class},
                            {"cluster_spread", c.cluster_spread},
                            {"seed", c.data_seed}};
  if (c.dataset_path) dataset["path"] = c.dataset_path->string();
  nlohmann::json j = {
      {"schema", kConfigSchema},
      {"dataset", dataset},
      {"mode", c.mode == Mode::federated ? "federated" : "single-client"},
      {"clients", c.clients},
      {"participation", c.participation},
      {"partition",
       {{"kind", c.partition == PartitionKind::dirichlet ? "dirichlet" : "pathological"},
        {"beta", c.beta},
        {"classes_per_client", c.classes_per_client},
        {"min_samples_per_client", c.min_samples_per_client}}},
      {"palette", palette},
      {"K", c.resolved_etf_dim()},
      {"K_prime", c.feature_dim},
      {"H", c.latent_dim},
      {"Z", c.noise_dim},
      {"d_img", c.image_dim},
      {"mu", c.mu},
      {"lambda", c.lambda},
      {"s", c.arcface_scale},
      {"m", c.arcface_margin},
      {"eta_c", c.client_lr},
      {"eta_S", c.server_lr},
      {"B_S", c.server_batch},
      {"E_S", c.server_epochs},
      {"server_warm_start", c.server_warm_start},
      {"batch", c.batch},
      {"T", c.rounds},
      {"E", c.local_epochs},
      {"ablation", to_string(c.ablation)},
      {"noise", {{"NC", detail::noise_json(c.upload_noise)}, {"NG", detail::noise_json(c.download_noise)}}},
      {"seeds", c.seeds},
      {"threads", c.threads},
  };
  if (c.bridge_dir) j["bridge"] = c.bridge_dir->string();
  return j;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace fedktl
