#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "avrl/downstream.hpp"

namespace avrl {

inline constexpr int kConfigVersion = 1;

struct PretrainConfig {
  ExcludedModality exclude = ExcludedModality::none;
  TrainConfig train;
};

/// Everything a command needs, loaded from one versioned JSON file. Every
/// section is optional; absent keys keep their defaults, unknown keys are
/// rejected.
struct RunConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  SyntheticConfig data;
  ModelConfig model;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  ProbeConfig probe;

  void validate() const;
};

/// The desk defaults used by the acceptance runs.
RunConfig desk_config();

RunConfig parse_run_config(const nlohmann::json& j);
nlohmann::ordered_json to_json(const RunConfig& cfg);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);

/// Stable hash of the resolved configuration text, output_dir excluded.
std::uint64_t config_hash(const RunConfig& cfg);

/// Hash of the model section only; checkpoints are compatible when it matches.
std::uint64_t model_hash(const ModelConfig& cfg);

const char* exclusion_name(ExcludedModality m);
const char* strategy_name(ExclusionStrategy s);

}  // namespace avrl
