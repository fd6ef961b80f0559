#pragma once

/// @file config.hpp
/// @brief Run configuration: one JSON document covering every module.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "tiger/data.hpp"
#include "tiger/evaluation.hpp"
#include "tiger/model.hpp"
#include "tiger/retrieval.hpp"
#include "tiger/trainer.hpp"

namespace tiger {

struct RunConfig {
  ModelConfig model;
  TrainerConfig trainer;
  SyntheticWorldConfig data;
  SplitThresholds curation;
  RetrievalConfig retrieval;
  EvaluationConfig evaluation;
  /// When set, overrides the data, trainer and evaluation seeds.
  std::optional<std::uint64_t> seed;
  std::map<std::string, std::string> paths;

  /// Throws ConfigError on any invalid section.
  void validate() const;
  /// Sets `seed` and pushes it into every section.
  void apply_seed(std::uint64_t s);
};

void to_json(nlohmann::json& j, const SplitThresholds& c);
void from_json(const nlohmann::json& j, SplitThresholds& c);

nlohmann::json run_config_to_json(const RunConfig& c);
/// Unknown keys and type errors throw ConfigError naming the field path.
RunConfig run_config_from_json(const nlohmann::json& j);
/// IoError if unreadable, ConfigError if malformed.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace tiger
