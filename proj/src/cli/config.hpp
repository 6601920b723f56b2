#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "surelock/model.hpp"
#include "surelock/sampler.hpp"

namespace surelock::cli {

// Everything needed to reproduce one run.
struct ExperimentConfig {
  ModelConfig model;
  std::optional<std::string> weights_path;  // overrides model + init when set
  uint64_t weights_seed = 0;
  double init_std = 0.02;
  RunConfig run;
  std::string out_dir = "out";
  bool emit_logits = false;  // include per-step logits in the trace
};

// Keys absent from `j` keep their defaults. Unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);
nlohmann::json to_json(const ExperimentConfig& cfg);

// Weights referenced by the config (loaded or initialized from the seed).
Weights build_weights(const ExperimentConfig& cfg);

void validate(const ExperimentConfig& cfg);

}  // namespace surelock::cli
