#include "cli/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include "surelock/errors.hpp"

namespace surelock::cli {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw InvalidConfig(where + ": expected an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw InvalidConfig(where + ": unknown key '" + key + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void read_model(const json& j, ModelConfig& m) {
  reject_unknown(j, {"vocab", "d_model", "n_layers", "n_heads", "n_kv_heads", "d_ff", "max_seq"}, "model");
  read(j, "vocab", m.vocab);
  read(j, "d_model", m.d_model);
  read(j, "n_layers", m.n_layers);
  read(j, "n_heads", m.n_heads);
  read(j, "n_kv_heads", m.n_kv_heads);
  read(j, "d_ff", m.d_ff);
  read(j, "max_seq", m.max_seq);
}

void read_policy(const json& j, LockPolicy& p) {
  reject_unknown(j, {"eps", "percentile", "gate", "k", "unlock"}, "policy");
  read(j, "eps", p.eps);
  read(j, "percentile", p.percentile);
  read(j, "gate", p.gate_enabled);
  if (j.contains("k")) {
    if (j["k"].is_null())
      p.fraction.reset();
    else
      p.fraction = j["k"].get<double>();
  }
  if (j.contains("unlock")) {
    const json& u = j["unlock"];
    reject_unknown(u, {"enabled", "probe_period", "eps_unlock", "min_locked_steps", "cooldown", "relock_factor"},
                   "policy.unlock");
    read(u, "enabled", p.unlock.enabled);
    read(u, "probe_period", p.unlock.probe_period);
    read(u, "eps_unlock", p.unlock.eps_unlock);
    read(u, "min_locked_steps", p.unlock.min_locked_steps);
    read(u, "cooldown", p.unlock.cooldown);
    read(u, "relock_factor", p.unlock.relock_factor);
  }
}

void read_run(const json& j, RunConfig& r) {
  reject_unknown(j, {"mode", "n_prompt", "n_gen", "steps", "block_length", "temperature", "seed", "scale"}, "run");
  if (j.contains("mode")) r.mode = parse_mode(j["mode"].get<std::string>());
  read(j, "n_prompt", r.n_prompt);
  read(j, "n_gen", r.n_gen);
  read(j, "steps", r.steps);
  read(j, "block_length", r.block_length);
  read(j, "temperature", r.temperature);
  read(j, "seed", r.seed);
  read(j, "scale", r.scale);
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  try {
    reject_unknown(j, {"model", "weights", "weights_seed", "init_std", "run", "policy", "out", "emit_logits"},
                   "config");
    if (j.contains("model")) read_model(j["model"], cfg.model);
    if (j.contains("weights") && !j["weights"].is_null()) cfg.weights_path = j["weights"].get<std::string>();
    read(j, "weights_seed", cfg.weights_seed);
    read(j, "init_std", cfg.init_std);
    if (j.contains("run")) read_run(j["run"], cfg.run);
    if (j.contains("policy")) read_policy(j["policy"], cfg.run.policy);
    read(j, "out", cfg.out_dir);
    read(j, "emit_logits", cfg.emit_logits);
  } catch (const json::exception& e) {
    throw InvalidConfig(std::string("config: ") + e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidConfig("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidConfig("config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

json to_json(const ExperimentConfig& cfg) {
  const ModelConfig& m = cfg.model;
  const RunConfig& r = cfg.run;
  const LockPolicy& p = r.policy;
  json j;
  j["model"] = {{"vocab", m.vocab},     {"d_model", m.d_model}, {"n_layers", m.n_layers},
                {"n_heads", m.n_heads}, {"n_kv_heads", m.n_kv_heads}, {"d_ff", m.d_ff},
                {"max_seq", m.max_seq}};
  j["weights"] = cfg.weights_path ? json(*cfg.weights_path) : json(nullptr);
  j["weights_seed"] = cfg.weights_seed;
  j["init_std"] = cfg.init_std;
  j["run"] = {{"mode", to_string(r.mode)}, {"n_prompt", r.n_prompt},       {"n_gen", r.n_gen},
              {"steps", r.steps},          {"block_length", r.block_length}, {"temperature", r.temperature},
              {"seed", r.seed},            {"scale", r.scale}};
  j["policy"] = {{"eps", p.eps},
                 {"percentile", p.percentile},
                 {"gate", p.gate_enabled},
                 {"k", p.fraction ? json(*p.fraction) : json(nullptr)},
                 {"unlock",
                  {{"enabled", p.unlock.enabled},
                   {"probe_period", p.unlock.probe_period},
                   {"eps_unlock", p.unlock.eps_unlock},
                   {"min_locked_steps", p.unlock.min_locked_steps},
                   {"cooldown", p.unlock.cooldown},
                   {"relock_factor", p.unlock.relock_factor}}}};
  j["out"] = cfg.out_dir;
  j["emit_logits"] = cfg.emit_logits;
  return j;
}

Weights build_weights(const ExperimentConfig& cfg) {
  if (cfg.weights_path) {
    if (!std::filesystem::exists(*cfg.weights_path))
      throw InvalidConfig("weights file '" + *cfg.weights_path + "' does not exist");
    return load_weights(*cfg.weights_path);
  }
  return init_weights(cfg.model, cfg.weights_seed, cfg.init_std);
}

void validate(const ExperimentConfig& cfg) {
  if (!cfg.weights_path) cfg.model.validate();
  if (!(cfg.init_std >= 0.0)) throw InvalidConfig("init_std must be non-negative");
  if (cfg.weights_path && !std::filesystem::exists(*cfg.weights_path))
    throw InvalidConfig("weights file '" + *cfg.weights_path + "' does not exist");
  if (!cfg.weights_path) cfg.run.validate(cfg.model);
}

}  // namespace surelock::cli
