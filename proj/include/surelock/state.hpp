#pragma once

#include <cstddef>
#include <vector>

#include "surelock/model.hpp"
#include "surelock/rng.hpp"

namespace surelock {

// Mutable state of one sampling run. Positions [0, n_prompt) hold the prompt.
struct SamplerState {
  size_t n_prompt = 0;
  std::vector<TokenId> tokens;
  std::vector<bool> masked;
  std::vector<bool> locked;

  // Valid exactly on locked rows.
  std::vector<LayerKVCache> caches;
  FrozenInputs frozen;
  Matrix frozen_logits;
  std::vector<int> lock_step;    // t* of the current lock, -1 when unlocked
  std::vector<int> unlock_step;  // step of the most recent unlock, -1 if never

  // Logits of the posterior each position used at the last step (fresh,
  // stale or frozen). `has_prev` is false until a row is first computed.
  Matrix prev_logits;
  std::vector<bool> has_prev;
  std::vector<double> last_divergence;  // most recent D per row, +inf if none

  // Most recent fresh K/V and block input of every row (stale-row reuse).
  std::vector<LayerKVCache> recent;
  FrozenInputs recent_inputs;
  // Full-length K/V tables the last forward attended to.
  std::vector<LayerKVCache> last_assembled;

  int t = 0;  // completed steps
  SplitMix64 rng{0};

  size_t size() const { return tokens.size(); }
  std::vector<size_t> active_positions() const;
  std::vector<size_t> locked_positions() const;
  size_t masked_count() const;
};

// Fresh state: prompt unmasked, generation region filled with MASK.
SamplerState make_state(const ModelConfig& cfg, std::span<const TokenId> prompt, size_t n_gen, uint64_t seed);

}  // namespace surelock
