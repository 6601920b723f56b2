#include "surelock/state.hpp"

#include <limits>

#include "surelock/errors.hpp"

namespace surelock {

std::vector<size_t> SamplerState::active_positions() const {
  std::vector<size_t> out;
  for (size_t i = 0; i < locked.size(); ++i)
    if (!locked[i]) out.push_back(i);
  return out;
}

std::vector<size_t> SamplerState::locked_positions() const {
  std::vector<size_t> out;
  for (size_t i = 0; i < locked.size(); ++i)
    if (locked[i]) out.push_back(i);
  return out;
}

size_t SamplerState::masked_count() const {
  size_t c = 0;
  for (bool m : masked) c += m ? 1 : 0;
  return c;
}

SamplerState make_state(const ModelConfig& cfg, std::span<const TokenId> prompt, size_t n_gen, uint64_t seed) {
  const size_t n = prompt.size() + n_gen;
  if (n == 0) throw InvalidConfig("sampler: empty sequence");
  if (n > static_cast<size_t>(cfg.max_seq)) throw InvalidConfig("sampler: sequence length exceeds max_seq");
  for (TokenId tok : prompt)
    if (tok < 0 || tok >= cfg.mask_id()) throw InvalidConfig("sampler: prompt token out of range or MASK");

  SamplerState s;
  s.n_prompt = prompt.size();
  s.tokens.assign(prompt.begin(), prompt.end());
  s.tokens.resize(n, cfg.mask_id());
  s.masked.assign(n, false);
  for (size_t i = prompt.size(); i < n; ++i) s.masked[i] = true;
  s.locked.assign(n, false);
  const auto d = static_cast<size_t>(cfg.d_model);
  const auto V = static_cast<size_t>(cfg.vocab);
  s.caches = make_caches(cfg, n);
  s.frozen = FrozenInputs(n, d);
  s.frozen_logits = Matrix(n, V);
  s.lock_step.assign(n, -1);
  s.unlock_step.assign(n, -1);
  s.prev_logits = Matrix(n, V);
  s.has_prev.assign(n, false);
  s.last_divergence.assign(n, std::numeric_limits<double>::infinity());
  s.recent = make_caches(cfg, n);
  s.recent_inputs = FrozenInputs(n, d);
  s.rng = SplitMix64(seed);
  return s;
}

}  // namespace surelock
