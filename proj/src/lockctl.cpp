#include "surelock/lockctl.hpp"

#include <algorithm>
#include <cmath>

#include "surelock/errors.hpp"
#include "surelock/numkit.hpp"

namespace surelock {

void LockPolicy::validate() const {
  if (!std::isfinite(eps)) throw InvalidConfig("lock policy: eps must be finite");
  if (!(percentile >= 0.0 && percentile <= 100.0)) throw InvalidConfig("lock policy: percentile outside [0,100]");
  if (fraction && !(*fraction > 0.0 && *fraction <= 1.0)) throw InvalidConfig("lock policy: k must be in (0,1]");
  if (!(unlock.relock_factor > 0.0 && unlock.relock_factor <= 1.0))
    throw InvalidConfig("lock policy: relock factor must be in (0,1]");
  if (unlock.probe_period < 1 || unlock.min_locked_steps < 1 || unlock.cooldown < 1)
    throw InvalidConfig("lock policy: probe period, interval and cooldown must be >= 1");
}

std::string to_string(LockEventKind kind) {
  switch (kind) {
    case LockEventKind::kLock: return "lock";
    case LockEventKind::kUnlock: return "unlock";
    case LockEventKind::kRelock: return "relock";
  }
  return "unknown";
}

double uncertainty(std::span<const double> log_probs) {
  const double mx = *std::max_element(log_probs.begin(), log_probs.end());
  return 1.0 - std::exp(mx);
}

std::vector<size_t> evaluate_locks(std::span<const size_t> candidates, std::span<const double> divergence,
                                   std::span<const double> uncertainty, const LockPolicy& policy,
                                   const RelockGuard* guard) {
  std::vector<size_t> out;
  if (candidates.empty()) return out;

  double theta = 0.0;
  if (policy.gate_enabled) {
    std::vector<double> us;
    us.reserve(candidates.size());
    for (size_t i : candidates) us.push_back(uncertainty[i]);
    theta = percentile_nearest_rank(us, policy.percentile);
  }

  for (size_t i : candidates) {
    double eps = policy.eps;
    if (guard && guard->unlock_step[i] >= 0) {
      if (guard->t - guard->unlock_step[i] <= policy.unlock.cooldown) continue;
      eps *= policy.unlock.relock_factor;
    }
    // +inf (first step) never satisfies the test.
    if (!(divergence[i] <= eps)) continue;
    if (policy.gate_enabled && !(uncertainty[i] <= theta)) continue;
    out.push_back(i);
  }
  return out;
}

void apply_locks(SamplerState& state, std::span<const size_t> rows, const ForwardResult& fwd, int t,
                 std::span<const double> divergence, std::span<const double> uncert,
                 std::vector<LockEvent>* events) {
  for (size_t i : rows) {
    if (i >= state.size()) throw InvalidState("apply_locks: position out of range");
    if (state.locked[i]) throw InvalidState("apply_locks: position " + std::to_string(i) + " is already locked");
    if (state.masked[i]) throw InvalidState("apply_locks: position " + std::to_string(i) + " is still masked");
    for (const auto& layer : fwd.fresh)
      if (i >= layer.valid.size() || !layer.valid[i])
        throw InvalidState("apply_locks: position " + std::to_string(i) + " has no fresh K/V this step");
  }
  for (size_t i : rows) {
    for (size_t l = 0; l < state.caches.size(); ++l)
      state.caches[l].store(i, fwd.fresh[l].k.row(i), fwd.fresh[l].v.row(i));
    auto x = fwd.block_inputs.row(i);
    std::copy(x.begin(), x.end(), state.frozen.x.row(i).begin());
    state.frozen.valid[i] = true;
    auto z = fwd.logits.row(i);
    std::copy(z.begin(), z.end(), state.frozen_logits.row(i).begin());
    state.locked[i] = true;
    state.lock_step[i] = t;
    if (events) {
      LockEvent e;
      e.position = i;
      e.step = t;
      e.divergence = divergence.empty() ? 0.0 : divergence[i];
      e.uncertainty = uncert.empty() ? 0.0 : uncert[i];
      e.kind = state.unlock_step[i] >= 0 ? LockEventKind::kRelock : LockEventKind::kLock;
      events->push_back(e);
    }
  }
}

double epsilon_for_delta(double delta, double c_tail) {
  if (!(c_tail > 0.0)) throw InvalidInput("epsilon_for_delta: C_tail must be positive");
  if (!(delta >= 0.0)) throw InvalidInput("epsilon_for_delta: delta must be non-negative");
  return delta * delta / (c_tail * c_tail);
}

bool should_unlock(double proxy_uncertainty, double proxy_drift, double theta, int t, int lock_step,
                   const UnlockPolicy& policy) {
  return proxy_uncertainty > theta && proxy_drift > policy.eps_unlock && t - lock_step > policy.min_locked_steps;
}

ProbeResult probe_unlock(const SamplerState& state, const Weights& w, const LockPolicy& policy, double theta,
                         int t, double scale, std::span<const size_t> rows) {
  if (!policy.unlock.enabled) throw InvalidInput("probe_unlock: unlocking is disabled");
  if (t % policy.unlock.probe_period != 0) throw InvalidInput("probe_unlock: not a probe step");

  ProbeResult res;
  if (rows.empty())
    res.probed = state.locked_positions();
  else
    res.probed.assign(rows.begin(), rows.end());
  for (size_t i : res.probed)
    if (i >= state.size() || !state.locked[i])
      throw InvalidState("probe_unlock: position " + std::to_string(i) + " is not locked");
  if (res.probed.empty()) return res;
  std::sort(res.probed.begin(), res.probed.end());

  const ForwardResult fwd = forward_probe(w, res.probed, state.frozen, state.last_assembled, scale);
  res.tally = fwd.tally;
  for (size_t i : res.probed) {
    const auto proxy = fwd.logits.row(i);
    const double u = uncertainty(log_softmax(proxy));
    const double drift = kl_from_logits(proxy, state.frozen_logits.row(i));
    res.proxy_uncertainty.push_back(u);
    res.proxy_drift.push_back(drift);
    if (should_unlock(u, drift, theta, t, state.lock_step[i], policy.unlock)) res.unlock.push_back(i);
  }
  return res;
}

void apply_unlocks(SamplerState& state, std::span<const size_t> rows, int t, const ProbeResult* probe,
                   std::vector<LockEvent>* events) {
  for (size_t i : rows)
    if (i >= state.size() || !state.locked[i])
      throw InvalidState("apply_unlocks: position " + std::to_string(i) + " is not locked");
  for (size_t i : rows) {
    state.locked[i] = false;
    for (auto& c : state.caches) c.invalidate(i);
    state.frozen.valid[i] = false;
    auto z = state.frozen_logits.row(i);
    std::copy(z.begin(), z.end(), state.prev_logits.row(i).begin());
    state.has_prev[i] = true;
    state.lock_step[i] = -1;
    state.unlock_step[i] = t;
    if (events) {
      LockEvent e;
      e.position = i;
      e.step = t;
      e.kind = LockEventKind::kUnlock;
      if (probe) {
        auto it = std::find(probe->probed.begin(), probe->probed.end(), i);
        if (it != probe->probed.end()) {
          const auto k = static_cast<size_t>(it - probe->probed.begin());
          e.divergence = probe->proxy_drift[k];
          e.uncertainty = probe->proxy_uncertainty[k];
        }
      }
      events->push_back(e);
    }
  }
}

}  // namespace surelock
