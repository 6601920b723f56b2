#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "surelock/model.hpp"
#include "surelock/state.hpp"

namespace surelock {

struct UnlockPolicy {
  bool enabled = false;
  int probe_period = 4;       // P
  double eps_unlock = 1e-2;   // drift threshold on KL(proxy || frozen)
  int min_locked_steps = 2;   // D_interval, strict: t - t* > D_interval
  int cooldown = 2;           // D_cool, re-lock refused while t - t_unlock <= D_cool
  double relock_factor = 0.5; // rho_relock in (0, 1]
};

struct LockPolicy {
  double eps = 5e-3;
  double percentile = 20.0;  // m
  bool gate_enabled = true;
  std::optional<double> fraction;  // k for selection/hybrid
  UnlockPolicy unlock;

  void validate() const;
};

enum class LockEventKind { kLock, kUnlock, kRelock };
std::string to_string(LockEventKind kind);

struct LockEvent {
  size_t position = 0;
  int step = 0;
  double divergence = 0.0;   // D at lock time, or drift for unlocks
  double uncertainty = 0.0;
  LockEventKind kind = LockEventKind::kLock;
};

// 1 - max_v p(v) for a log-probability vector.
double uncertainty(std::span<const double> log_probs);

// Cooldown/tightening context for rows that were unlocked before.
struct RelockGuard {
  int t = 0;
  std::span<const int> unlock_step;  // per position, -1 if never unlocked
};

// Lock set F_t among `candidates` (active and unmasked). D and u are indexed by
// position. The gate threshold is the nearest-rank m-th percentile of u over
// all candidates. Rows with a past unlock must clear relock_factor * eps and
// are refused while still cooling down.
std::vector<size_t> evaluate_locks(std::span<const size_t> candidates, std::span<const double> divergence,
                                   std::span<const double> uncertainty, const LockPolicy& policy,
                                   const RelockGuard* guard = nullptr);

// Locks `rows` using this step's fresh K/V and block inputs from `fwd`; the
// row's current logits in `fwd` become its frozen posterior.
void apply_locks(SamplerState& state, std::span<const size_t> rows, const ForwardResult& fwd, int t,
                 std::span<const double> divergence = {}, std::span<const double> uncertainty = {},
                 std::vector<LockEvent>* events = nullptr);

// delta^2 / C_tail^2.
double epsilon_for_delta(double delta, double c_tail);

// Unlock conjunction: u~ > theta and D~ > eps_unlock and t - t* > D_interval.
bool should_unlock(double proxy_uncertainty, double proxy_drift, double theta, int t, int lock_step,
                   const UnlockPolicy& policy);

struct ProbeResult {
  std::vector<size_t> probed;
  std::vector<double> proxy_uncertainty;  // aligned with probed
  std::vector<double> proxy_drift;        // KL(proxy || frozen posterior)
  std::vector<size_t> unlock;
  GemmTally tally;
};

// Runs the full-depth probe on locked rows (all of them when `rows` is empty)
// against the K/V tables of the last forward and returns the rows to unlock.
ProbeResult probe_unlock(const SamplerState& state, const Weights& w, const LockPolicy& policy, double theta,
                         int t, double scale = 1.0, std::span<const size_t> rows = {});

// Clears locks on `rows`, invalidates their caches and frozen inputs and
// starts their re-lock cooldown. The row's previous posterior stays the frozen one.
void apply_unlocks(SamplerState& state, std::span<const size_t> rows, int t, const ProbeResult* probe = nullptr,
                   std::vector<LockEvent>* events = nullptr);

}  // namespace surelock
