#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "surelock/flops.hpp"
#include "surelock/lockctl.hpp"
#include "surelock/model.hpp"
#include "surelock/state.hpp"

namespace surelock {

enum class Mode { kBaseline, kSureLock, kSelection, kHybrid };

std::string to_string(Mode mode);
Mode parse_mode(const std::string& name);  // throws InvalidConfig

struct RunConfig {
  int n_prompt = 16;
  int n_gen = 16;
  int steps = 16;
  int block_length = 0;  // 0 means n_gen (fully parallel)
  double temperature = 0.0;
  LockPolicy policy;
  Mode mode = Mode::kSureLock;
  uint64_t seed = 0;
  double scale = 1.0;          // uniform weight multiplier
  bool record_logits = false;  // keep an N x V logits snapshot per step

  int effective_block_length() const { return block_length > 0 ? block_length : n_gen; }
  void validate(const ModelConfig& cfg) const;
};

struct StepRecord {
  int t = 0;
  uint64_t active = 0;    // M_t
  uint64_t computed = 0;  // C_t
  uint64_t flops_base = 0;
  uint64_t flops_actual = 0;   // closed form
  uint64_t flops_counted = 0;  // instrumented GEMM counter
  uint64_t flops_head = 0;
  uint64_t flops_probe = 0;
  double ratio = 1.0;
  std::vector<size_t> newly_unmasked;
  std::vector<TokenId> committed;
  std::vector<size_t> newly_locked;
  std::vector<size_t> unlocked;
  std::vector<size_t> computed_rows;
  std::vector<double> divergence;   // aligned with computed_rows, +inf at t = 1
  std::vector<double> uncertainty;  // aligned with computed_rows
  std::vector<bool> unmasked_after; // aligned with computed_rows
  std::optional<double> mean_divergence;
  Matrix logits;  // N x V snapshot of every position's current posterior logits
  double seconds = 0.0;
};

using StepTrace = std::vector<StepRecord>;

struct RunResult {
  std::vector<TokenId> tokens;
  StepTrace trace;
  std::vector<LockEvent> events;
  FlopsReport flops;
  size_t n = 0;
  uint64_t total_unmasked = 0;
  double seconds = 0.0;
};

// Balanced split of n_gen unmaskings over `steps` steps.
std::vector<int> unmask_schedule(int n_gen, int steps);

struct UnmaskResult {
  std::vector<size_t> positions;  // ascending
  std::vector<TokenId> tokens;    // aligned with positions
};

// Picks the `count` most confident masked positions in [block_begin, block_end)
// and commits a token for each: argmax at temperature 0, otherwise a draw from
// the tempered posterior. The MASK id is never committed and does not count
// towards confidence.
UnmaskResult update_mask(const Matrix& logits, const std::vector<bool>& masked, int count, size_t block_begin,
                         size_t block_end, double temperature, TokenId mask_id, SplitMix64& rng);

// ceil(k * |active|) rows with the largest previous divergence (missing values
// rank as +inf), ties to the lower index. Result ascending.
std::vector<size_t> select_rows_hybrid(std::span<const size_t> active, std::span<const double> prev_divergence,
                                       double k);

// One diffusion step; mutates `state` and returns the step's trace entry.
StepRecord step(SamplerState& state, const RunConfig& cfg, const Weights& w,
                std::vector<LockEvent>* events = nullptr);

// Random non-MASK prompt drawn from `seed`.
std::vector<TokenId> make_prompt(const ModelConfig& cfg, int n_prompt, uint64_t seed);

RunResult run_sampler(const RunConfig& cfg, const Weights& w, std::span<const TokenId> prompt);

FlopsReport flops_report(const StepTrace& trace, uint64_t positions);

// Human-readable descriptions of violated run invariants (empty when clean):
// counter/formula agreement, F_actual <= F_base, and, absent unlocks in
// locking modes, non-increasing M_t.
std::vector<std::string> check_trace_invariants(const RunResult& run, Mode mode);

}  // namespace surelock
