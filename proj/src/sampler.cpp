#include "surelock/sampler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "surelock/errors.hpp"
#include "surelock/numkit.hpp"

namespace surelock {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// ceil(x) that ignores a few ulps of representation error above an integer.
size_t ceil_count(double x) {
  return static_cast<size_t>(std::ceil(x - 1e-9 * std::max(1.0, x)));
}

bool locks_enabled(Mode m) { return m == Mode::kSureLock || m == Mode::kHybrid; }
bool selects_rows(Mode m) { return m == Mode::kSelection || m == Mode::kHybrid; }

}  // namespace

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::kBaseline: return "baseline";
    case Mode::kSureLock: return "surelock";
    case Mode::kSelection: return "selection";
    case Mode::kHybrid: return "hybrid";
  }
  return "unknown";
}

Mode parse_mode(const std::string& name) {
  if (name == "baseline") return Mode::kBaseline;
  if (name == "surelock") return Mode::kSureLock;
  if (name == "selection") return Mode::kSelection;
  if (name == "hybrid") return Mode::kHybrid;
  throw InvalidConfig("unknown mode '" + name + "' (expected baseline|surelock|selection|hybrid)");
}

void RunConfig::validate(const ModelConfig& cfg) const {
  if (n_prompt < 0 || n_gen < 1) throw InvalidConfig("run config: need n_prompt >= 0 and n_gen >= 1");
  if (steps < 1 || steps > n_gen) throw InvalidConfig("run config: steps must be in [1, n_gen]");
  const int lb = effective_block_length();
  if (lb < 1 || n_gen % lb != 0) throw InvalidConfig("run config: block length must divide n_gen");
  const int blocks = n_gen / lb;
  if (steps % blocks != 0) throw InvalidConfig("run config: steps must be a multiple of the block count");
  if (!(temperature >= 0.0)) throw InvalidConfig("run config: temperature must be >= 0");
  if (n_prompt + n_gen > cfg.max_seq) throw InvalidConfig("run config: n_prompt + n_gen exceeds max_seq");
  if (!std::isfinite(scale)) throw InvalidConfig("run config: scale must be finite");
  policy.validate();
  if (selects_rows(mode) && !policy.fraction) throw InvalidConfig("run config: selection/hybrid mode needs k");
}

std::vector<int> unmask_schedule(int n_gen, int steps) {
  if (steps < 1 || n_gen < 1 || steps > n_gen)
    throw InvalidConfig("unmask_schedule: need 1 <= steps <= n_gen");
  std::vector<int> out(static_cast<size_t>(steps), n_gen / steps);
  for (int i = 0; i < n_gen % steps; ++i) out[static_cast<size_t>(i)] += 1;
  return out;
}

UnmaskResult update_mask(const Matrix& logits, const std::vector<bool>& masked, int count, size_t block_begin,
                         size_t block_end, double temperature, TokenId mask_id, SplitMix64& rng) {
  struct Candidate {
    size_t pos;
    double confidence;  // max non-MASK log-probability
  };
  std::vector<Candidate> cands;
  for (size_t i = block_begin; i < block_end; ++i) {
    if (!masked[i]) continue;
    const auto lp = log_softmax(logits.row(i));
    double best = -kInf;
    for (size_t v = 0; v < lp.size(); ++v)
      if (static_cast<TokenId>(v) != mask_id) best = std::max(best, lp[v]);
    cands.push_back({i, best});
  }
  if (count < 0 || static_cast<size_t>(count) > cands.size())
    throw InvalidState("update_mask: asked to unmask " + std::to_string(count) + " of " +
                       std::to_string(cands.size()) + " masked positions");
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return a.pos < b.pos;
  });
  cands.resize(static_cast<size_t>(count));
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) { return a.pos < b.pos; });

  UnmaskResult res;
  for (const auto& c : cands) {
    const auto lp = log_softmax(logits.row(c.pos));
    TokenId chosen = -1;
    if (temperature == 0.0) {
      double best = -kInf;
      for (size_t v = 0; v < lp.size(); ++v) {
        if (static_cast<TokenId>(v) == mask_id) continue;
        if (lp[v] > best) {
          best = lp[v];
          chosen = static_cast<TokenId>(v);
        }
      }
    } else {
      double mx = -kInf;
      for (size_t v = 0; v < lp.size(); ++v)
        if (static_cast<TokenId>(v) != mask_id) mx = std::max(mx, lp[v]);
      std::vector<double> weight(lp.size(), 0.0);
      double total = 0.0;
      for (size_t v = 0; v < lp.size(); ++v) {
        if (static_cast<TokenId>(v) == mask_id) continue;
        weight[v] = std::exp((lp[v] - mx) / temperature);
        total += weight[v];
      }
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (size_t v = 0; v < lp.size(); ++v) {
        if (static_cast<TokenId>(v) == mask_id) continue;
        acc += weight[v];
        chosen = static_cast<TokenId>(v);
        if (acc >= target) break;
      }
    }
    res.positions.push_back(c.pos);
    res.tokens.push_back(chosen);
  }
  return res;
}

std::vector<size_t> select_rows_hybrid(std::span<const size_t> active, std::span<const double> prev_divergence,
                                       double k) {
  if (!(k > 0.0 && k <= 1.0)) throw InvalidInput("select_rows_hybrid: k must be in (0,1]");
  if (active.empty()) return {};
  const size_t want = std::min(active.size(), ceil_count(k * static_cast<double>(active.size())));
  auto key = [&](size_t pos) {
    const double d = prev_divergence[pos];
    return std::isnan(d) ? kInf : d;
  };
  std::vector<size_t> order(active.begin(), active.end());
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    const double ka = key(a), kb = key(b);
    if (ka != kb) return ka > kb;
    return a < b;
  });
  order.resize(want);
  std::sort(order.begin(), order.end());
  return order;
}

StepRecord step(SamplerState& state, const RunConfig& cfg, const Weights& w, std::vector<LockEvent>* events) {
  const auto clock_start = std::chrono::steady_clock::now();
  const ModelConfig& mc = w.config;
  const size_t n = state.size();
  const int t = state.t + 1;
  if (t > cfg.steps) throw InvalidState("step: all steps already taken");

  StepRecord rec;
  rec.t = t;
  const std::vector<size_t> active = state.active_positions();
  rec.active = active.size();

  // Rows computed this step.
  std::vector<size_t> computed = active;
  if (selects_rows(cfg.mode)) {
    computed = select_rows_hybrid(active, state.last_divergence, *cfg.policy.fraction);
    std::vector<bool> in(n, false);
    for (size_t i : computed) in[i] = true;
    for (size_t i : active)
      if (!state.recent_inputs.valid[i]) in[i] = true;  // never computed: nothing stale to reuse
    computed.clear();
    for (size_t i : active)
      if (in[i]) computed.push_back(i);
  }
  rec.computed = computed.size();
  rec.computed_rows = computed;

  // Non-computed rows are served from the lock cache or, for stale active
  // rows, from their most recent fresh K/V.
  const bool has_stale = computed.size() != active.size();
  std::vector<LayerKVCache> merged;
  FrozenInputs merged_inputs;
  if (has_stale) {
    merged = state.caches;
    merged_inputs = state.frozen;
    std::vector<bool> in(n, false);
    for (size_t i : computed) in[i] = true;
    for (size_t i : active) {
      if (in[i]) continue;
      for (size_t l = 0; l < merged.size(); ++l)
        merged[l].store(i, state.recent[l].k.row(i), state.recent[l].v.row(i));
      std::copy(state.recent_inputs.x.row(i).begin(), state.recent_inputs.x.row(i).end(),
                merged_inputs.x.row(i).begin());
      merged_inputs.valid[i] = true;
    }
  }
  const ForwardResult fwd = forward_partial(w, state.tokens, computed, has_stale ? merged : state.caches,
                                            has_stale ? merged_inputs : state.frozen, cfg.scale);

  rec.flops_base = flops_base_step(mc, 1, n);
  rec.flops_actual = flops_step_actual(mc, 1, n, computed.size());
  rec.flops_counted = fwd.tally.algorithmic();
  rec.flops_head = fwd.tally.head;
  rec.ratio = static_cast<double>(rec.flops_actual) / static_cast<double>(rec.flops_base);
  if (rec.flops_counted != rec.flops_actual)
    throw InternalConsistency("step " + std::to_string(t) + ": GEMM counter " + std::to_string(rec.flops_counted) +
                              " != closed form " + std::to_string(rec.flops_actual));

  for (size_t i : computed) {
    for (size_t l = 0; l < state.recent.size(); ++l)
      state.recent[l].store(i, fwd.fresh[l].k.row(i), fwd.fresh[l].v.row(i));
    std::copy(fwd.block_inputs.row(i).begin(), fwd.block_inputs.row(i).end(), state.recent_inputs.x.row(i).begin());
    state.recent_inputs.valid[i] = true;
  }
  state.last_assembled = fwd.assembled;

  // Scores on the raw (untempered) posterior of computed rows.
  std::vector<double> divergence(n, kInf), uncert(n, kInf);
  for (size_t i : computed) {
    const auto z = fwd.logits.row(i);
    uncert[i] = uncertainty(log_softmax(z));
    if (t > 1 && state.has_prev[i]) divergence[i] = kl_from_logits(z, state.prev_logits.row(i));
    std::copy(z.begin(), z.end(), state.prev_logits.row(i).begin());
    state.has_prev[i] = true;
    state.last_divergence[i] = divergence[i];
  }

  // Unmasking within the current block.
  const int lb = cfg.effective_block_length();
  const int blocks = cfg.n_gen / lb;
  const int per_block = cfg.steps / blocks;
  const int block = (t - 1) / per_block;
  const std::vector<int> sched = unmask_schedule(lb, per_block);
  const int k_t = sched[static_cast<size_t>((t - 1) % per_block)];
  const size_t begin = state.n_prompt + static_cast<size_t>(block * lb);
  const UnmaskResult um = update_mask(state.prev_logits, state.masked, k_t, begin, begin + static_cast<size_t>(lb),
                                      cfg.temperature, mc.mask_id(), state.rng);
  for (size_t j = 0; j < um.positions.size(); ++j) {
    state.tokens[um.positions[j]] = um.tokens[j];
    state.masked[um.positions[j]] = false;
  }
  rec.newly_unmasked = um.positions;
  rec.committed = um.tokens;

  // Lock candidates: computed (hence active) rows that are unmasked now.
  std::vector<size_t> candidates;
  for (size_t i : computed)
    if (!state.masked[i]) candidates.push_back(i);

  if (locks_enabled(cfg.mode)) {
    const RelockGuard guard{t, state.unlock_step};
    const auto lock_set = evaluate_locks(candidates, divergence, uncert, cfg.policy, &guard);
    apply_locks(state, lock_set, fwd, t, divergence, uncert, events);
    rec.newly_locked = lock_set;

    const auto& up = cfg.policy.unlock;
    if (up.enabled && t % up.probe_period == 0) {
      std::vector<size_t> older;
      for (size_t i : state.locked_positions())
        if (state.lock_step[i] < t) older.push_back(i);
      if (!older.empty()) {
        std::vector<double> us;
        for (size_t i : computed) us.push_back(uncert[i]);
        const double theta = percentile_nearest_rank(us, cfg.policy.percentile);
        const ProbeResult probe = probe_unlock(state, w, cfg.policy, theta, t, cfg.scale, older);
        rec.flops_probe = probe.tally.algorithmic();
        apply_unlocks(state, probe.unlock, t, &probe, events);
        rec.unlocked = probe.unlock;
      }
    }
  }

  // Locked rows report their frozen posterior.
  for (size_t i = 0; i < n; ++i)
    if (state.locked[i])
      std::copy(state.frozen_logits.row(i).begin(), state.frozen_logits.row(i).end(), state.prev_logits.row(i).begin());

  double sum = 0.0;
  size_t cnt = 0;
  for (size_t i : computed) {
    rec.divergence.push_back(divergence[i]);
    rec.uncertainty.push_back(uncert[i]);
    rec.unmasked_after.push_back(!state.masked[i]);
    if (!state.masked[i] && std::isfinite(divergence[i])) {
      sum += divergence[i];
      ++cnt;
    }
  }
  if (cnt > 0) rec.mean_divergence = sum / static_cast<double>(cnt);
  if (cfg.record_logits) rec.logits = state.prev_logits;

  state.t = t;
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  return rec;
}

std::vector<TokenId> make_prompt(const ModelConfig& cfg, int n_prompt, uint64_t seed) {
  SplitMix64 rng(seed ^ 0x5EEDF00DULL);
  std::vector<TokenId> out;
  for (int i = 0; i < n_prompt; ++i)
    out.push_back(static_cast<TokenId>(rng.next() % static_cast<uint64_t>(cfg.mask_id())));
  return out;
}

FlopsReport flops_report(const StepTrace& trace, uint64_t positions) {
  FlopsReport rep;
  ActiveCounts counts;
  counts.positions = positions;
  for (const auto& r : trace) {
    FlopsStep s;
    s.t = r.t;
    s.base = r.flops_base;
    s.actual = r.flops_actual;
    s.ratio = r.ratio;
    s.active = r.active;
    s.computed = r.computed;
    rep.steps.push_back(s);
    rep.total_base += r.flops_base;
    rep.total_actual += r.flops_actual;
    counts.active.push_back(r.active);
  }
  if (rep.total_base > 0)
    rep.total_ratio = static_cast<double>(rep.total_actual) / static_cast<double>(rep.total_base);
  if (!counts.active.empty()) rep.active_ratio = micro_active_ratio(std::span<const ActiveCounts>(&counts, 1));
  return rep;
}

RunResult run_sampler(const RunConfig& cfg, const Weights& w, std::span<const TokenId> prompt) {
  cfg.validate(w.config);
  if (static_cast<int>(prompt.size()) != cfg.n_prompt)
    throw InvalidConfig("run_sampler: prompt length does not match n_prompt");

  const auto start = std::chrono::steady_clock::now();
  SamplerState state = make_state(w.config, prompt, static_cast<size_t>(cfg.n_gen), cfg.seed);
  RunResult res;
  res.n = state.size();
  for (int s = 0; s < cfg.steps; ++s) {
    res.trace.push_back(step(state, cfg, w, &res.events));
    res.total_unmasked += res.trace.back().newly_unmasked.size();
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (state.masked_count() != 0) throw InternalConsistency("run_sampler: masked positions remain after the last step");
  res.tokens = state.tokens;
  res.flops = flops_report(res.trace, res.n);
  return res;
}

std::vector<std::string> check_trace_invariants(const RunResult& run, Mode mode) {
  std::vector<std::string> issues;
  bool any_unlock = false;
  for (size_t s = 0; s < run.trace.size(); ++s) {
    const auto& r = run.trace[s];
    if (r.flops_counted != r.flops_actual)
      issues.push_back("step " + std::to_string(r.t) + ": counter differs from closed form");
    if (r.flops_actual > r.flops_base) issues.push_back("step " + std::to_string(r.t) + ": F_actual > F_base");
    if (s > 0 && !run.trace[s - 1].unlocked.empty()) any_unlock = true;
    if (locks_enabled(mode) && s > 0 && !any_unlock && r.active > run.trace[s - 1].active)
      issues.push_back("step " + std::to_string(r.t) + ": active count increased without an unlock");
  }
  return issues;
}

}  // namespace surelock
