#include "surelock/analysis.hpp"

#include <limits>

#include "surelock/errors.hpp"

namespace surelock {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kBoundSlack = 1e-9;

void check_lock_step(const Trajectory& traj, int lock_step) {
  if (lock_step < 2) throw InvalidInput("tail estimate: lock step must be >= 2");
  if (static_cast<size_t>(lock_step) >= traj.length())
    throw UndefinedEstimate("tail estimate: no steps after the lock step");
}

Matrix column_block(const Matrix& m, size_t c0, size_t width) {
  Matrix out(m.rows(), width);
  for (size_t r = 0; r < m.rows(); ++r)
    for (size_t c = 0; c < width; ++c) out(r, c) = m(r, c0 + c);
  return out;
}

double checked_norm(const Matrix& m, bool& converged) {
  const auto r = spectral_norm(m, 5000, 1e-13);
  converged = converged && r.converged;
  return r.value;
}

}  // namespace

Trajectory make_trajectory(std::vector<std::vector<double>> logits, size_t position, Trajectory::Source source) {
  Trajectory traj;
  traj.logits = std::move(logits);
  traj.position = position;
  traj.source = source;
  traj.divergence.assign(traj.logits.size(), kInf);
  for (size_t s = 1; s < traj.logits.size(); ++s)
    traj.divergence[s] = kl_from_logits(traj.logits[s], traj.logits[s - 1]);
  return traj;
}

TailEstimate estimate_rho(const Trajectory& traj, int lock_step) {
  check_lock_step(traj, lock_step);
  TailEstimate est;
  bool any = false;
  const int T = static_cast<int>(traj.length());
  for (int s = lock_step + 1; s <= T; ++s) {
    const double prev = traj.divergence_at(s - 1);
    const double cur = traj.divergence_at(s);
    if (prev == 0.0) {
      if (cur == 0.0) continue;
      est.value = kInf;
      any = true;
      continue;
    }
    est.value = std::max(est.value, cur / prev);
    any = true;
  }
  est.degenerate = !any;
  return est;
}

TailEstimate estimate_L(const Trajectory& traj, int lock_step) {
  check_lock_step(traj, lock_step);
  TailEstimate est;
  bool any = false;
  const int T = static_cast<int>(traj.length());
  for (int s = lock_step + 1; s <= T; ++s) {
    const double step = distance2(traj.logits[static_cast<size_t>(s - 1)], traj.logits[static_cast<size_t>(s - 2)]);
    const double prev = traj.divergence_at(s - 1);
    if (prev == 0.0) {
      if (step == 0.0) continue;
      est.value = kInf;
      any = true;
      continue;
    }
    est.value = std::max(est.value, step / std::sqrt(prev));
    any = true;
  }
  est.degenerate = !any;
  return est;
}

double c_tail(double l_sm, double l, double rho) {
  if (!(rho >= 0.0 && rho < 1.0)) throw InvalidInput("c_tail: rho must be in [0, 1)");
  if (!(l_sm > 0.0) || !(l >= 0.0)) throw InvalidInput("c_tail: need L_sm > 0 and L >= 0");
  return l_sm * l / (1.0 - std::sqrt(rho));
}

std::string to_string(BoundReport::Status status) {
  switch (status) {
    case BoundReport::Status::kHolds: return "holds";
    case BoundReport::Status::kViolated: return "violated";
    case BoundReport::Status::kNoLock: return "no-lock";
    case BoundReport::Status::kInapplicable: return "inapplicable";
  }
  return "unknown";
}

BoundReport offline_lock_check(const Trajectory& traj, double eps, double l_sm) {
  if (traj.length() < 3) throw InvalidInput("offline_lock_check: trajectory needs at least 3 steps");
  BoundReport rep;
  rep.l_sm = l_sm;
  const int T = static_cast<int>(traj.length());
  for (int s = 2; s <= T; ++s) {
    if (traj.divergence_at(s) <= eps) {
      rep.lock_step = s;
      break;
    }
  }
  if (rep.lock_step == 0) {
    rep.status = BoundReport::Status::kNoLock;
    rep.note = "no step satisfies D <= eps";
    return rep;
  }
  rep.lock_divergence = traj.divergence_at(rep.lock_step);
  rep.lhs = norm_inf([&] {
    const auto a = log_softmax(traj.logits.back());
    const auto b = log_softmax(traj.logits[static_cast<size_t>(rep.lock_step - 1)]);
    std::vector<double> diff(a.size());
    for (size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
    return diff;
  }());

  if (rep.lock_step == T) {
    // Locked at the terminal step: nothing left to deviate.
    rep.holds = rep.lhs <= kBoundSlack;
    rep.status = rep.holds ? BoundReport::Status::kHolds : BoundReport::Status::kViolated;
    rep.note = "empty tail";
    return rep;
  }

  const TailEstimate rho = estimate_rho(traj, rep.lock_step);
  const TailEstimate l = estimate_L(traj, rep.lock_step);
  rep.rho = rho.value;
  rep.l = l.value;
  if (!(rho.value < 1.0) || !std::isfinite(l.value)) {
    rep.status = BoundReport::Status::kInapplicable;
    rep.note = !(rho.value < 1.0) ? "measured rho >= 1" : "measured L is unbounded";
    return rep;
  }
  rep.c_tail = c_tail(l_sm, l.value, rho.value);
  rep.rhs = rep.c_tail * std::sqrt(rep.lock_divergence);
  rep.holds = rep.lhs <= rep.rhs + kBoundSlack;
  rep.status = rep.holds ? BoundReport::Status::kHolds : BoundReport::Status::kViolated;
  if (rho.degenerate) rep.note = "zero tail";
  return rep;
}

Trajectory simulate_trajectory(uint64_t seed, int vocab, int steps, double rho_target, double magnitude) {
  if (!(rho_target > 0.0 && rho_target < 1.0)) throw InvalidInput("simulate_trajectory: rho must be in (0,1)");
  if (steps < 4) throw InvalidInput("simulate_trajectory: need at least 4 steps");
  if (vocab < 2) throw InvalidInput("simulate_trajectory: need vocab >= 2");
  SplitMix64 rng(seed);
  const auto V = static_cast<size_t>(vocab);
  std::vector<double> anchor(V), dir(V);
  for (double& x : anchor) x = rng.normal();
  for (double& x : dir) x = rng.normal();
  double mean = 0.0;
  for (double x : dir) mean += x;
  mean /= static_cast<double>(V);
  for (double& x : dir) x -= mean;
  const double dn = norm2(dir);
  for (double& x : dir) x /= dn;

  std::vector<std::vector<double>> logits;
  for (int s = 1; s <= steps; ++s) {
    const double c = magnitude * std::pow(rho_target, 0.5 * s);
    std::vector<double> z(V);
    for (size_t i = 0; i < V; ++i) z[i] = anchor[i] + c * dir[i];
    logits.push_back(std::move(z));
  }
  return make_trajectory(std::move(logits), 0, Trajectory::Source::kSynthetic);
}

std::vector<Trajectory> trajectories_from_trace(const StepTrace& trace) {
  if (trace.empty()) throw InvalidInput("trajectories_from_trace: empty trace");
  const size_t n = trace.front().logits.rows();
  if (n == 0) throw InvalidInput("trajectories_from_trace: trace was recorded without logits");
  std::vector<Trajectory> out;
  for (size_t i = 0; i < n; ++i) {
    std::vector<std::vector<double>> z;
    for (const auto& r : trace) {
      if (r.logits.rows() != n) throw InvalidInput("trajectories_from_trace: inconsistent logits snapshots");
      z.emplace_back(r.logits.row(i).begin(), r.logits.row(i).end());
    }
    out.push_back(make_trajectory(std::move(z), i, Trajectory::Source::kSampled));
  }
  return out;
}

double softmax_jacobian_sup(int samples, uint64_t seed, int max_dim) {
  SplitMix64 rng(seed);
  double sup = 0.0;
  for (int s = 0; s < samples; ++s) {
    const size_t n = 2 + static_cast<size_t>(rng.next() % static_cast<uint64_t>(std::max(1, max_dim - 1)));
    std::vector<double> scores(n);
    if (s % 4 == 0) {
      // Near two-point distributions, where the supremum is attained.
      for (double& x : scores) x = -30.0 + rng.normal();
      scores[0] = rng.normal();
      scores[1] = scores[0] + 0.1 * rng.normal();
    } else {
      const double spread = std::pow(10.0, -2.0 + 3.0 * rng.uniform());
      for (double& x : scores) x = spread * rng.normal();
    }
    const auto a = softmax(scores);
    Matrix j(n, n);
    for (size_t r = 0; r < n; ++r)
      for (size_t c = 0; c < n; ++c) j(r, c) = (r == c ? a[r] : 0.0) - a[r] * a[c];
    sup = std::max(sup, spectral_norm(j, 2000, 1e-14).value);
  }
  return sup;
}

Constants constants_at_a_glance(const Weights& w, double radius, double kappa, int seq_len, int samples,
                                uint64_t seed) {
  if (!(radius > 0.0)) throw InvalidInput("constants: radius must be positive");
  if (!(kappa >= 0.0)) throw InvalidInput("constants: kappa must be non-negative");
  if (seq_len < 1) throw InvalidInput("constants: sequence length must be positive");
  const ModelConfig& cfg = w.config;
  const auto d = static_cast<size_t>(cfg.d_model);
  const auto dh = static_cast<size_t>(cfg.head_dim());
  const size_t group = static_cast<size_t>(cfg.n_heads / cfg.n_kv_heads);

  Constants c;
  c.radius = radius;
  c.kappa = kappa;
  c.seq_len = seq_len;
  c.lipschitz_samples = samples;
  c.embedding_norm = checked_norm(w.embedding, c.all_converged);
  c.l_emb = std::sqrt(2.0) * c.embedding_norm;

  const double n = static_cast<double>(seq_len);
  for (size_t li = 0; li < w.layers.size(); ++li) {
    const LayerWeights& lw = w.layers[li];
    LayerConstants lc;
    double max_att = 0.0;
    for (size_t h = 0; h < static_cast<size_t>(cfg.n_heads); ++h) {
      const size_t g = h / group;
      const double q = checked_norm(column_block(lw.w_q, h * dh, dh), c.all_converged);
      const double k = checked_norm(column_block(lw.w_k, g * dh, dh), c.all_converged);
      const double v = checked_norm(column_block(lw.w_v, g * dh, dh), c.all_converged);
      const double a_att = v * (1.0 + q * k / 2.0 * n * radius * radius / std::sqrt(static_cast<double>(dh)));
      lc.head_attention.push_back(a_att);
      max_att = std::max(max_att, a_att);
    }
    lc.w_o_norm = checked_norm(lw.w_o, c.all_converged);
    lc.a_mha = lc.w_o_norm * max_att;

    const uint64_t layer_seed = seed + 1000 * li;
    lc.a_ff = empirical_lipschitz([&](std::span<const double> x) { return feed_forward(lw, x); }, d, radius,
                                  samples, layer_seed)
                  .value;
    auto ln = [&](const std::vector<double>& gain, const std::vector<double>& bias) {
      return [&gain, &bias](std::span<const double> x) {
        std::vector<double> out(x.size());
        layer_norm(x, gain, bias, out);
        return out;
      };
    };
    const double ln1 = empirical_lipschitz(ln(lw.ln1_gain, lw.ln1_bias), d, radius, samples, layer_seed + 1).value;
    const double ln2 = empirical_lipschitz(ln(lw.ln2_gain, lw.ln2_bias), d, radius, samples, layer_seed + 2).value;
    lc.l_ln = std::max(ln1, ln2);

    c.a_mha = std::max(c.a_mha, lc.a_mha);
    c.a_ff = std::max(c.a_ff, lc.a_ff);
    c.l_ln = std::max(c.l_ln, lc.l_ln);
    c.layers.push_back(std::move(lc));
  }
  c.l_blk = 1.0 + c.a_ff * c.a_mha * c.l_ln;
  c.head_norm = checked_norm(w.head, c.all_converged);
  c.l_net = c.head_norm * std::pow(c.l_blk, static_cast<double>(cfg.n_layers));
  c.l_all = c.l_net * c.l_emb;
  c.l = c.l_all * (1.0 + kappa);
  return c;
}

double calibrate_radius(const Weights& w, std::span<const TokenId> tokens) {
  return forward_full(w, tokens).max_normed_row_norm;
}

std::vector<std::pair<int, double>> divergence_curve(const StepTrace& trace) {
  std::vector<std::pair<int, double>> out;
  for (const auto& r : trace)
    if (r.mean_divergence) out.emplace_back(r.t, *r.mean_divergence);
  return out;
}

}  // namespace surelock
