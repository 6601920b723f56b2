#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "surelock/model.hpp"
#include "surelock/numkit.hpp"
#include "surelock/rng.hpp"
#include "surelock/sampler.hpp"

namespace surelock {

// Logit history of one position. steps[s] holds z_{s+1}; divergence[s] is
// KL(z_{s+1} || z_s) with divergence[0] = +inf.
struct Trajectory {
  enum class Source { kSampled, kSynthetic };

  std::vector<std::vector<double>> logits;
  std::vector<double> divergence;
  size_t position = 0;
  Source source = Source::kSynthetic;

  size_t length() const { return logits.size(); }
  // D at 1-based step s.
  double divergence_at(int s) const { return divergence[static_cast<size_t>(s - 1)]; }
};

// Builds a trajectory and fills its divergence series from the logits.
Trajectory make_trajectory(std::vector<std::vector<double>> logits, size_t position = 0,
                           Trajectory::Source source = Trajectory::Source::kSynthetic);

struct TailEstimate {
  double value = 0.0;
  bool degenerate = false;  // zero tail handled by the skip convention
};

// max_{s > t*} D_s / D_{s-1}; 0 -> 0 steps skipped, 0 -> positive gives +inf.
TailEstimate estimate_rho(const Trajectory& traj, int lock_step);

// max_{s > t*} ||z_s - z_{s-1}||_2 / sqrt(D_{s-1}); D_{s-1} = 0 requires a
// zero logit step, otherwise +inf.
TailEstimate estimate_L(const Trajectory& traj, int lock_step);

// L_sm * L / (1 - sqrt(rho)), rho in [0, 1).
double c_tail(double l_sm, double l, double rho);

inline constexpr double kLogSoftmaxLipschitz = 2.0;

struct BoundReport {
  enum class Status { kHolds, kViolated, kNoLock, kInapplicable };

  Status status = Status::kNoLock;
  int lock_step = 0;  // t*
  double lock_divergence = 0.0;
  double rho = 0.0;
  double l = 0.0;
  double l_sm = kLogSoftmaxLipschitz;
  double c_tail = 0.0;
  double lhs = 0.0;  // ||log p_T - log p_{t*}||_inf
  double rhs = 0.0;  // C_tail * sqrt(D_{t*})
  bool holds = false;
  std::string note;
};

std::string to_string(BoundReport::Status status);

// First t* >= 2 with D_{t*} <= eps, tail constants measured on (t*, T], and
// the terminal deviation compared against C_tail * sqrt(D_{t*}) with 1e-9 slack.
BoundReport offline_lock_check(const Trajectory& traj, double eps, double l_sm = kLogSoftmaxLipschitz);

// z_s = z* + magnitude * rho^{s/2} * v, s = 1..T, with a seeded Gaussian
// anchor z* and a seeded zero-mean unit direction v.
Trajectory simulate_trajectory(uint64_t seed, int vocab, int steps, double rho_target, double magnitude);

// Per-position trajectories from a trace recorded with logits snapshots.
std::vector<Trajectory> trajectories_from_trace(const StepTrace& trace);

struct LipschitzEstimate {
  double value = 0.0;
  int samples = 0;
};

struct LayerConstants {
  std::vector<double> head_attention;  // A_att per head
  double a_mha = 0.0;
  double a_ff = 0.0;
  double l_ln = 0.0;
  double w_o_norm = 0.0;
};

struct Constants {
  double radius = 0.0;  // R_x
  double kappa = 0.0;
  int seq_len = 0;
  double embedding_norm = 0.0;  // ||E||_2
  double l_emb = 0.0;
  std::vector<LayerConstants> layers;
  double a_mha = 0.0;  // max over layers
  double a_ff = 0.0;
  double l_ln = 0.0;
  double l_blk = 0.0;
  double head_norm = 0.0;  // ||W_o||_2 of the readout
  double l_net = 0.0;
  double l_all = 0.0;
  double l = 0.0;
  int lipschitz_samples = 0;
  bool all_converged = true;
};

// Empirical sup of ||diag(a) - a a^T||_2 over seeded random score vectors.
double softmax_jacobian_sup(int samples, uint64_t seed, int max_dim = 16);

// Composed Lipschitz constants of the network from per-part bounds and estimates.
Constants constants_at_a_glance(const Weights& w, double radius, double kappa, int seq_len, int samples = 10000,
                                uint64_t seed = 7);

// Max row norm of normalization outputs over a forward of `tokens`.
double calibrate_radius(const Weights& w, std::span<const TokenId> tokens);

// (step, mean D over computed unmasked rows with finite D).
std::vector<std::pair<int, double>> divergence_curve(const StepTrace& trace);

namespace detail {

inline std::vector<double> random_in_ball(SplitMix64& rng, size_t dim, double radius) {
  std::vector<double> v(dim);
  for (double& x : v) x = rng.normal();
  const double n = norm2(v);
  const double r = radius * std::pow(rng.uniform(), 1.0 / static_cast<double>(dim));
  for (double& x : v) x *= r / n;
  return v;
}

}  // namespace detail

// Max over `samples` seeded pairs inside the radius-R ball of |f(x)-f(x')| / |x-x'|.
// Pairs mix a far-apart draw with a local perturbation of log-uniform size,
// both kept inside the ball.
template <typename F>
LipschitzEstimate empirical_lipschitz(F&& f, size_t dim, double radius, int samples, uint64_t seed) {
  SplitMix64 rng(seed);
  LipschitzEstimate est;
  for (int s = 0; s < samples; ++s) {
    const std::vector<double> x = detail::random_in_ball(rng, dim, radius);
    std::vector<double> y;
    if (s % 2 == 0) {
      y = detail::random_in_ball(rng, dim, radius);
    } else {
      std::vector<double> dir(dim);
      for (double& v : dir) v = rng.normal();
      const double step = radius * std::pow(10.0, -4.0 * rng.uniform());
      const double dn = norm2(dir);
      y = x;
      for (size_t i = 0; i < dim; ++i) y[i] += step * dir[i] / dn;
      const double yn = norm2(y);
      if (yn > radius)
        for (double& v : y) v *= radius / yn;
    }
    const double din = distance2(x, y);
    if (din == 0.0) continue;
    const auto fx = f(std::span<const double>(x));
    const auto fy = f(std::span<const double>(y));
    est.value = std::max(est.value, distance2(fx, fy) / din);
    ++est.samples;
  }
  return est;
}

}  // namespace surelock
