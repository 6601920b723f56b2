#include "surelock/flops.hpp"

#include "surelock/errors.hpp"

namespace surelock {

namespace {

// Per-layer, per-query-row cost; every term of the base formula is linear in
// the number of query rows once N (keys) is fixed.
uint64_t per_row_layer_cost(const ModelConfig& cfg, uint64_t seq_len) {
  const auto H = static_cast<uint64_t>(cfg.n_heads);
  const auto Hkv = static_cast<uint64_t>(cfg.n_kv_heads);
  const auto d = static_cast<uint64_t>(cfg.d_model);
  const auto dh = static_cast<uint64_t>(cfg.head_dim());
  const auto dff = static_cast<uint64_t>(cfg.d_ff);
  return 4 * H * seq_len * dh + 2 * d * d + 2 * d * d + 4 * d * Hkv * dh + 6 * d * dff;
}

}  // namespace

uint64_t flops_base_step(const ModelConfig& cfg, uint64_t batch, uint64_t seq_len) {
  if (batch == 0 || seq_len == 0) throw InvalidInput("flops_base_step: batch and sequence length must be positive");
  const auto H = static_cast<uint64_t>(cfg.n_heads);
  const auto Hkv = static_cast<uint64_t>(cfg.n_kv_heads);
  const auto d = static_cast<uint64_t>(cfg.d_model);
  const auto dh = static_cast<uint64_t>(cfg.head_dim());
  const auto dff = static_cast<uint64_t>(cfg.d_ff);
  const auto L = static_cast<uint64_t>(cfg.n_layers);
  const uint64_t B = batch, N = seq_len;
  return L * (4 * B * H * N * N * dh + 2 * B * N * d * d + 2 * B * N * d * d + 4 * B * N * d * Hkv * dh +
              6 * B * N * d * dff);
}

uint64_t flops_step_actual(const ModelConfig& cfg, uint64_t batch, uint64_t seq_len, uint64_t computed_rows) {
  if (computed_rows > batch * seq_len) throw InvalidInput("flops_step_actual: computed rows exceed B*N");
  if (batch == 0 || seq_len == 0) throw InvalidInput("flops_step_actual: batch and sequence length must be positive");
  return static_cast<uint64_t>(cfg.n_layers) * computed_rows * per_row_layer_cost(cfg, seq_len);
}

uint64_t flops_head(const ModelConfig& cfg, uint64_t rows) {
  return 2 * rows * static_cast<uint64_t>(cfg.d_model) * static_cast<uint64_t>(cfg.vocab);
}

double micro_active_ratio(std::span<const ActiveCounts> batches) {
  if (batches.empty()) throw InvalidInput("micro_active_ratio: no traces");
  uint64_t num = 0, den = 0;
  for (const auto& b : batches) {
    for (uint64_t m : b.active) {
      num += m;
      den += b.positions;
    }
  }
  if (den == 0) throw InvalidInput("micro_active_ratio: traces contain no steps");
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace surelock
