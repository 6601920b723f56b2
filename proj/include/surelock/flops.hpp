#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "surelock/model.hpp"

namespace surelock {

// Algorithmic (GEMM-only) FLOPs of one dense step:
//   L * (4BHN^2 d_h + 2BNd^2 + 2BNd^2 + 4BNd H_kv d_h + 6BNd d_ff)
// The output head and element-wise work are excluded.
uint64_t flops_base_step(const ModelConfig& cfg, uint64_t batch, uint64_t seq_len);

// (C / (B N)) * flops_base_step, evaluated exactly in integers. C is the number
// of rows computed this step.
uint64_t flops_step_actual(const ModelConfig& cfg, uint64_t batch, uint64_t seq_len, uint64_t computed_rows);

// Output-head GEMM cost for `rows` rows, reported beside the algorithmic count.
uint64_t flops_head(const ModelConfig& cfg, uint64_t rows);

struct FlopsStep {
  int t = 0;
  uint64_t base = 0;
  uint64_t actual = 0;
  double ratio = 1.0;
  uint64_t active = 0;    // M_t
  uint64_t computed = 0;  // C_t
};

struct FlopsReport {
  std::vector<FlopsStep> steps;
  uint64_t total_base = 0;
  uint64_t total_actual = 0;
  double total_ratio = 1.0;
  double active_ratio = 1.0;  // r-bar
};

// Active-count history of one batch: M_t per step over B*N positions.
struct ActiveCounts {
  std::vector<uint64_t> active;
  uint64_t positions = 0;  // B * N_b
};

// Micro-averaged active ratio sum M / sum (B N) over all steps and batches.
double micro_active_ratio(std::span<const ActiveCounts> batches);

}  // namespace surelock
