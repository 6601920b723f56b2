#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "surelock/numkit.hpp"

namespace surelock {

using TokenId = int32_t;

// Toy bidirectional transformer dimensions. The last vocabulary id is the
// MASK token.
struct ModelConfig {
  int vocab = 32;
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 4;
  int n_kv_heads = 4;
  int d_ff = 64;
  int max_seq = 64;

  int head_dim() const { return d_model / n_heads; }
  int kv_dim() const { return n_kv_heads * head_dim(); }
  TokenId mask_id() const { return vocab - 1; }

  // Throws InvalidConfig when dimensions are inconsistent.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Matrix w_q;     // d x d
  Matrix w_k;     // d x kv_dim
  Matrix w_v;     // d x kv_dim
  Matrix w_o;     // d x d
  std::vector<double> ln1_gain, ln1_bias;
  std::vector<double> ln2_gain, ln2_bias;
  Matrix w_up;    // d x d_ff
  Matrix w_gate;  // d x d_ff
  Matrix w_down;  // d_ff x d
};

struct Weights {
  ModelConfig config;
  std::optional<uint64_t> seed;
  Matrix embedding;   // vocab x d
  Matrix positional;  // max_seq x d
  std::vector<LayerWeights> layers;
  Matrix head;        // d x vocab

  // Every parameter multiplied by `s`, normalization gains and biases included.
  Weights scaled(double s) const;

  // Throws InvalidConfig on a shape mismatch or non-finite entry.
  void validate() const;
};

// Parameters ~ N(0, init_std^2) from splitmix64 -> Box-Muller, filled in this
// order: embedding, positional, then per layer w_q, w_k, w_v, w_o, ln1_gain,
// ln1_bias, ln2_gain, ln2_bias, w_up, w_gate, w_down, then head. Each tensor is
// filled row-major. Normalization gains are 1 + draw.
Weights init_weights(const ModelConfig& cfg, uint64_t seed, double init_std = 0.02);

// Weight file: {"config": {...}, "seed": n?, "tensors": {...}} with nested
// row-major arrays. Loading validates shapes against the config.
Weights load_weights(const std::string& path);
void save_weights(const Weights& w, const std::string& path);

// Per-layer key/value rows. `valid[i]` marks rows holding usable data.
struct LayerKVCache {
  Matrix k;  // N x kv_dim
  Matrix v;  // N x kv_dim
  std::vector<bool> valid;

  LayerKVCache() = default;
  LayerKVCache(size_t n, size_t kv_dim) : k(n, kv_dim), v(n, kv_dim), valid(n, false) {}

  void store(size_t row, std::span<const double> key, std::span<const double> value);
  void invalidate(size_t row) { valid[row] = false; }
};

std::vector<LayerKVCache> make_caches(const ModelConfig& cfg, size_t n);

// Block inputs x-hat captured when a row is locked.
struct FrozenInputs {
  Matrix x;  // N x d
  std::vector<bool> valid;

  FrozenInputs() = default;
  FrozenInputs(size_t n, size_t d) : x(n, d), valid(n, false) {}
};

// GEMM multiply-accumulate counter: 2*m*n*k per m x n x k product.
struct GemmTally {
  uint64_t q = 0, k = 0, v = 0, out = 0;
  uint64_t scores = 0, mix = 0;  // QK^T and AV
  uint64_t ffn_up = 0, ffn_gate = 0, ffn_down = 0;
  uint64_t head = 0;             // informational, not part of algorithmic FLOPs

  uint64_t algorithmic() const { return q + k + v + out + scores + mix + ffn_up + ffn_gate + ffn_down; }
  GemmTally& operator+=(const GemmTally& o);
};

struct ForwardOptions {
  bool record_attention = false;
};

struct ForwardResult {
  std::vector<size_t> rows;             // computed positions, ascending
  Matrix logits;                        // N x vocab, filled on `rows`
  Matrix block_inputs;                  // N x d, layer-1 input on `rows`
  std::vector<LayerKVCache> fresh;      // per layer, valid exactly on `rows`
  std::vector<LayerKVCache> assembled;  // per layer, full-length K/V used by attention
  GemmTally tally;
  // layer-major, then head: |rows| x N attention probabilities.
  std::vector<Matrix> attention;
  // Largest row norm of any normalization output (calibration of R_x).
  double max_normed_row_norm = 0.0;
};

// Computes only the `active` rows. Every other row must have valid cache rows at
// every layer and a valid frozen input; it contributes cached K/V and passes its
// frozen input through untouched. Tokens of non-active rows are never read.
ForwardResult forward_partial(const Weights& w, std::span<const TokenId> tokens,
                              std::span<const size_t> active,
                              const std::vector<LayerKVCache>& caches,
                              const FrozenInputs& frozen, double scale = 1.0,
                              const ForwardOptions& opts = {});

// Reference forward over all rows with no partitioning.
ForwardResult forward_full(const Weights& w, std::span<const TokenId> tokens, double scale = 1.0);

// Full-depth forward for `rows` starting from their frozen inputs, attending to
// the given per-layer K/V tables. Used by the unlock probe. Only `logits` and
// `tally` of the result are filled.
ForwardResult forward_probe(const Weights& w, std::span<const size_t> rows,
                            const FrozenInputs& frozen,
                            const std::vector<LayerKVCache>& kv, double scale = 1.0);

// Gated feed-forward of one layer applied to a single row (no residual).
std::vector<double> feed_forward(const LayerWeights& lw, std::span<const double> x);

}  // namespace surelock
