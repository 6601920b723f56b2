#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>

#include "surelock/errors.hpp"
#include "surelock/flops.hpp"
#include "surelock/model.hpp"
#include "test_support.hpp"

using namespace surelock;

namespace {

std::vector<TokenId> random_tokens(const ModelConfig& cfg, size_t n, uint64_t seed, double mask_rate = 0.3) {
  SplitMix64 rng(seed);
  std::vector<TokenId> t(n);
  for (auto& x : t)
    x = rng.uniform() < mask_rate ? cfg.mask_id() : static_cast<TokenId>(rng.next() % static_cast<uint64_t>(cfg.mask_id()));
  return t;
}

// Cache + frozen inputs captured from a full forward for the rows in `locked`.
void capture(const ForwardResult& full, const std::vector<size_t>& locked, std::vector<LayerKVCache>& caches,
             FrozenInputs& frozen) {
  for (size_t i : locked) {
    for (size_t l = 0; l < caches.size(); ++l) caches[l].store(i, full.fresh[l].k.row(i), full.fresh[l].v.row(i));
    std::copy(full.block_inputs.row(i).begin(), full.block_inputs.row(i).end(), frozen.x.row(i).begin());
    frozen.valid[i] = true;
  }
}

std::vector<size_t> complement(size_t n, const std::vector<size_t>& locked) {
  std::vector<bool> is(n, false);
  for (size_t i : locked) is[i] = true;
  std::vector<size_t> out;
  for (size_t i = 0; i < n; ++i)
    if (!is[i]) out.push_back(i);
  return out;
}

double max_abs_diff(const Matrix& a, const Matrix& b, const std::vector<size_t>& rows) {
  double m = 0.0;
  for (size_t r : rows)
    for (size_t c = 0; c < a.cols(); ++c) m = std::max(m, std::abs(a(r, c) - b(r, c)));
  return m;
}

// Independent re-implementation of the documented initializer stream.
double oracle_normal(uint64_t& state) {
  auto next = [&state] {
    uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  };
  const double u1 = static_cast<double>((next() >> 11) + 1) / 9007199254740992.0;
  const double u2 = static_cast<double>((next() >> 11) + 1) / 9007199254740992.0;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace

TEST_CASE("init_weights is deterministic and seed-sensitive") {
  const auto cfg = testing::toy_config();
  const Weights a = init_weights(cfg, 1), b = init_weights(cfg, 1), c = init_weights(cfg, 2);
  CHECK(a.embedding == b.embedding);
  CHECK(a.head == b.head);
  CHECK(a.layers.back().w_down == b.layers.back().w_down);
  CHECK_FALSE(a.embedding == c.embedding);
  CHECK_NOTHROW(a.validate());
}

TEST_CASE("embedding matches the PRNG oracle and is small") {
  ModelConfig cfg;
  cfg.vocab = 16;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_kv_heads = 2;
  cfg.n_layers = 1;
  cfg.d_ff = 8;
  cfg.max_seq = 4;
  const Weights w = init_weights(cfg, 99);
  REQUIRE(w.embedding.rows() == 16);
  REQUIRE(w.embedding.cols() == 8);
  uint64_t state = 99;
  int small = 0;
  for (size_t r = 0; r < 16; ++r)
    for (size_t c = 0; c < 8; ++c) {
      CHECK(w.embedding(r, c) == 0.02 * oracle_normal(state));
      if (std::abs(w.embedding(r, c)) < 0.2) ++small;
    }
  CHECK(small == 128);
  // Positional table follows the embedding in the stream.
  CHECK(w.positional(0, 0) == 0.02 * oracle_normal(state));
}

TEST_CASE("config validation") {
  ModelConfig c = testing::toy_config();
  c.n_heads = 5;
  CHECK_THROWS_AS(c.validate(), InvalidConfig);
  c = testing::toy_config();
  c.n_kv_heads = 3;
  CHECK_THROWS_AS(c.validate(), InvalidConfig);
  c = testing::toy_config();
  c.vocab = 2;
  CHECK_THROWS_AS(c.validate(), InvalidConfig);
}

TEST_CASE("forward_partial with the identity partition equals the full forward") {
  for (int grouped = 0; grouped < 2; ++grouped) {
    ModelConfig cfg = testing::toy_config();
    if (grouped) cfg.n_kv_heads = 2;
    const Weights w = init_weights(cfg, 5, 0.2);
    const auto tokens = random_tokens(cfg, 32, 3);
    const ForwardResult full = forward_full(w, tokens);
    std::vector<size_t> all(32);
    for (size_t i = 0; i < 32; ++i) all[i] = i;
    const ForwardResult part = forward_partial(w, tokens, all, make_caches(cfg, 32), FrozenInputs(32, 32));
    CHECK(max_abs_diff(full.logits, part.logits, all) <= 1e-12);
  }
}

TEST_CASE("locked rows served from cache reproduce the full forward") {
  const auto cfg = testing::toy_config();
  const Weights w = init_weights(cfg, 6, 0.2);
  SplitMix64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto tokens = random_tokens(cfg, 32, 100 + trial);
    const ForwardResult full = forward_full(w, tokens);
    std::vector<size_t> locked;
    for (size_t i = 0; i < 32; ++i)
      if (rng.uniform() < 0.5) locked.push_back(i);
    auto active = complement(32, locked);
    if (active.empty()) continue;
    auto caches = make_caches(cfg, 32);
    FrozenInputs frozen(32, 32);
    capture(full, locked, caches, frozen);
    const ForwardResult part = forward_partial(w, tokens, active, caches, frozen);
    CHECK(max_abs_diff(full.logits, part.logits, active) <= 1e-9);
    // Locked rows cost no GEMM work.
    CHECK(part.tally.algorithmic() == flops_step_actual(cfg, 1, 32, active.size()));
    CHECK(part.tally.head == flops_head(cfg, active.size()));
  }
}

TEST_CASE("locked token ids are never read") {
  const auto cfg = testing::toy_config();
  const Weights w = init_weights(cfg, 6, 0.2);
  auto tokens = random_tokens(cfg, 32, 7);
  const ForwardResult full = forward_full(w, tokens);
  const std::vector<size_t> locked{0, 3, 9, 20};
  auto caches = make_caches(cfg, 32);
  FrozenInputs frozen(32, 32);
  capture(full, locked, caches, frozen);
  const auto active = complement(32, locked);
  const ForwardResult a = forward_partial(w, tokens, active, caches, frozen);
  for (size_t i : locked) tokens[i] = (tokens[i] + 5) % cfg.mask_id();
  const ForwardResult b = forward_partial(w, tokens, active, caches, frozen);
  CHECK(a.logits == b.logits);
}

TEST_CASE("forward_partial is a pure function") {
  const auto cfg = testing::toy_config();
  const Weights w = init_weights(cfg, 9, 0.2);
  const auto tokens = random_tokens(cfg, 20, 1);
  std::vector<size_t> all(20);
  for (size_t i = 0; i < 20; ++i) all[i] = i;
  const auto caches = make_caches(cfg, 20);
  const FrozenInputs frozen(20, 32);
  CHECK(forward_partial(w, tokens, all, caches, frozen).logits ==
        forward_partial(w, tokens, all, caches, frozen).logits);
}

TEST_CASE("attention rows sum to one over all keys") {
  const auto cfg = testing::toy_config();
  const Weights w = init_weights(cfg, 10, 0.5);
  const auto tokens = random_tokens(cfg, 24, 2);
  const ForwardResult full = forward_full(w, tokens);
  const std::vector<size_t> locked{1, 2, 3, 17};
  auto caches = make_caches(cfg, 24);
  FrozenInputs frozen(24, 32);
  capture(full, locked, caches, frozen);
  ForwardOptions opts;
  opts.record_attention = true;
  const ForwardResult part = forward_partial(w, tokens, complement(24, locked), caches, frozen, 1.0, opts);
  REQUIRE(part.attention.size() == static_cast<size_t>(cfg.n_layers * cfg.n_heads));
  for (const Matrix& a : part.attention) {
    CHECK(a.cols() == 24);
    for (size_t r = 0; r < a.rows(); ++r) {
      double s = 0.0;
      for (double x : a.row(r)) s += x;
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("zero weights give a uniform posterior everywhere") {
  const auto cfg = testing::toy_config();
  const Weights w = init_weights(cfg, 11);
  const auto tokens = random_tokens(cfg, 16, 3);
  std::vector<size_t> all(16);
  for (size_t i = 0; i < 16; ++i) all[i] = i;
  const ForwardResult r = forward_partial(w, tokens, all, make_caches(cfg, 16), FrozenInputs(16, 32), 0.0);
  for (double x : r.logits.data()) CHECK(x == 0.0);
}

TEST_CASE("forward_partial error paths") {
  const auto cfg = testing::toy_config();
  const Weights w = init_weights(cfg, 12);
  const auto tokens = random_tokens(cfg, 8, 4);
  auto caches = make_caches(cfg, 8);
  FrozenInputs frozen(8, 32);
  CHECK_THROWS_AS(forward_partial(w, tokens, std::vector<size_t>{}, caches, frozen), NoWork);
  // Row 7 is not active and has no cache.
  CHECK_THROWS_AS(forward_partial(w, tokens, std::vector<size_t>{0, 1, 2, 3, 4, 5, 6}, caches, frozen),
                  StateCorruption);
  CHECK_THROWS_AS(forward_partial(w, tokens, std::vector<size_t>{3, 1}, caches, frozen), InvalidInput);
}

TEST_CASE("weight file round trip and shape validation") {
  const auto cfg = testing::worked_config();
  const Weights w = init_weights(cfg, 13);
  const auto path = (std::filesystem::temp_directory_path() / "surelock_weights_test.json").string();
  save_weights(w, path);
  const Weights back = load_weights(path);
  CHECK(back.config == cfg);
  CHECK(back.seed.value() == 13);
  CHECK(back.embedding == w.embedding);
  CHECK(back.layers[1].w_gate == w.layers[1].w_gate);

  Weights broken = w;
  broken.layers[0].w_k = Matrix(3, 3);
  save_weights(broken, path);
  CHECK_THROWS_AS(load_weights(path), InvalidConfig);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_weights(path), IoError);
}
