#include "surelock/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include <json.hpp>

#include "surelock/errors.hpp"
#include "surelock/rng.hpp"

namespace surelock {

using json = nlohmann::json;

void ModelConfig::validate() const {
  if (vocab < 3 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || n_kv_heads <= 0 || d_ff <= 0 ||
      max_seq <= 0)
    throw InvalidConfig("model config: all dimensions must be positive and vocab >= 3");
  if (d_model % n_heads != 0) throw InvalidConfig("model config: d_model must be a multiple of n_heads");
  if (n_heads % n_kv_heads != 0) throw InvalidConfig("model config: n_kv_heads must divide n_heads");
}

GemmTally& GemmTally::operator+=(const GemmTally& o) {
  q += o.q;
  k += o.k;
  v += o.v;
  out += o.out;
  scores += o.scores;
  mix += o.mix;
  ffn_up += o.ffn_up;
  ffn_gate += o.ffn_gate;
  ffn_down += o.ffn_down;
  head += o.head;
  return *this;
}

void LayerKVCache::store(size_t row, std::span<const double> key, std::span<const double> value) {
  std::copy(key.begin(), key.end(), k.row(row).begin());
  std::copy(value.begin(), value.end(), v.row(row).begin());
  valid[row] = true;
}

std::vector<LayerKVCache> make_caches(const ModelConfig& cfg, size_t n) {
  return std::vector<LayerKVCache>(static_cast<size_t>(cfg.n_layers),
                                   LayerKVCache(n, static_cast<size_t>(cfg.kv_dim())));
}

namespace {

void scale_in_place(Matrix& m, double s) {
  for (double& x : m.data()) x *= s;
}
void scale_in_place(std::vector<double>& v, double s) {
  for (double& x : v) x *= s;
}

void fill_normal(Matrix& m, SplitMix64& rng, double std) {
  for (double& x : m.data()) x = std * rng.normal();
}
void fill_normal(std::vector<double>& v, SplitMix64& rng, double std, double offset) {
  for (double& x : v) x = offset + std * rng.normal();
}

void check_shape(const Matrix& m, size_t r, size_t c, const std::string& name) {
  if (m.rows() != r || m.cols() != c)
    throw InvalidConfig("weights: tensor '" + name + "' has shape " + std::to_string(m.rows()) + "x" +
                        std::to_string(m.cols()) + ", expected " + std::to_string(r) + "x" +
                        std::to_string(c));
  for (double x : m.data())
    if (!std::isfinite(x)) throw InvalidConfig("weights: tensor '" + name + "' has a non-finite entry");
}
void check_shape(const std::vector<double>& v, size_t n, const std::string& name) {
  if (v.size() != n)
    throw InvalidConfig("weights: vector '" + name + "' has length " + std::to_string(v.size()) +
                        ", expected " + std::to_string(n));
  for (double x : v)
    if (!std::isfinite(x)) throw InvalidConfig("weights: vector '" + name + "' has a non-finite entry");
}

Matrix gemm(const Matrix& a, const Matrix& b, uint64_t& counter) {
  counter += 2ULL * a.rows() * a.cols() * b.cols();
  return matmul(a, b);
}

Matrix normalize_rows(const Matrix& x, const std::vector<double>& gain, const std::vector<double>& bias,
                      double& max_row_norm) {
  Matrix out(x.rows(), x.cols());
  for (size_t r = 0; r < x.rows(); ++r) {
    layer_norm(x.row(r), gain, bias, out.row(r));
    max_row_norm = std::max(max_row_norm, norm2(out.row(r)));
  }
  return out;
}

Matrix column_slice(const Matrix& m, size_t c0, size_t width) {
  Matrix out(m.rows(), width);
  for (size_t r = 0; r < m.rows(); ++r)
    for (size_t c = 0; c < width; ++c) out(r, c) = m(r, c0 + c);
  return out;
}

void softmax_rows(Matrix& s) {
  for (size_t r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& x : row) {
      x = std::exp(x - mx);
      sum += x;
    }
    for (double& x : row) x /= sum;
  }
}

// Multi-head attention of `q` (C x d) against full-length K/V (N x kv_dim).
// Returns the concatenated head outputs (C x d), before the output projection.
Matrix attend(const ModelConfig& cfg, const Matrix& q, const Matrix& k_all, const Matrix& v_all,
              GemmTally& tally, std::vector<Matrix>* record) {
  const auto dh = static_cast<size_t>(cfg.head_dim());
  const size_t group = static_cast<size_t>(cfg.n_heads / cfg.n_kv_heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix out(q.rows(), static_cast<size_t>(cfg.d_model));
  for (size_t h = 0; h < static_cast<size_t>(cfg.n_heads); ++h) {
    const size_t g = h / group;
    const Matrix qh = column_slice(q, h * dh, dh);
    const Matrix kt = transpose(column_slice(k_all, g * dh, dh));
    const Matrix vh = column_slice(v_all, g * dh, dh);
    Matrix scores = gemm(qh, kt, tally.scores);
    for (double& s : scores.data()) s *= inv_sqrt;
    softmax_rows(scores);
    const Matrix oh = gemm(scores, vh, tally.mix);
    for (size_t r = 0; r < oh.rows(); ++r)
      for (size_t c = 0; c < dh; ++c) out(r, h * dh + c) = oh(r, c);
    if (record) record->push_back(std::move(scores));
  }
  return out;
}

void add_in_place(Matrix& x, const Matrix& delta) {
  for (size_t i = 0; i < x.size(); ++i) x.data()[i] += delta.data()[i];
}

// Gated FFN residual update on the rows of x.
void ffn_residual(const LayerWeights& lw, Matrix& x, GemmTally& tally, double& max_norm) {
  const Matrix h2 = normalize_rows(x, lw.ln2_gain, lw.ln2_bias, max_norm);
  Matrix up = gemm(h2, lw.w_up, tally.ffn_up);
  const Matrix gate = gemm(h2, lw.w_gate, tally.ffn_gate);
  for (size_t i = 0; i < up.size(); ++i) up.data()[i] *= silu(gate.data()[i]);
  add_in_place(x, gemm(up, lw.w_down, tally.ffn_down));
}

const Weights& effective(const Weights& w, double scale, Weights& storage) {
  if (scale == 1.0) return w;
  storage = w.scaled(scale);
  return storage;
}

void scatter_logits(const Weights& w, const Matrix& x, std::span<const size_t> rows, ForwardResult& res) {
  const Matrix logits = gemm(x, w.head, res.tally.head);
  for (size_t r = 0; r < rows.size(); ++r) {
    auto src = logits.row(r);
    std::copy(src.begin(), src.end(), res.logits.row(rows[r]).begin());
  }
}

Matrix to_matrix(const json& j, const std::string& name) {
  if (!j.is_array()) throw InvalidConfig("weights: tensor '" + name + "' is not an array");
  const size_t rows = j.size();
  const size_t cols = rows ? j[0].size() : 0;
  Matrix m(rows, cols);
  for (size_t r = 0; r < rows; ++r) {
    if (!j[r].is_array() || j[r].size() != cols)
      throw InvalidConfig("weights: tensor '" + name + "' is ragged");
    for (size_t c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

json from_matrix(const Matrix& m) {
  json rows = json::array();
  for (size_t r = 0; r < m.rows(); ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  return rows;
}

}  // namespace

Weights Weights::scaled(double s) const {
  Weights out = *this;
  scale_in_place(out.embedding, s);
  scale_in_place(out.positional, s);
  scale_in_place(out.head, s);
  for (auto& l : out.layers) {
    for (Matrix* m : {&l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.w_up, &l.w_gate, &l.w_down}) scale_in_place(*m, s);
    for (auto* v : {&l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias}) scale_in_place(*v, s);
  }
  return out;
}

void Weights::validate() const {
  config.validate();
  const auto V = static_cast<size_t>(config.vocab);
  const auto d = static_cast<size_t>(config.d_model);
  const auto kv = static_cast<size_t>(config.kv_dim());
  const auto ff = static_cast<size_t>(config.d_ff);
  check_shape(embedding, V, d, "embedding");
  check_shape(positional, static_cast<size_t>(config.max_seq), d, "positional");
  check_shape(head, d, V, "head");
  if (layers.size() != static_cast<size_t>(config.n_layers))
    throw InvalidConfig("weights: layer count does not match config");
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layers[" + std::to_string(i) + "].";
    check_shape(l.w_q, d, d, p + "w_q");
    check_shape(l.w_k, d, kv, p + "w_k");
    check_shape(l.w_v, d, kv, p + "w_v");
    check_shape(l.w_o, d, d, p + "w_o");
    check_shape(l.ln1_gain, d, p + "ln1_gain");
    check_shape(l.ln1_bias, d, p + "ln1_bias");
    check_shape(l.ln2_gain, d, p + "ln2_gain");
    check_shape(l.ln2_bias, d, p + "ln2_bias");
    check_shape(l.w_up, d, ff, p + "w_up");
    check_shape(l.w_gate, d, ff, p + "w_gate");
    check_shape(l.w_down, ff, d, p + "w_down");
  }
}

Weights init_weights(const ModelConfig& cfg, uint64_t seed, double init_std) {
  cfg.validate();
  const auto V = static_cast<size_t>(cfg.vocab);
  const auto d = static_cast<size_t>(cfg.d_model);
  const auto kv = static_cast<size_t>(cfg.kv_dim());
  const auto ff = static_cast<size_t>(cfg.d_ff);

  SplitMix64 rng(seed);
  Weights w;
  w.config = cfg;
  w.seed = seed;
  w.embedding = Matrix(V, d);
  fill_normal(w.embedding, rng, init_std);
  w.positional = Matrix(static_cast<size_t>(cfg.max_seq), d);
  fill_normal(w.positional, rng, init_std);
  for (int i = 0; i < cfg.n_layers; ++i) {
    LayerWeights l;
    l.w_q = Matrix(d, d);
    fill_normal(l.w_q, rng, init_std);
    l.w_k = Matrix(d, kv);
    fill_normal(l.w_k, rng, init_std);
    l.w_v = Matrix(d, kv);
    fill_normal(l.w_v, rng, init_std);
    l.w_o = Matrix(d, d);
    fill_normal(l.w_o, rng, init_std);
    l.ln1_gain.resize(d);
    fill_normal(l.ln1_gain, rng, init_std, 1.0);
    l.ln1_bias.resize(d);
    fill_normal(l.ln1_bias, rng, init_std, 0.0);
    l.ln2_gain.resize(d);
    fill_normal(l.ln2_gain, rng, init_std, 1.0);
    l.ln2_bias.resize(d);
    fill_normal(l.ln2_bias, rng, init_std, 0.0);
    l.w_up = Matrix(d, ff);
    fill_normal(l.w_up, rng, init_std);
    l.w_gate = Matrix(d, ff);
    fill_normal(l.w_gate, rng, init_std);
    l.w_down = Matrix(ff, d);
    fill_normal(l.w_down, rng, init_std);
    w.layers.push_back(std::move(l));
  }
  w.head = Matrix(d, V);
  fill_normal(w.head, rng, init_std);
  return w;
}

Weights load_weights(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open weight file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InvalidConfig("weight file '" + path + "': " + e.what());
  }
  try {
    Weights w;
    const auto& c = j.at("config");
    w.config.vocab = c.at("vocab").get<int>();
    w.config.d_model = c.at("d_model").get<int>();
    w.config.n_layers = c.at("n_layers").get<int>();
    w.config.n_heads = c.at("n_heads").get<int>();
    w.config.n_kv_heads = c.value("n_kv_heads", w.config.n_heads);
    w.config.d_ff = c.at("d_ff").get<int>();
    w.config.max_seq = c.at("max_seq").get<int>();
    if (j.contains("seed") && !j["seed"].is_null()) w.seed = j["seed"].get<uint64_t>();
    const auto& t = j.at("tensors");
    w.embedding = to_matrix(t.at("embedding"), "embedding");
    w.positional = to_matrix(t.at("positional"), "positional");
    w.head = to_matrix(t.at("head"), "head");
    for (const auto& lj : t.at("layers")) {
      LayerWeights l;
      l.w_q = to_matrix(lj.at("w_q"), "w_q");
      l.w_k = to_matrix(lj.at("w_k"), "w_k");
      l.w_v = to_matrix(lj.at("w_v"), "w_v");
      l.w_o = to_matrix(lj.at("w_o"), "w_o");
      l.ln1_gain = lj.at("ln1_gain").get<std::vector<double>>();
      l.ln1_bias = lj.at("ln1_bias").get<std::vector<double>>();
      l.ln2_gain = lj.at("ln2_gain").get<std::vector<double>>();
      l.ln2_bias = lj.at("ln2_bias").get<std::vector<double>>();
      l.w_up = to_matrix(lj.at("w_up"), "w_up");
      l.w_gate = to_matrix(lj.at("w_gate"), "w_gate");
      l.w_down = to_matrix(lj.at("w_down"), "w_down");
      w.layers.push_back(std::move(l));
    }
    w.validate();
    return w;
  } catch (const json::exception& e) {
    throw InvalidConfig("weight file '" + path + "': " + e.what());
  }
}

void save_weights(const Weights& w, const std::string& path) {
  json j;
  j["config"] = {{"vocab", w.config.vocab},       {"d_model", w.config.d_model},
                 {"n_layers", w.config.n_layers}, {"n_heads", w.config.n_heads},
                 {"n_kv_heads", w.config.n_kv_heads}, {"d_ff", w.config.d_ff},
                 {"max_seq", w.config.max_seq}};
  j["seed"] = w.seed ? json(*w.seed) : json(nullptr);
  json t;
  t["embedding"] = from_matrix(w.embedding);
  t["positional"] = from_matrix(w.positional);
  t["head"] = from_matrix(w.head);
  t["layers"] = json::array();
  for (const auto& l : w.layers) {
    t["layers"].push_back({{"w_q", from_matrix(l.w_q)},
                           {"w_k", from_matrix(l.w_k)},
                           {"w_v", from_matrix(l.w_v)},
                           {"w_o", from_matrix(l.w_o)},
                           {"ln1_gain", l.ln1_gain},
                           {"ln1_bias", l.ln1_bias},
                           {"ln2_gain", l.ln2_gain},
                           {"ln2_bias", l.ln2_bias},
                           {"w_up", from_matrix(l.w_up)},
                           {"w_gate", from_matrix(l.w_gate)},
                           {"w_down", from_matrix(l.w_down)}});
  }
  j["tensors"] = std::move(t);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write weight file '" + path + "'");
  out << j.dump() << '\n';
}

ForwardResult forward_partial(const Weights& w_in, std::span<const TokenId> tokens,
                              std::span<const size_t> active, const std::vector<LayerKVCache>& caches,
                              const FrozenInputs& frozen, double scale, const ForwardOptions& opts) {
  Weights storage;
  const Weights& w = effective(w_in, scale, storage);
  const ModelConfig& cfg = w.config;
  const size_t n = tokens.size();
  const auto d = static_cast<size_t>(cfg.d_model);
  if (active.empty()) throw NoWork("forward_partial: active set is empty");
  if (n > static_cast<size_t>(cfg.max_seq)) throw InvalidInput("forward_partial: sequence exceeds max_seq");
  if (caches.size() != static_cast<size_t>(cfg.n_layers))
    throw InvalidInput("forward_partial: need one cache per layer");

  std::vector<bool> is_active(n, false);
  for (size_t i = 0; i < active.size(); ++i) {
    if (active[i] >= n || (i > 0 && active[i] <= active[i - 1]))
      throw InvalidInput("forward_partial: active set must be ascending and in range");
    is_active[active[i]] = true;
  }
  for (size_t i = 0; i < n; ++i) {
    if (is_active[i]) continue;
    for (const auto& c : caches)
      if (c.valid.size() != n || !c.valid[i])
        throw StateCorruption("forward_partial: locked row " + std::to_string(i) + " has no cached K/V");
    if (frozen.valid.size() != n || !frozen.valid[i])
      throw StateCorruption("forward_partial: locked row " + std::to_string(i) + " has no frozen input");
  }

  ForwardResult res;
  res.rows.assign(active.begin(), active.end());
  res.logits = Matrix(n, static_cast<size_t>(cfg.vocab));
  res.block_inputs = Matrix(n, d);
  res.fresh = make_caches(cfg, n);
  res.assembled = make_caches(cfg, n);

  Matrix x(active.size(), d);
  for (size_t r = 0; r < active.size(); ++r) {
    const size_t pos = active[r];
    const TokenId tok = tokens[pos];
    if (tok < 0 || tok >= cfg.vocab) throw InvalidInput("forward_partial: token id out of range");
    auto e = w.embedding.row(static_cast<size_t>(tok));
    auto p = w.positional.row(pos);
    for (size_t c = 0; c < d; ++c) x(r, c) = e[c] + p[c];
    std::copy(x.row(r).begin(), x.row(r).end(), res.block_inputs.row(pos).begin());
  }

  for (size_t l = 0; l < w.layers.size(); ++l) {
    const LayerWeights& lw = w.layers[l];
    const Matrix h1 = normalize_rows(x, lw.ln1_gain, lw.ln1_bias, res.max_normed_row_norm);
    const Matrix q = gemm(h1, lw.w_q, res.tally.q);
    const Matrix k = gemm(h1, lw.w_k, res.tally.k);
    const Matrix v = gemm(h1, lw.w_v, res.tally.v);

    LayerKVCache& all = res.assembled[l];
    LayerKVCache& fresh = res.fresh[l];
    for (size_t r = 0; r < active.size(); ++r) {
      fresh.store(active[r], k.row(r), v.row(r));
      all.store(active[r], k.row(r), v.row(r));
    }
    for (size_t i = 0; i < n; ++i)
      if (!is_active[i]) all.store(i, caches[l].k.row(i), caches[l].v.row(i));

    const Matrix heads = attend(cfg, q, all.k, all.v, res.tally, opts.record_attention ? &res.attention : nullptr);
    add_in_place(x, gemm(heads, lw.w_o, res.tally.out));
    ffn_residual(lw, x, res.tally, res.max_normed_row_norm);
  }
  scatter_logits(w, x, active, res);
  return res;
}

ForwardResult forward_full(const Weights& w_in, std::span<const TokenId> tokens, double scale) {
  Weights storage;
  const Weights& w = effective(w_in, scale, storage);
  const ModelConfig& cfg = w.config;
  const size_t n = tokens.size();
  const auto d = static_cast<size_t>(cfg.d_model);
  if (n == 0) throw NoWork("forward_full: empty sequence");
  if (n > static_cast<size_t>(cfg.max_seq)) throw InvalidInput("forward_full: sequence exceeds max_seq");

  ForwardResult res;
  res.rows.resize(n);
  for (size_t i = 0; i < n; ++i) res.rows[i] = i;
  res.logits = Matrix(n, static_cast<size_t>(cfg.vocab));
  res.block_inputs = Matrix(n, d);

  Matrix x(n, d);
  for (size_t i = 0; i < n; ++i) {
    if (tokens[i] < 0 || tokens[i] >= cfg.vocab) throw InvalidInput("forward_full: token id out of range");
    for (size_t c = 0; c < d; ++c)
      x(i, c) = w.embedding(static_cast<size_t>(tokens[i]), c) + w.positional(i, c);
  }
  res.block_inputs = x;

  for (const LayerWeights& lw : w.layers) {
    const Matrix h1 = normalize_rows(x, lw.ln1_gain, lw.ln1_bias, res.max_normed_row_norm);
    const Matrix q = gemm(h1, lw.w_q, res.tally.q);
    LayerKVCache kv;
    kv.k = gemm(h1, lw.w_k, res.tally.k);
    kv.v = gemm(h1, lw.w_v, res.tally.v);
    kv.valid.assign(n, true);
    const Matrix heads = attend(cfg, q, kv.k, kv.v, res.tally, nullptr);
    add_in_place(x, gemm(heads, lw.w_o, res.tally.out));
    ffn_residual(lw, x, res.tally, res.max_normed_row_norm);
    res.fresh.push_back(kv);
    res.assembled.push_back(std::move(kv));
  }
  res.logits = gemm(x, w.head, res.tally.head);
  return res;
}

ForwardResult forward_probe(const Weights& w_in, std::span<const size_t> rows, const FrozenInputs& frozen,
                            const std::vector<LayerKVCache>& kv, double scale) {
  Weights storage;
  const Weights& w = effective(w_in, scale, storage);
  const ModelConfig& cfg = w.config;
  const size_t n = frozen.valid.size();
  ForwardResult res;
  res.rows.assign(rows.begin(), rows.end());
  res.logits = Matrix(n, static_cast<size_t>(cfg.vocab));
  if (rows.empty()) return res;
  if (kv.size() != static_cast<size_t>(cfg.n_layers)) throw InvalidInput("forward_probe: need one K/V table per layer");
  for (const auto& layer : kv)
    for (size_t i = 0; i < n; ++i)
      if (!layer.valid[i]) throw StateCorruption("forward_probe: K/V table incomplete");
  for (size_t r : rows)
    if (r >= n || !frozen.valid[r]) throw InvalidState("forward_probe: row " + std::to_string(r) + " has no frozen input");

  Matrix x = gather_rows(frozen.x, rows);
  for (size_t l = 0; l < w.layers.size(); ++l) {
    const LayerWeights& lw = w.layers[l];
    const Matrix h1 = normalize_rows(x, lw.ln1_gain, lw.ln1_bias, res.max_normed_row_norm);
    const Matrix q = gemm(h1, lw.w_q, res.tally.q);
    const Matrix heads = attend(cfg, q, kv[l].k, kv[l].v, res.tally, nullptr);
    add_in_place(x, gemm(heads, lw.w_o, res.tally.out));
    ffn_residual(lw, x, res.tally, res.max_normed_row_norm);
  }
  scatter_logits(w, x, rows, res);
  return res;
}

std::vector<double> feed_forward(const LayerWeights& lw, std::span<const double> x) {
  const size_t d = x.size();
  const size_t ff = lw.w_up.cols();
  std::vector<double> hidden(ff);
  for (size_t j = 0; j < ff; ++j) {
    double up = 0.0, gate = 0.0;
    for (size_t c = 0; c < d; ++c) {
      up += x[c] * lw.w_up(c, j);
      gate += x[c] * lw.w_gate(c, j);
    }
    hidden[j] = silu(gate) * up;
  }
  std::vector<double> out(lw.w_down.cols(), 0.0);
  for (size_t j = 0; j < ff; ++j)
    for (size_t c = 0; c < out.size(); ++c) out[c] += hidden[j] * lw.w_down(j, c);
  return out;
}

}  // namespace surelock
