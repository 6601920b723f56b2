#include "surelock/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "surelock/errors.hpp"

namespace surelock {

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (size_t r = 0; r < m.rows(); ++r)
    for (size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw InvalidInput("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                       std::to_string(b.rows()) + ")");
  Matrix out(a.rows(), b.cols());
  const size_t n = b.cols();
  for (size_t i = 0; i < a.rows(); ++i) {
    double* o = out.row(i).data();
    for (size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double* brow = b.row(k).data();
      for (size_t j = 0; j < n; ++j) o[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix gather_rows(const Matrix& m, std::span<const size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    auto src = m.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double norm_inf(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double distance2(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double logsumexp(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  return mx + std::log(s);
}

std::vector<double> log_softmax(std::span<const double> z) {
  if (z.size() < 2) throw InvalidInput("log_softmax: need at least two logits");
  for (double v : z)
    if (!std::isfinite(v)) throw InvalidInput("log_softmax: non-finite logit");
  // (z_i - max) - log(sum) keeps shift invariance exact at large magnitudes.
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  const double log_s = std::log(s);
  std::vector<double> out(z.size());
  for (size_t i = 0; i < z.size(); ++i) out[i] = (z[i] - mx) - log_s;
  return out;
}

std::vector<double> softmax(std::span<const double> z) {
  auto out = log_softmax(z);
  for (double& v : out) v = std::exp(v);
  return out;
}

double kl_from_logits(std::span<const double> z_p, std::span<const double> z_q) {
  if (z_p.size() != z_q.size()) throw InvalidInput("kl_from_logits: length mismatch");
  const auto lp = log_softmax(z_p);
  const auto lq = log_softmax(z_q);
  double kl = 0.0;
  for (size_t i = 0; i < lp.size(); ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
  if (kl < 0.0) {
    if (kl < -1e-12) throw InternalConsistency("kl_from_logits: negative divergence " + std::to_string(kl));
    kl = 0.0;
  }
  return kl;
}

double percentile_nearest_rank(std::span<const double> values, double m) {
  if (values.empty()) throw EmptySet("percentile_nearest_rank: empty sequence");
  if (!(m >= 0.0 && m <= 100.0)) throw InvalidInput("percentile_nearest_rank: m outside [0,100]");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());
  // Guard the product against landing a hair above an integer (e.g. 0.2 * 5).
  const double raw = m / 100.0 * n;
  auto rank = static_cast<size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  rank = std::clamp<size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

SpectralNormResult spectral_norm(const Matrix& m, int max_iters, double tol) {
  if (m.empty()) throw InvalidInput("spectral_norm: empty matrix");
  for (double v : m.data())
    if (!std::isfinite(v)) throw InvalidInput("spectral_norm: non-finite entry");

  const size_t n = m.cols();
  // Fixed, non-symmetric start so the iterate is unlikely to be orthogonal to
  // the dominant right singular vector.
  std::vector<double> v(n);
  for (size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i % 7) + 1e-3 * static_cast<double>(i);
  double nv = norm2(v);
  for (double& x : v) x /= nv;

  std::vector<double> mv(m.rows());
  std::vector<double> w(n);
  SpectralNormResult res;
  double prev = -1.0;
  for (int it = 1; it <= max_iters; ++it) {
    for (size_t r = 0; r < m.rows(); ++r) mv[r] = dot(m.row(r), v);
    std::fill(w.begin(), w.end(), 0.0);
    for (size_t r = 0; r < m.rows(); ++r) {
      auto row = m.row(r);
      for (size_t c = 0; c < n; ++c) w[c] += row[c] * mv[r];
    }
    const double sigma = norm2(mv);
    res.value = sigma;
    res.iterations = it;
    const double nw = norm2(w);
    if (nw == 0.0) {
      res.converged = true;
      return res;
    }
    for (size_t c = 0; c < n; ++c) v[c] = w[c] / nw;
    if (prev >= 0.0 && std::abs(sigma - prev) < tol) {
      res.converged = true;
      break;
    }
    prev = sigma;
  }
  // One more application with the final direction for a consistent estimate.
  for (size_t r = 0; r < m.rows(); ++r) mv[r] = dot(m.row(r), v);
  res.value = std::max(res.value, norm2(mv));
  return res;
}

void layer_norm(std::span<const double> x, std::span<const double> gain,
                std::span<const double> bias, std::span<double> out) {
  const auto d = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= d;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= d;
  const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
  for (size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
}

}  // namespace surelock
