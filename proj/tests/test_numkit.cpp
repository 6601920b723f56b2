#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "surelock/errors.hpp"
#include "surelock/numkit.hpp"
#include "surelock/rng.hpp"
#include "test_support.hpp"

using namespace surelock;

namespace {

// Direct summation in long double.
long double oracle_kl(const std::vector<double>& zp, const std::vector<double>& zq) {
  long double sp = 0, sq = 0;
  for (double x : zp) sp += std::exp(static_cast<long double>(x));
  for (double x : zq) sq += std::exp(static_cast<long double>(x));
  long double kl = 0;
  for (size_t i = 0; i < zp.size(); ++i) {
    const long double p = std::exp(static_cast<long double>(zp[i])) / sp;
    const long double q = std::exp(static_cast<long double>(zq[i])) / sq;
    kl += p * std::log(p / q);
  }
  return kl;
}

}  // namespace

TEST_CASE("log_softmax examples") {
  auto a = log_softmax(std::vector<double>{0.0, 0.0});
  CHECK(a[0] == doctest::Approx(std::log(0.5)).epsilon(1e-15));
  CHECK(a[1] == doctest::Approx(std::log(0.5)).epsilon(1e-15));

  auto b = log_softmax(std::vector<double>{1000.0, 1000.0});
  CHECK(b[0] == doctest::Approx(std::log(0.5)).epsilon(1e-15));
  CHECK(b[1] == doctest::Approx(std::log(0.5)).epsilon(1e-15));

  const long double two = 2.0L;
  const long double lo_a = std::log(two / 3.0L), lo_b = std::log(1.0L / 3.0L);
  auto c = log_softmax(std::vector<double>{std::log(2.0), 0.0});
  CHECK(std::abs(c[0] - static_cast<double>(lo_a)) < 1e-15);
  CHECK(std::abs(c[1] - static_cast<double>(lo_b)) < 1e-15);
}

TEST_CASE("log_softmax rejects bad input") {
  CHECK_THROWS_AS(log_softmax(std::vector<double>{0.0, NAN}), InvalidInput);
  CHECK_THROWS_AS(log_softmax(std::vector<double>{INFINITY, 0.0}), InvalidInput);
  CHECK_THROWS_AS(log_softmax(std::vector<double>{1.0}), InvalidInput);
}

TEST_CASE("kl_from_logits examples") {
  CHECK(kl_from_logits(std::vector<double>{0, 0}, std::vector<double>{0, 0}) == 0.0);

  const std::vector<double> p{std::log(2.0), 0.0}, q{0.0, 0.0};
  const double oracle = static_cast<double>(oracle_kl(p, q));
  CHECK(oracle == doctest::Approx(0.056633).epsilon(1e-5));
  CHECK(kl_from_logits(p, q) == doctest::Approx(oracle).epsilon(1e-13));

  const std::vector<double> p2{10.0, 0.0}, q2{0.0, 10.0};
  // E_p[z_p - z_q] since the log-partition terms cancel.
  const double p0 = 1.0 / (1.0 + std::exp(-10.0));
  const double expected = p0 * 10.0 + (1.0 - p0) * -10.0;
  CHECK(expected == doctest::Approx(9.999092).epsilon(1e-6));
  CHECK(kl_from_logits(p2, q2) == doctest::Approx(expected).epsilon(1e-13));

  CHECK_THROWS_AS(kl_from_logits(std::vector<double>{0, 0}, std::vector<double>{0, 0, 0}), InvalidInput);
}

TEST_CASE("percentile_nearest_rank examples") {
  const std::vector<double> v{.1, .2, .3, .4, .5};
  CHECK(percentile_nearest_rank(v, 20) == .1);
  CHECK(percentile_nearest_rank(v, 100) == .5);
  CHECK(percentile_nearest_rank(v, 0) == .1);
  CHECK(percentile_nearest_rank(std::vector<double>{7.0}, 50) == 7.0);
  CHECK(percentile_nearest_rank(std::vector<double>{.1, .2, .3}, 33) == .1);
  CHECK_THROWS_AS(percentile_nearest_rank(std::vector<double>{}, 50), EmptySet);
}

TEST_CASE("percentile is permutation-invariant and returns a member") {
  SplitMix64 rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const size_t n = 1 + rng.next() % 20;
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    const double m = 100.0 * rng.uniform();
    const double r = percentile_nearest_rank(v, m);
    CHECK(std::find(v.begin(), v.end(), r) != v.end());
    std::vector<double> shuffled = v;
    for (size_t i = n; i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.next() % i]);
    CHECK(percentile_nearest_rank(shuffled, m) == r);
  }
}

TEST_CASE("spectral_norm examples") {
  Matrix id(2, 2);
  id(0, 0) = id(1, 1) = 1.0;
  CHECK(spectral_norm(id).value == doctest::Approx(1.0).epsilon(1e-12));

  Matrix diag(2, 2);
  diag(0, 0) = 3.0;
  diag(1, 1) = 1.0;
  CHECK(spectral_norm(diag).value == doctest::Approx(3.0).epsilon(1e-12));

  SplitMix64 rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix m(3, 3);
    Eigen::Matrix3d e;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) e(r, c) = m(r, c) = rng.normal();
    const double oracle = Eigen::JacobiSVD<Eigen::Matrix3d>(e).singularValues()(0);
    const auto res = spectral_norm(m, 100000, 1e-14);
    CHECK(res.converged);
    CHECK(std::abs(res.value - oracle) < 1e-6);
  }
}

TEST_CASE("spectral_norm flags non-convergence and rejects bad input") {
  Matrix m(2, 2);
  m(0, 0) = 1.0;
  m(0, 1) = 0.999;
  m(1, 0) = 0.999;
  m(1, 1) = 1.0;
  m(1, 1) = 0.998;
  const auto r = spectral_norm(m, 1, 1e-15);
  CHECK_FALSE(r.converged);
  CHECK(r.value > 0.0);
  CHECK_THROWS_AS(spectral_norm(Matrix{}), InvalidInput);
  Matrix bad(1, 1, NAN);
  CHECK_THROWS_AS(spectral_norm(bad), InvalidInput);
}

TEST_CASE("log_softmax properties on random logits") {
  SplitMix64 rng(1);
  for (int i = 0; i < 10000; ++i) {
    const size_t v = 2 + rng.next() % 30;
    const auto z = testing::random_logits(rng, v, 5.0);
    const auto lp = log_softmax(z);
    double s = 0.0;
    for (double x : lp) {
      CHECK(x <= 0.0);
      s += std::exp(x);
    }
    REQUIRE(std::abs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("KL properties: self-divergence, non-negativity, Pinsker, log-softmax Lipschitz") {
  SplitMix64 rng(2);
  int failures = 0;
  for (int i = 0; i < 10000; ++i) {
    const size_t v = 2 + rng.next() % 30;
    const double scale = std::pow(10.0, -2.0 + 3.0 * rng.uniform());
    const auto zp = testing::random_logits(rng, v, scale);
    const auto zq = testing::random_logits(rng, v, scale);
    if (kl_from_logits(zp, zp) != 0.0) ++failures;
    const double kl = kl_from_logits(zp, zq);
    if (kl < 0.0) ++failures;

    const auto p = softmax(zp), q = softmax(zq);
    double l1 = 0.0;
    for (size_t k = 0; k < v; ++k) l1 += std::abs(p[k] - q[k]);
    if (l1 > std::sqrt(2.0 * kl) + 1e-12) ++failures;

    const auto fp = log_softmax(zp), fq = log_softmax(zq);
    std::vector<double> df(v), dz(v);
    for (size_t k = 0; k < v; ++k) {
      df[k] = fp[k] - fq[k];
      dz[k] = zp[k] - zq[k];
    }
    if (norm_inf(df) > 2.0 * norm2(dz) + 1e-12) ++failures;
  }
  CHECK(failures == 0);
}

TEST_CASE("layer_norm normalizes to unit variance with unit gain") {
  const std::vector<double> x{1.0, 2.0, 3.0, 4.0};
  const std::vector<double> g(4, 1.0), b(4, 0.0);
  std::vector<double> out(4);
  layer_norm(x, g, b, out);
  double mean = std::accumulate(out.begin(), out.end(), 0.0) / 4.0;
  double var = 0.0;
  for (double v : out) var += (v - mean) * (v - mean);
  CHECK(mean == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(var / 4.0 == doctest::Approx(1.25 / (1.25 + kLayerNormEps)).epsilon(1e-12));
}
