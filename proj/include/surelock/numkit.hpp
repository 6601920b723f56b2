#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace surelock {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(size_t rows, size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  size_t rows() const { return rows_; }
  size_t cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(size_t r, size_t c) { return data_[r * cols_ + c]; }
  double operator()(size_t r, size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  size_t rows_ = 0;
  size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix transpose(const Matrix& m);

// out = a * b. Accumulates each output element over k in ascending order.
Matrix matmul(const Matrix& a, const Matrix& b);

// Copies the listed rows of `m` into a compact matrix.
Matrix gather_rows(const Matrix& m, std::span<const size_t> rows);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);
double norm_inf(std::span<const double> v);
double distance2(std::span<const double> a, std::span<const double> b);

double logsumexp(std::span<const double> z);

// z_i - logsumexp(z). Throws InvalidInput on non-finite entries or V < 2.
std::vector<double> log_softmax(std::span<const double> z);

std::vector<double> softmax(std::span<const double> z);

// KL(softmax(z_p) || softmax(z_q)) in log space. Round-off negatives below
// 1e-12 are clamped to zero; larger negatives raise InternalConsistency.
double kl_from_logits(std::span<const double> z_p, std::span<const double> z_q);

// Nearest-rank percentile: sorted[ceil(m/100 * n)] (1-based), rank 1 for m = 0.
double percentile_nearest_rank(std::span<const double> values, double m);

struct SpectralNormResult {
  double value = 0.0;
  bool converged = false;
  int iterations = 0;
};

// Largest singular value by power iteration on M^T M from a fixed start vector.
SpectralNormResult spectral_norm(const Matrix& m, int max_iters = 1000, double tol = 1e-12);

// (x - mean) / sqrt(var + eps) * gain + bias, population variance.
inline constexpr double kLayerNormEps = 1e-5;
void layer_norm(std::span<const double> x, std::span<const double> gain,
                std::span<const double> bias, std::span<double> out);

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace surelock
