#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <variant>
#include <vector>

#include "sparseq/error.hpp"

namespace sparseq {

// Dense row-major FP32 matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  static Matrix identity(std::size_t n);
  // Brace-list convenience for tests and small fixtures; every row must have equal length.
  static Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::vector<float>& data() noexcept { return data_; }
  const std::vector<float>& data() const noexcept { return data_; }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool all_finite() const noexcept;

  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

// Batched image tensor in N-C-H-W order.
struct Tensor4 {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  std::vector<float> data;

  Tensor4() = default;
  Tensor4(std::size_t n_, std::size_t c_, std::size_t h_, std::size_t w_, float fill = 0.0f)
      : n(n_), c(c_), h(h_), w(w_), data(n_ * c_ * h_ * w_, fill) {}

  std::size_t image_size() const noexcept { return c * h * w; }
  float& at(std::size_t in, std::size_t ic, std::size_t y, std::size_t x) noexcept {
    return data[((in * c + ic) * h + y) * w + x];
  }
  float at(std::size_t in, std::size_t ic, std::size_t y, std::size_t x) const noexcept {
    return data[((in * c + ic) * h + y) * w + x];
  }
  std::span<const float> image(std::size_t in) const noexcept { return {data.data() + in * image_size(), image_size()}; }

  friend bool operator==(const Tensor4&, const Tensor4&) = default;
};

// Deterministic generator. The engine is std::mt19937_64, whose output
// sequence is fixed by the standard; the distributions below are written out
// explicitly because the standard library ones are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }
  // Box-Muller; one variate per call, the second is cached.
  double normal(double mu, double sigma);
  // Standard normal resampled until |z| <= 2, scaled by sigma.
  double truncated_normal(double sigma);
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  // Derive an independent child stream.
  Rng fork(std::uint64_t salt);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

struct Uniform {
  double lo, hi;
};
struct Normal {
  double mu, sigma;
};
using Distribution = std::variant<Uniform, Normal>;

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, const Distribution& dist);

// C = A * B, FP32 accumulation, k ascending for every output element.
Matrix dense_gemm(const Matrix& a, const Matrix& b);
// C = A * B^T (B given as N x K).
Matrix gemm_nt(const Matrix& a, const Matrix& b);
// C = A^T * B (A given as K x M).
Matrix gemm_tn(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scaled(const Matrix& a, float s);

float max_abs(std::span<const float> v) noexcept;
// max |a-b| / max(|b|, floor) over all entries.
double max_rel_diff(const Matrix& a, const Matrix& b, double floor = 1e-12);

}  // namespace sparseq
