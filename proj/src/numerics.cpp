#include "sparseq/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <string>

namespace sparseq {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    fail(ErrorKind::Shape, "matrix data length " + std::to_string(data_.size()) + " != " + std::to_string(rows_) +
                               "x" + std::to_string(cols_));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<float> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) fail(ErrorKind::Shape, "ragged row list");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

double Rng::normal(double mu, double sigma) {
  if (have_spare_) {
    have_spare_ = false;
    return mu + sigma * spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform01();
  } while (u1 <= 0.0);
  const double u2 = uniform01();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return mu + sigma * r * std::cos(theta);
}

double Rng::truncated_normal(double sigma) {
  double z = 0.0;
  do {
    z = normal(0.0, 1.0);
  } while (std::abs(z) > 2.0);
  return sigma * z;
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) return 0;
  return static_cast<std::size_t>(uniform01() * static_cast<double>(n)) % n;
}

Rng Rng::fork(std::uint64_t salt) {
  // splitmix64 finalizer over (next draw ^ salt)
  std::uint64_t z = next_u64() ^ (salt * 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return Rng(z ^ (z >> 31));
}

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, const Distribution& dist) {
  if (rows == 0 || cols == 0) fail(ErrorKind::Config, "random_matrix needs rows, cols >= 1");
  Matrix m(rows, cols);
  if (const auto* u = std::get_if<Uniform>(&dist)) {
    if (!(u->lo <= u->hi) || !std::isfinite(u->lo) || !std::isfinite(u->hi)) {
      fail(ErrorKind::Config, "uniform bounds must be finite with lo <= hi");
    }
    for (auto& v : m.data()) v = static_cast<float>(rng.uniform(u->lo, u->hi));
  } else {
    const auto& n = std::get<Normal>(dist);
    if (!(n.sigma >= 0.0) || !std::isfinite(n.mu) || !std::isfinite(n.sigma)) {
      fail(ErrorKind::Config, "normal needs finite mu and sigma >= 0");
    }
    for (auto& v : m.data()) v = static_cast<float>(rng.normal(n.mu, n.sigma));
  }
  return m;
}

namespace {

// Eight-lane float vector (GCC/Clang extension); lowers to whatever SIMD the
// target offers. Multiply and add stay separate under -ffp-contract=off.
typedef float v8f __attribute__((vector_size(32)));

inline v8f load8(const float* p) {
  v8f v;
  std::memcpy(&v, p, sizeof v);
  return v;
}
inline void store8(float* p, v8f v) { std::memcpy(p, &v, sizeof v); }

constexpr std::size_t kTileRows = 8;
constexpr std::size_t kTileVecs = 1;
constexpr std::size_t kTileCols = 8 * kTileVecs;

// C[i0:i0+8, j0:j0+8] = A * B over the full k range. Every output keeps its
// own running sum with k ascending, so results equal the naive triple loop.
void gemm_tile(const float* pa, const float* pb, float* pc, std::size_t k, std::size_t n, std::size_t i0, std::size_t j0) {
  v8f acc[kTileRows][kTileVecs] = {};
  const float* a0 = pa + i0 * k;
  for (std::size_t kk = 0; kk < k; ++kk) {
    const float* brow = pb + kk * n + j0;
    v8f bv[kTileVecs];
    for (std::size_t v = 0; v < kTileVecs; ++v) bv[v] = load8(brow + 8 * v);
    for (std::size_t r = 0; r < kTileRows; ++r) {
      const float s = a0[r * k + kk];
      const v8f av = {s, s, s, s, s, s, s, s};
      for (std::size_t v = 0; v < kTileVecs; ++v) acc[r][v] += av * bv[v];
    }
  }
  for (std::size_t r = 0; r < kTileRows; ++r)
    for (std::size_t v = 0; v < kTileVecs; ++v) store8(pc + (i0 + r) * n + j0 + 8 * v, acc[r][v]);
}

void gemm_edge(const float* pa, const float* pb, float* pc, std::size_t k, std::size_t n, std::size_t i0, std::size_t i1,
               std::size_t j0, std::size_t j1) {
  for (std::size_t i = i0; i < i1; ++i)
    for (std::size_t j = j0; j < j1; ++j) {
      float acc = 0.0f;
      for (std::size_t kk = 0; kk < k; ++kk) acc += pa[i * k + kk] * pb[kk * n + j];
      pc[i * n + j] = acc;
    }
}

}  // namespace

Matrix dense_gemm(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    fail(ErrorKind::Shape, "gemm inner dimensions " + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix c(m, n);
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* pc = c.data().data();
  const std::size_t mt = m - m % kTileRows, nt = n - n % kTileCols;
  for (std::size_t i = 0; i < mt; i += kTileRows) {
    for (std::size_t j = 0; j < nt; j += kTileCols) gemm_tile(pa, pb, pc, k, n, i, j);
  }
  gemm_edge(pa, pb, pc, k, n, 0, mt, nt, n);
  gemm_edge(pa, pb, pc, k, n, mt, m, 0, n);
  return c;
}

Matrix gemm_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) fail(ErrorKind::Shape, "gemm_nt inner dimensions differ");
  return dense_gemm(a, transpose(b));
}

Matrix gemm_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) fail(ErrorKind::Shape, "gemm_tn inner dimensions differ");
  return dense_gemm(transpose(a), b);
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) fail(ErrorKind::Shape, "add shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
  return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) fail(ErrorKind::Shape, "hadamard shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] *= b.data()[i];
  return c;
}

Matrix scaled(const Matrix& a, float s) {
  Matrix c = a;
  for (auto& v : c.data()) v *= s;
  return c;
}

float max_abs(std::span<const float> v) noexcept {
  float m = 0.0f;
  for (float x : v) m = std::max(m, std::abs(x));
  return m;
}

double max_rel_diff(const Matrix& a, const Matrix& b, double floor) {
  if (!a.same_shape(b)) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a.data()[i], y = b.data()[i];
    worst = std::max(worst, std::abs(x - y) / std::max(std::abs(y), floor));
  }
  return worst;
}

}  // namespace sparseq
