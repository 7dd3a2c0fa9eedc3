#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "sparseq/numerics.hpp"
#include "sparseq/quantizer.hpp"
#include "sparseq/sparse_format.hpp"

namespace sparseq {

// Abstract cost model: one MAC is one cycle unit; a dense M x N x K GEMM
// costs T = M*N*K, the 2:4 sparse one T/2.
struct GemmCostReport {
  std::size_t m = 0, n = 0, k = 0;
  std::uint64_t macs = 0;
  std::uint64_t model_cycles = 0;
  std::uint64_t dense_macs() const noexcept { return static_cast<std::uint64_t>(m) * n * k; }
  std::uint64_t flops() const noexcept { return 2 * macs; }
};

GemmCostReport dense_cost(std::size_t m, std::size_t n, std::size_t k);

// Records every (A row, B row) pair the sparse kernel reads, for tests.
struct GatherLog {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> reads;
};

// C = A * B using only A's stored non-zeros: for each kept (row, col) the
// matching B row is gathered via the metadata. Per output element the sum
// runs over kept columns in ascending order, so the result is bitwise equal
// to dense_gemm(unpack(a), b) for finite inputs.
std::pair<Matrix, GemmCostReport> sparse_gemm(const PackedSparseMatrix& a, const Matrix& b, GatherLog* log = nullptr);

// Integer path: A's integer codes times per-tensor quantized B, accumulated
// in int32 and dequantized by scale_a(row) * scale_b.
std::pair<Matrix, GemmCostReport> sparse_gemm_int(const PackedSparseMatrix& a, const QuantizedMatrix& b, const QuantParams& b_quant);

// Patch extraction for a P x P stride-P convolution: one row per patch in
// (n, patch-row, patch-col) order, columns in (c, ky, kx) order.
Matrix im2col(const Tensor4& x, std::size_t patch);

// Patch embedding as an implicit GEMM: tokens = im2col(x) * W^T with W the
// packed D x (C*P*P) weight. Returns the (N*H*W/P^2) x D token matrix.
std::pair<Matrix, GemmCostReport> implicit_gemm_conv(const Tensor4& x, const PackedSparseMatrix& w, std::size_t patch,
                                                     std::size_t d_embed);

// 2*N*C*H*W*D: FLOPs of the dense stride-P patch embedding.
std::uint64_t patch_embed_flops(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::size_t d_embed);

}  // namespace sparseq
