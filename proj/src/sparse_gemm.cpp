#include "sparseq/sparse_gemm.hpp"

#include <string>

namespace sparseq {

GemmCostReport dense_cost(std::size_t m, std::size_t n, std::size_t k) {
  GemmCostReport r{m, n, k, 0, 0};
  r.macs = r.dense_macs();
  r.model_cycles = r.macs;
  return r;
}

namespace {
GemmCostReport sparse_cost(std::size_t m, std::size_t n, std::size_t k) {
  GemmCostReport r{m, n, k, 0, 0};
  r.macs = r.dense_macs() / 2;
  r.model_cycles = r.macs;
  return r;
}
}  // namespace

std::pair<Matrix, GemmCostReport> sparse_gemm(const PackedSparseMatrix& a, const Matrix& b, GatherLog* log) {
  if (a.cols != b.rows()) {
    fail(ErrorKind::Shape, "sparse gemm inner dimensions " + std::to_string(a.cols) + " vs " + std::to_string(b.rows()));
  }
  a.check();
  const std::size_t m = a.rows, n = b.cols(), half = a.cols / 2;
  Matrix c(m, n);
  std::vector<std::uint32_t> cols(half);
  std::vector<float> vals(half);
  const float* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    decode_row_columns(a, i, cols);
    for (std::size_t j = 0; j < half; ++j) vals[j] = a.value(i * half + j);
    float* crow = c.row(i).data();
    for (std::size_t j = 0; j < half; ++j) {
      if (log) log->reads.emplace_back(static_cast<std::uint32_t>(i), cols[j]);
      const float av = vals[j];
      const float* brow = pb + static_cast<std::size_t>(cols[j]) * n;
      for (std::size_t jj = 0; jj < n; ++jj) crow[jj] += av * brow[jj];
    }
  }
  return {std::move(c), sparse_cost(m, n, a.cols)};
}

std::pair<Matrix, GemmCostReport> sparse_gemm_int(const PackedSparseMatrix& a, const QuantizedMatrix& b, const QuantParams& b_quant) {
  if (!is_integer(a.fmt)) fail(ErrorKind::Config, "integer sparse gemm needs an INT8 or INT4 operand");
  if (a.cols != b.rows) fail(ErrorKind::Shape, "sparse gemm inner dimensions differ");
  if (b_quant.granularity != Granularity::PerTensor) fail(ErrorKind::Config, "B operand must be per-tensor quantized");
  a.check();
  const std::size_t m = a.rows, n = b.cols, half = a.cols / 2;
  Matrix c(m, n);
  std::vector<std::uint32_t> cols(half);
  std::vector<std::int32_t> acc(n);
  const float sb = b_quant.scales[0];
  for (std::size_t i = 0; i < m; ++i) {
    decode_row_columns(a, i, cols);
    std::fill(acc.begin(), acc.end(), 0);
    for (std::size_t j = 0; j < half; ++j) {
      const std::int32_t av = a.code(i * half + j);
      const std::int8_t* brow = b.codes.data() + static_cast<std::size_t>(cols[j]) * n;
      for (std::size_t jj = 0; jj < n; ++jj) acc[jj] += av * static_cast<std::int32_t>(brow[jj]);
    }
    const float s = a.quant->scale_for(i) * sb;
    for (std::size_t jj = 0; jj < n; ++jj) c(i, jj) = static_cast<float>(acc[jj]) * s;
  }
  return {std::move(c), sparse_cost(m, n, a.cols)};
}

Matrix im2col(const Tensor4& x, std::size_t patch) {
  if (patch == 0 || x.h % patch != 0 || x.w % patch != 0) {
    fail(ErrorKind::Shape, "image " + std::to_string(x.h) + "x" + std::to_string(x.w) + " not divisible by patch " +
                               std::to_string(patch));
  }
  const std::size_t ph = x.h / patch, pw = x.w / patch, width = x.c * patch * patch;
  Matrix out(x.n * ph * pw, width);
  for (std::size_t n = 0; n < x.n; ++n)
    for (std::size_t py = 0; py < ph; ++py)
      for (std::size_t px = 0; px < pw; ++px) {
        float* row = out.row((n * ph + py) * pw + px).data();
        for (std::size_t c = 0; c < x.c; ++c)
          for (std::size_t ky = 0; ky < patch; ++ky)
            for (std::size_t kx = 0; kx < patch; ++kx)
              *row++ = x.at(n, c, py * patch + ky, px * patch + kx);
      }
  return out;
}

std::pair<Matrix, GemmCostReport> implicit_gemm_conv(const Tensor4& x, const PackedSparseMatrix& w, std::size_t patch,
                                                     std::size_t d_embed) {
  if (w.rows != d_embed) fail(ErrorKind::Shape, "packed weight rows do not match embedding dimension");
  if (w.cols != x.c * patch * patch) fail(ErrorKind::Shape, "packed weight width must equal C*P*P");
  const Matrix cols = im2col(x, patch);
  auto [out_t, cost] = sparse_gemm(w, transpose(cols));
  return {transpose(out_t), cost};
}

std::uint64_t patch_embed_flops(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::size_t d_embed) {
  return 2ull * n * c * h * w * d_embed;
}

}  // namespace sparseq
