#pragma once

// Independent reference routines for tests. Nothing here calls into the
// library code path it is used to check.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "sparseq/numerics.hpp"

namespace oracle {

// i-j-k triple loop, k ascending.
inline sparseq::Matrix triple_loop_gemm(const sparseq::Matrix& a, const sparseq::Matrix& b) {
  sparseq::Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      float s = 0.0f;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

// Brute force over all C(n_units, 2) choices of kept units per group, where a
// unit is `unit` adjacent columns. Picks the choice with the largest retained
// sum of |w|; the first maximal choice in lexicographic order wins ties.
inline std::vector<std::uint8_t> brute_force_mask(const sparseq::Matrix& w, std::size_t group, std::size_t unit) {
  std::vector<std::uint8_t> bits(w.size(), 0);
  const std::size_t units = group / unit;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t g = 0; g < w.cols(); g += group) {
      double best = -1.0;
      std::size_t bi = 0, bj = 1;
      for (std::size_t i = 0; i < units; ++i)
        for (std::size_t j = i + 1; j < units; ++j) {
          double s = 0.0;
          for (std::size_t u = 0; u < unit; ++u) s += std::abs(w(r, g + i * unit + u)) + std::abs(w(r, g + j * unit + u));
          if (s > best) {
            best = s;
            bi = i;
            bj = j;
          }
        }
      for (std::size_t u = 0; u < unit; ++u) {
        bits[r * w.cols() + g + bi * unit + u] = 1;
        bits[r * w.cols() + g + bj * unit + u] = 1;
      }
    }
  }
  return bits;
}

// Reads 2-bit fields LSB-first from a byte buffer.
inline unsigned read2(const std::vector<std::uint8_t>& bytes, std::size_t index) {
  const std::size_t bit = index * 2;
  return (bytes.at(bit / 8) >> (bit % 8)) & 3u;
}

// Reads signed 4-bit values, low nibble first.
inline int read_nibble(const std::vector<std::uint8_t>& bytes, std::size_t index) {
  const unsigned b = bytes.at(index / 2);
  const unsigned nib = index % 2 == 0 ? (b & 0xfu) : (b >> 4);
  return nib >= 8 ? static_cast<int>(nib) - 16 : static_cast<int>(nib);
}

// Direct stride-P convolution with D output channels and weight laid out as
// D x (C*P*P) in (c, ky, kx) order. Output row order (n, py, px).
inline sparseq::Matrix direct_patch_conv(const sparseq::Tensor4& x, const sparseq::Matrix& w, std::size_t p) {
  const std::size_t ph = x.h / p, pw = x.w / p, d = w.rows();
  sparseq::Matrix out(x.n * ph * pw, d);
  for (std::size_t n = 0; n < x.n; ++n)
    for (std::size_t py = 0; py < ph; ++py)
      for (std::size_t px = 0; px < pw; ++px)
        for (std::size_t o = 0; o < d; ++o) {
          float s = 0.0f;
          for (std::size_t c = 0; c < x.c; ++c)
            for (std::size_t ky = 0; ky < p; ++ky)
              for (std::size_t kx = 0; kx < p; ++kx)
                s += x.at(n, c, py * p + ky, px * p + kx) * w(o, (c * p + ky) * p + kx);
          out((n * ph + py) * pw + px, o) = s;
        }
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& z, double t = 1.0) {
  double mx = -INFINITY;
  for (double v : z) mx = std::max(mx, v / t);
  double s = 0.0;
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] / t - mx));
  for (auto& v : p) v /= s;
  return p;
}

}  // namespace oracle
