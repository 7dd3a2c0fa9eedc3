#include "sparseq/sparsity_pattern.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

namespace sparseq {

std::string_view to_string(SparsityPattern p) noexcept {
  return p == SparsityPattern::TwoOfFour ? "2:4" : "4:8-paired";
}

std::size_t SparsityMask::kept() const noexcept {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

Matrix SparsityMask::as_matrix() const {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < bits.size(); ++i) m.data()[i] = bits[i] ? 1.0f : 0.0f;
  return m;
}

namespace {

void require_divisible(const Matrix& w, std::size_t width) {
  if (w.cols() % width != 0) {
    fail(ErrorKind::Shape, "column count " + std::to_string(w.cols()) + " not divisible by " + std::to_string(width));
  }
}

// Indices of the two largest scores among n, earlier index wins ties.
std::array<std::size_t, 2> top_two(const float* score, std::size_t n) {
  std::size_t first = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (score[i] > score[first]) first = i;
  std::size_t second = first == 0 ? 1 : 0;
  for (std::size_t i = 0; i < n; ++i)
    if (i != first && score[i] > score[second]) second = i;
  return {std::min(first, second), std::max(first, second)};
}

}  // namespace

SparsityMask select_mask_2of4(const Matrix& w) {
  require_divisible(w, 4);
  SparsityMask mask{w.rows(), w.cols(), SparsityPattern::TwoOfFour, std::vector<std::uint8_t>(w.size(), 0)};
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t g = 0; g < w.cols(); g += 4) {
      std::array<float, 4> score{};
      for (std::size_t i = 0; i < 4; ++i) score[i] = std::abs(w(r, g + i));
      for (std::size_t i : top_two(score.data(), 4)) mask.bits[r * w.cols() + g + i] = 1;
    }
  }
  return mask;
}

SparsityMask select_mask_4of8_paired(const Matrix& w) {
  require_divisible(w, 8);
  SparsityMask mask{w.rows(), w.cols(), SparsityPattern::PairedFourOfEight, std::vector<std::uint8_t>(w.size(), 0)};
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t g = 0; g < w.cols(); g += 8) {
      std::array<float, 4> score{};
      for (std::size_t s = 0; s < 4; ++s) score[s] = std::abs(w(r, g + 2 * s)) + std::abs(w(r, g + 2 * s + 1));
      for (std::size_t s : top_two(score.data(), 4)) {
        mask.bits[r * w.cols() + g + 2 * s] = 1;
        mask.bits[r * w.cols() + g + 2 * s + 1] = 1;
      }
    }
  }
  return mask;
}

SparsityMask select_mask(const Matrix& w, SparsityPattern pattern) {
  return pattern == SparsityPattern::TwoOfFour ? select_mask_2of4(w) : select_mask_4of8_paired(w);
}

ValidationReport validate_mask(const SparsityMask& mask) {
  ValidationReport report;
  const std::size_t width = group_width(mask.pattern);
  const std::size_t full_groups = mask.cols / width;
  const bool ragged = mask.cols % width != 0 || mask.bits.size() != mask.rows * mask.cols;
  for (std::size_t r = 0; r < mask.rows; ++r) {
    for (std::size_t g = 0; g < full_groups; ++g) {
      const std::uint8_t* b = mask.bits.data() + r * mask.cols + g * width;
      std::size_t set = 0;
      bool split = false;
      for (std::size_t i = 0; i < width; ++i) set += b[i] != 0;
      if (mask.pattern == SparsityPattern::PairedFourOfEight) {
        for (std::size_t s = 0; s < 4; ++s) split |= (b[2 * s] != 0) != (b[2 * s + 1] != 0);
      }
      if (set != width / 2 || split) report.violations.push_back({r, g});
    }
    if (ragged) report.violations.push_back({r, full_groups});
  }
  return report;
}

Matrix apply_mask(const Matrix& w, const SparsityMask& mask) {
  if (w.rows() != mask.rows || w.cols() != mask.cols || mask.bits.size() != w.size()) {
    fail(ErrorKind::Shape, "mask shape does not match weights");
  }
  Matrix out(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.size(); ++i) out.data()[i] = mask.bits[i] ? w.data()[i] : 0.0f;
  return out;
}

SparsityMask all_ones_mask(std::size_t rows, std::size_t cols, SparsityPattern pattern) {
  return {rows, cols, pattern, std::vector<std::uint8_t>(rows * cols, 1)};
}

}  // namespace sparseq
