#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "sparseq/numerics.hpp"

namespace sparseq {

enum class SparsityPattern : std::uint8_t {
  TwoOfFour = 0,          // 2 kept of every aligned 4 in a row
  PairedFourOfEight = 1,  // 4 kept of every aligned 8, as two whole 2-wide sub-chunks
};

std::string_view to_string(SparsityPattern p) noexcept;
// Aligned group width along a row: 4 or 8.
constexpr std::size_t group_width(SparsityPattern p) noexcept { return p == SparsityPattern::TwoOfFour ? 4 : 8; }

// One keep-flag per element, row-major.
struct SparsityMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  SparsityPattern pattern = SparsityPattern::TwoOfFour;
  std::vector<std::uint8_t> bits;

  bool keep(std::size_t r, std::size_t c) const noexcept { return bits[r * cols + c] != 0; }
  std::size_t kept() const noexcept;
  // Mask as a 0/1 matrix.
  Matrix as_matrix() const;

  friend bool operator==(const SparsityMask&, const SparsityMask&) = default;
};

struct MaskViolation {
  std::size_t row;
  std::size_t group;
  friend bool operator==(const MaskViolation&, const MaskViolation&) = default;
};

struct ValidationReport {
  std::vector<MaskViolation> violations;
  bool legal() const noexcept { return violations.empty(); }
};

// Keeps the two largest-|w| entries of every aligned group of four; ties go
// to the lower column.
SparsityMask select_mask_2of4(const Matrix& w);
// Scores each 2-wide sub-chunk of an aligned group of eight by |w0|+|w1| and
// keeps the two best sub-chunks; ties go to the lower sub-chunk.
SparsityMask select_mask_4of8_paired(const Matrix& w);
SparsityMask select_mask(const Matrix& w, SparsityPattern pattern);

// Also reports a ragged shape (cols not divisible by the group) as a
// violation on every row at the trailing partial group.
ValidationReport validate_mask(const SparsityMask& mask);

Matrix apply_mask(const Matrix& w, const SparsityMask& mask);

// Mask with every bit set, used to check that masking is a no-op.
SparsityMask all_ones_mask(std::size_t rows, std::size_t cols, SparsityPattern pattern);

}  // namespace sparseq
