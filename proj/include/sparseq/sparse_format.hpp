#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "sparseq/numerics.hpp"
#include "sparseq/quantizer.hpp"
#include "sparseq/sparsity_pattern.hpp"

namespace sparseq {

enum class ElementFormat : std::uint8_t { FP16 = 0, INT8 = 1, INT4 = 2 };

std::string_view to_string(ElementFormat f) noexcept;
constexpr unsigned element_bits(ElementFormat f) noexcept {
  return f == ElementFormat::FP16 ? 16 : f == ElementFormat::INT8 ? 8 : 4;
}
// INT4 requires the paired 4:8 pattern; FP16 and INT8 use 2:4.
constexpr SparsityPattern pattern_for(ElementFormat f) noexcept {
  return f == ElementFormat::INT4 ? SparsityPattern::PairedFourOfEight : SparsityPattern::TwoOfFour;
}
constexpr bool is_integer(ElementFormat f) noexcept { return f != ElementFormat::FP16; }

// IEEE binary16 conversion, round-to-nearest-even.
std::uint16_t float_to_half(float f) noexcept;
float half_to_float(std::uint16_t h) noexcept;

// Compressed 2:4 (or paired 4:8) matrix.
//
// Layout: `values` holds the kept elements in row-major group order (within a
// group, ascending column). FP16 is two bytes little-endian per value, INT8 one
// two's-complement byte, INT4 two values per byte with the low nibble first.
// `metadata` is a bitstream of 2-bit entries packed LSB-first: for FP16/INT8
// one entry per kept value (its column inside the group of 4); for INT4 one
// entry per kept 2-wide sub-chunk (two per group of 8). The final byte is
// zero-padded.
struct PackedSparseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;  // logical K
  ElementFormat fmt = ElementFormat::FP16;
  std::vector<std::uint8_t> values;
  std::vector<std::uint8_t> metadata;
  std::optional<QuantParams> quant;  // required for integer formats

  SparsityPattern pattern() const noexcept { return pattern_for(fmt); }
  std::size_t stored_values() const noexcept { return rows * cols / 2; }
  std::size_t metadata_entries() const noexcept;
  std::size_t metadata_bits() const noexcept { return 2 * metadata_entries(); }

  // 2-bit metadata entry at position i of the bitstream.
  unsigned meta(std::size_t i) const noexcept { return (metadata[i / 4] >> (2 * (i % 4))) & 0x3u; }
  // Signed integer code of stored value i (integer formats only).
  std::int32_t code(std::size_t i) const noexcept;
  // Stored value i as FP32 (dequantized for integer formats).
  float value(std::size_t i) const noexcept;

  // Throws Format if buffer lengths or metadata ordering are inconsistent.
  void check() const;

  friend bool operator==(const PackedSparseMatrix&, const PackedSparseMatrix&) = default;
};

// Integer formats need `quant` (per-tensor or one scale per row); every kept
// value must already sit on the quantization grid.
PackedSparseMatrix pack(const Matrix& w, const SparsityMask& mask, ElementFormat fmt,
                        const std::optional<QuantParams>& quant = std::nullopt);
Matrix unpack(const PackedSparseMatrix& p);
// Columns of each row's kept entries, in storage order; shared by unpack and
// the sparse GEMM gather.
void decode_row_columns(const PackedSparseMatrix& p, std::size_t row, std::span<std::uint32_t> cols_out);

std::uint64_t storage_bits(std::size_t rows, std::size_t cols, ElementFormat fmt, bool packed);

struct Ratio {
  std::uint64_t num;
  std::uint64_t den;
  double value() const noexcept { return static_cast<double>(num) / static_cast<double>(den); }
};
// 1 - packed/dense as an exact fraction.
Ratio storage_saving(std::size_t rows, std::size_t cols, ElementFormat fmt);
// Dense FP32 bits over packed bits for one aligned group.
Ratio compression_ratio(ElementFormat fmt);

// SPQZ container (see docs/formats.md).
inline constexpr std::uint8_t kSpqzVersion = 1;
std::vector<std::uint8_t> encode_spqz(const PackedSparseMatrix& p);
PackedSparseMatrix decode_spqz(std::span<const std::uint8_t> bytes);
void save_spqz(const std::filesystem::path& path, const PackedSparseMatrix& p);
PackedSparseMatrix load_spqz(const std::filesystem::path& path);

}  // namespace sparseq
