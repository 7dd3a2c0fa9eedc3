#include "sparseq/sparse_format.hpp"

#include <bit>
#include <cmath>
#include <numeric>
#include <string>

#include "sparseq/byteio.hpp"

namespace sparseq {

std::string_view to_string(ElementFormat f) noexcept {
  switch (f) {
    case ElementFormat::FP16: return "FP16";
    case ElementFormat::INT8: return "INT8";
    case ElementFormat::INT4: return "INT4";
  }
  return "?";
}

std::uint16_t float_to_half(float f) noexcept {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
  const auto sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
  const std::uint32_t exp = (bits >> 23) & 0xffu;
  std::uint32_t mant = bits & 0x7fffffu;

  if (exp == 0xff) return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u | (mant >> 13) : 0u));
  const int e = static_cast<int>(exp) - 127 + 15;
  if (e >= 31) return static_cast<std::uint16_t>(sign | 0x7c00u);
  if (e <= 0) {
    if (e < -10) return sign;
    mant |= 0x800000u;
    const int shift = 14 - e;
    std::uint32_t h = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (h & 1u))) ++h;
    return static_cast<std::uint16_t>(sign | h);
  }
  std::uint32_t h = (static_cast<std::uint32_t>(e) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;  // carry may roll into the exponent
  return static_cast<std::uint16_t>(sign | h);
}

float half_to_float(std::uint16_t h) noexcept {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  const std::uint32_t mant = h & 0x3ffu;
  if (exp == 0) {
    const float v = std::ldexp(static_cast<float>(mant), -24);
    return sign ? -v : v;
  }
  if (exp == 31) return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
  return std::bit_cast<float>(sign | ((exp - 15 + 127) << 23) | (mant << 13));
}

namespace {

class BitWriter {
 public:
  void put2(unsigned v) {
    if (nbits_ % 8 == 0) bytes_.push_back(0);
    bytes_.back() |= static_cast<std::uint8_t>((v & 0x3u) << (nbits_ % 8));
    nbits_ += 2;
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t nbits_ = 0;
};

std::size_t bytes_for_bits(std::size_t bits) { return (bits + 7) / 8; }

std::size_t value_bytes(ElementFormat fmt, std::size_t count) {
  switch (fmt) {
    case ElementFormat::FP16: return 2 * count;
    case ElementFormat::INT8: return count;
    case ElementFormat::INT4: return (count + 1) / 2;
  }
  return 0;
}

void check_quant(const PackedSparseMatrix& p) {
  if (!is_integer(p.fmt)) {
    if (p.quant) fail(ErrorKind::Format, "FP16 pack must not carry quant params");
    return;
  }
  if (!p.quant) fail(ErrorKind::Config, std::string(to_string(p.fmt)) + " pack requires quant params");
  p.quant->validate();
  if (p.quant->bits != static_cast<int>(element_bits(p.fmt))) {
    fail(ErrorKind::Config, "quant bit width does not match element format");
  }
  if (p.quant->granularity == Granularity::PerChannel && p.quant->scales.size() != p.rows) {
    fail(ErrorKind::Shape, "per-channel scale count does not match rows");
  }
}

}  // namespace

std::size_t PackedSparseMatrix::metadata_entries() const noexcept {
  // one per kept value for 2:4, one per kept pair for 4:8
  return fmt == ElementFormat::INT4 ? rows * cols / 4 : rows * cols / 2;
}

std::int32_t PackedSparseMatrix::code(std::size_t i) const noexcept {
  if (fmt == ElementFormat::INT8) return static_cast<std::int8_t>(values[i]);
  const unsigned nib = (values[i / 2] >> (4 * (i % 2))) & 0xfu;
  return static_cast<std::int32_t>(nib) - ((nib & 0x8u) ? 16 : 0);
}

float PackedSparseMatrix::value(std::size_t i) const noexcept {
  if (fmt == ElementFormat::FP16) {
    return half_to_float(static_cast<std::uint16_t>(values[2 * i] | (values[2 * i + 1] << 8)));
  }
  const std::size_t row = i / (cols / 2);
  return dequantize_value(code(i), quant->scale_for(row));
}

void PackedSparseMatrix::check() const {
  const std::size_t width = group_width(pattern());
  if (cols == 0 || cols % width != 0) {
    fail(ErrorKind::Format, "logical column count " + std::to_string(cols) + " not a multiple of " + std::to_string(width));
  }
  if (values.size() != value_bytes(fmt, stored_values())) {
    fail(ErrorKind::Format, "value section is " + std::to_string(values.size()) + " bytes, expected " +
                                std::to_string(value_bytes(fmt, stored_values())));
  }
  if (metadata.size() != bytes_for_bits(metadata_bits())) {
    fail(ErrorKind::Format, "metadata section is " + std::to_string(metadata.size()) + " bytes, expected " +
                                std::to_string(bytes_for_bits(metadata_bits())));
  }
  if (const std::size_t used = metadata_bits() % 8; used != 0 && (metadata.back() >> used) != 0) {
    fail(ErrorKind::Format, "non-zero padding bits in final metadata byte");
  }
  check_quant(*this);
  const std::size_t per_group = 2;  // two entries per group in both layouts
  for (std::size_t g = 0; g < metadata_entries() / per_group; ++g) {
    if (meta(2 * g) >= meta(2 * g + 1)) {
      fail(ErrorKind::Format, "metadata group " + std::to_string(g) + " indices not strictly increasing");
    }
  }
  if (fmt == ElementFormat::INT4) {
    for (std::size_t i = 0; i < stored_values(); ++i) {
      if (code(i) < -7) fail(ErrorKind::Format, "INT4 code -8 is outside the symmetric range");
    }
  }
  if (fmt == ElementFormat::INT8) {
    for (std::size_t i = 0; i < stored_values(); ++i) {
      if (code(i) < -127) fail(ErrorKind::Format, "INT8 code -128 is outside the symmetric range");
    }
  }
}

PackedSparseMatrix pack(const Matrix& w, const SparsityMask& mask, ElementFormat fmt, const std::optional<QuantParams>& quant) {
  if (w.rows() != mask.rows || w.cols() != mask.cols) fail(ErrorKind::Shape, "mask shape does not match weights");
  if (mask.pattern != pattern_for(fmt)) {
    fail(ErrorKind::Pattern, std::string(to_string(fmt)) + " requires a " + std::string(to_string(pattern_for(fmt))) + " mask");
  }
  if (const auto report = validate_mask(mask); !report.legal()) {
    const auto& v = report.violations.front();
    fail(ErrorKind::Pattern, "illegal mask: " + std::to_string(report.violations.size()) + " violating groups, first at row " +
                                 std::to_string(v.row) + " group " + std::to_string(v.group));
  }

  PackedSparseMatrix p;
  p.rows = w.rows();
  p.cols = w.cols();
  p.fmt = fmt;
  if (is_integer(fmt)) p.quant = quant;
  check_quant(p);

  BitWriter meta;
  std::vector<std::int32_t> codes;
  codes.reserve(p.stored_values());
  const std::size_t width = group_width(mask.pattern);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const float scale = p.quant ? p.quant->scale_for(r) : 1.0f;
    for (std::size_t g = 0; g < w.cols(); g += width) {
      for (std::size_t i = 0; i < width; ++i) {
        if (!mask.keep(r, g + i)) continue;
        if (fmt == ElementFormat::INT4) {
          if (i % 2 == 0) meta.put2(static_cast<unsigned>(i / 2));
        } else {
          meta.put2(static_cast<unsigned>(i));
        }
        const float v = w(r, g + i);
        if (fmt == ElementFormat::FP16) {
          const std::uint16_t h = float_to_half(v);
          p.values.push_back(static_cast<std::uint8_t>(h & 0xff));
          p.values.push_back(static_cast<std::uint8_t>(h >> 8));
          continue;
        }
        const int qmax = p.quant->qmax();
        if (!std::isfinite(v) || std::abs(v / scale) > static_cast<float>(qmax) + 0.5f) {
          fail(ErrorKind::Range, "value " + std::to_string(v) + " at (" + std::to_string(r) + "," + std::to_string(g + i) +
                                     ") exceeds the " + std::string(to_string(fmt)) + " range");
        }
        const std::int32_t c = quantize_value(v, scale, qmax);
        if (dequantize_value(c, scale) != v) {
          fail(ErrorKind::Range, "value " + std::to_string(v) + " at (" + std::to_string(r) + "," + std::to_string(g + i) +
                                     ") is not on the quantization grid");
        }
        codes.push_back(c);
      }
    }
  }
  if (fmt == ElementFormat::INT8) {
    for (auto c : codes) p.values.push_back(static_cast<std::uint8_t>(static_cast<std::int8_t>(c)));
  } else if (fmt == ElementFormat::INT4) {
    p.values.assign(value_bytes(fmt, codes.size()), 0);
    for (std::size_t i = 0; i < codes.size(); ++i) {
      p.values[i / 2] |= static_cast<std::uint8_t>((static_cast<unsigned>(codes[i]) & 0xfu) << (4 * (i % 2)));
    }
  }
  p.metadata = meta.take();
  return p;
}

void decode_row_columns(const PackedSparseMatrix& p, std::size_t row, std::span<std::uint32_t> cols_out) {
  const std::size_t half = p.cols / 2;
  if (p.fmt == ElementFormat::INT4) {
    const std::size_t base_meta = row * (p.cols / 4);
    for (std::size_t j = 0; j < p.cols / 4; ++j) {
      const auto col = static_cast<std::uint32_t>((j / 2) * 8 + 2 * p.meta(base_meta + j));
      cols_out[2 * j] = col;
      cols_out[2 * j + 1] = col + 1;
    }
  } else {
    const std::size_t base_meta = row * half;
    for (std::size_t j = 0; j < half; ++j) {
      cols_out[j] = static_cast<std::uint32_t>((j / 2) * 4 + p.meta(base_meta + j));
    }
  }
}

Matrix unpack(const PackedSparseMatrix& p) {
  p.check();
  Matrix out(p.rows, p.cols);
  const std::size_t half = p.cols / 2;
  std::vector<std::uint32_t> cols(half);
  for (std::size_t r = 0; r < p.rows; ++r) {
    decode_row_columns(p, r, cols);
    for (std::size_t j = 0; j < half; ++j) out(r, cols[j]) = p.value(r * half + j);
  }
  return out;
}

std::uint64_t storage_bits(std::size_t rows, std::size_t cols, ElementFormat fmt, bool packed) {
  const std::uint64_t n = static_cast<std::uint64_t>(rows) * cols;
  const std::uint64_t b = element_bits(fmt);
  if (!packed) return b * n;
  if (fmt == ElementFormat::INT4) return n / 2 * b + (n / 8) * 2 * 2;
  return n / 2 * b + n / 2 * 2;
}

Ratio storage_saving(std::size_t rows, std::size_t cols, ElementFormat fmt) {
  const std::uint64_t dense = storage_bits(rows, cols, fmt, false);
  const std::uint64_t packed = storage_bits(rows, cols, fmt, true);
  const std::uint64_t g = std::gcd(dense - packed, dense);
  return {(dense - packed) / g, dense / g};
}

Ratio compression_ratio(ElementFormat fmt) {
  const std::size_t group = group_width(pattern_for(fmt));
  const std::uint64_t dense = 32u * group;
  const std::uint64_t packed = storage_bits(1, group, fmt, true);
  const std::uint64_t g = std::gcd(dense, packed);
  return {dense / g, packed / g};
}

std::vector<std::uint8_t> encode_spqz(const PackedSparseMatrix& p) {
  p.check();
  ByteWriter w;
  w.tag("SPQZ");
  w.u8(kSpqzVersion);
  w.u8(static_cast<std::uint8_t>(p.fmt));
  w.u8(static_cast<std::uint8_t>(p.pattern()));
  w.u8(p.quant ? static_cast<std::uint8_t>(1 + static_cast<int>(p.quant->granularity)) : 0);
  w.u32(static_cast<std::uint32_t>(p.rows));
  w.u32(static_cast<std::uint32_t>(p.cols));
  w.u32(p.quant ? static_cast<std::uint32_t>(p.quant->scales.size()) : 0);
  if (p.quant) {
    for (float s : p.quant->scales) w.f32(s);
  }
  w.u32(static_cast<std::uint32_t>(p.values.size()));
  w.bytes(p.values);
  w.u32(static_cast<std::uint32_t>(p.metadata.size()));
  w.bytes(p.metadata);
  return w.take();
}

PackedSparseMatrix decode_spqz(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_tag("SPQZ");
  const std::uint8_t version = r.u8();
  if (version != kSpqzVersion) fail(ErrorKind::Format, "unsupported SPQZ version " + std::to_string(version));
  const std::uint8_t fmt = r.u8();
  if (fmt > 2) fail(ErrorKind::Format, "unknown element format " + std::to_string(fmt) + " at byte offset 5");
  PackedSparseMatrix p;
  p.fmt = static_cast<ElementFormat>(fmt);
  const std::uint8_t pattern = r.u8();
  if (pattern != static_cast<std::uint8_t>(p.pattern())) {
    fail(ErrorKind::Format, "pattern byte " + std::to_string(pattern) + " does not match element format");
  }
  const std::uint8_t quant_kind = r.u8();
  if (quant_kind > 2) fail(ErrorKind::Format, "unknown quant kind at byte offset 7");
  p.rows = r.u32();
  p.cols = r.u32();
  const std::uint32_t n_scales = r.u32();
  if ((quant_kind == 0) != (n_scales == 0)) fail(ErrorKind::Format, "scale count inconsistent with quant kind");
  if (n_scales > r.remaining() / 4) fail(ErrorKind::Format, "scale array overruns file at byte offset " + std::to_string(r.offset()));
  if (quant_kind != 0) {
    QuantParams q;
    q.bits = static_cast<int>(element_bits(p.fmt));
    q.granularity = static_cast<Granularity>(quant_kind - 1);
    q.scales.clear();
    for (std::uint32_t i = 0; i < n_scales; ++i) {
      const std::size_t at = r.offset();
      const float s = r.f32();
      if (!std::isfinite(s) || !(s > 0.0f)) fail(ErrorKind::Format, "bad scale at byte offset " + std::to_string(at));
      q.scales.push_back(s);
    }
    p.quant = std::move(q);
  }
  const std::uint32_t nv = r.u32();
  auto v = r.bytes(nv);
  p.values.assign(v.begin(), v.end());
  const std::uint32_t nm = r.u32();
  auto m = r.bytes(nm);
  p.metadata.assign(m.begin(), m.end());
  r.expect_end();
  p.check();
  return p;
}

void save_spqz(const std::filesystem::path& path, const PackedSparseMatrix& p) { write_file(path, encode_spqz(p)); }

PackedSparseMatrix load_spqz(const std::filesystem::path& path) { return decode_spqz(read_file(path)); }

}  // namespace sparseq
