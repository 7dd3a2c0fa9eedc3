#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "sparseq/numerics.hpp"

namespace sparseq {

enum class Granularity : std::uint8_t { PerTensor = 0, PerChannel = 1 };

inline constexpr float kMinScale = 1e-12f;

constexpr int qmax_for_bits(int bits) noexcept { return bits == 8 ? 127 : 7; }

// Symmetric linear quantization parameters. PerChannel means one scale per
// matrix row (output channel of a weight) or per image channel of a Tensor4.
struct QuantParams {
  int bits = 8;
  Granularity granularity = Granularity::PerTensor;
  std::vector<float> scales{1.0f};

  int qmax() const noexcept { return qmax_for_bits(bits); }
  float scale_for(std::size_t channel) const noexcept {
    return granularity == Granularity::PerTensor ? scales[0] : scales[channel];
  }
  void validate() const;

  static QuantParams per_tensor(int bits, float scale) { return {bits, Granularity::PerTensor, {scale}}; }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

struct AmaxMethod {};
struct PercentileMethod {
  double p = 0.999;  // fraction in (0, 1]
};
using CalibrationMethod = std::variant<AmaxMethod, PercentileMethod>;

struct Calibration {
  QuantParams params;
  bool degenerate = false;  // some scale hit the floor (all-zero input)
};

Calibration calibrate(const Matrix& t, int bits, Granularity granularity, const CalibrationMethod& method = AmaxMethod{});
Calibration calibrate(const Tensor4& t, int bits, Granularity granularity, const CalibrationMethod& method = AmaxMethod{});

// Integer codes stored as int8 for both widths.
struct QuantizedMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int8_t> codes;
  friend bool operator==(const QuantizedMatrix&, const QuantizedMatrix&) = default;
};

// Scalar kernels. Division is done in FP32 and rounded half-to-even.
inline std::int32_t quantize_value(float x, float scale, int qmax) noexcept {
  const float r = std::nearbyint(x / scale);
  const float q = std::fmin(std::fmax(r, static_cast<float>(-qmax)), static_cast<float>(qmax));
  return static_cast<std::int32_t>(q);
}
inline float dequantize_value(std::int32_t code, float scale) noexcept { return static_cast<float>(code) * scale; }
inline float fake_quant_value(float x, float scale, int qmax) noexcept {
  return dequantize_value(quantize_value(x, scale, qmax), scale);
}
// Straight-through gate: gradient passes iff |x| <= qmax * scale.
inline bool ste_passes(float x, float scale, int qmax) noexcept {
  return std::abs(x) <= static_cast<float>(qmax) * scale;
}

QuantizedMatrix quantize(const Matrix& t, const QuantParams& q);
Matrix dequantize(const QuantizedMatrix& qt, const QuantParams& q);
Matrix fake_quant(const Matrix& t, const QuantParams& q);
Tensor4 fake_quant(const Tensor4& t, const QuantParams& q);

// Per-tensor activation scale tracked by an exponential moving average of
// batch amax. The first observation initializes the average directly.
class EmaScale {
 public:
  explicit EmaScale(int bits = 8, float momentum = 0.95f) : bits_(bits), momentum_(momentum) {}

  void observe_amax(float amax);
  void set_amax(float amax) { amax_ = amax; initialized_ = true; }
  bool initialized() const noexcept { return initialized_; }
  float amax() const noexcept { return amax_; }
  int bits() const noexcept { return bits_; }
  QuantParams params() const;

 private:
  int bits_;
  float momentum_;
  float amax_ = 0.0f;
  bool initialized_ = false;
};

}  // namespace sparseq
