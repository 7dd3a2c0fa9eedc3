#include "sparseq/quantizer.hpp"

#include <algorithm>
#include <string>

namespace sparseq {

void QuantParams::validate() const {
  if (bits != 8 && bits != 4) fail(ErrorKind::Config, "bit width must be 8 or 4, got " + std::to_string(bits));
  if (scales.empty()) fail(ErrorKind::Config, "quant params carry no scales");
  if (granularity == Granularity::PerTensor && scales.size() != 1) {
    fail(ErrorKind::Config, "per-tensor quant params need exactly one scale");
  }
  for (float s : scales) {
    if (!(s > 0.0f) || !std::isfinite(s)) fail(ErrorKind::Config, "quant scale must be positive and finite");
  }
}

namespace {

float quantile_abs(std::vector<float> values, double p) {
  if (!(p > 0.0 && p <= 1.0)) fail(ErrorKind::Config, "percentile must lie in (0, 1]");
  for (auto& v : values) v = std::abs(v);
  const auto n = values.size();
  // nearest-rank
  auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(rank - 1), values.end());
  return values[rank - 1];
}

float range_of(std::vector<float> values, const CalibrationMethod& method) {
  if (std::holds_alternative<AmaxMethod>(method)) return max_abs(values);
  return quantile_abs(std::move(values), std::get<PercentileMethod>(method).p);
}

Calibration finish(std::vector<float> ranges, int bits, Granularity granularity) {
  Calibration cal;
  cal.params.bits = bits;
  cal.params.granularity = granularity;
  cal.params.scales.clear();
  const float qmax = static_cast<float>(qmax_for_bits(bits));
  for (float r : ranges) {
    float s = r / qmax;
    if (!(s >= kMinScale)) {
      s = kMinScale;
      cal.degenerate = true;
    }
    cal.params.scales.push_back(s);
  }
  return cal;
}

void check_bits(int bits) {
  if (bits != 8 && bits != 4) fail(ErrorKind::Config, "bit width must be 8 or 4");
}

}  // namespace

Calibration calibrate(const Matrix& t, int bits, Granularity granularity, const CalibrationMethod& method) {
  check_bits(bits);
  if (t.empty()) fail(ErrorKind::Config, "cannot calibrate an empty tensor");
  std::vector<float> ranges;
  if (granularity == Granularity::PerTensor) {
    ranges.push_back(range_of(t.data(), method));
  } else {
    for (std::size_t r = 0; r < t.rows(); ++r) {
      auto row = t.row(r);
      ranges.push_back(range_of({row.begin(), row.end()}, method));
    }
  }
  return finish(std::move(ranges), bits, granularity);
}

Calibration calibrate(const Tensor4& t, int bits, Granularity granularity, const CalibrationMethod& method) {
  check_bits(bits);
  if (t.data.empty()) fail(ErrorKind::Config, "cannot calibrate an empty tensor");
  std::vector<float> ranges;
  if (granularity == Granularity::PerTensor) {
    ranges.push_back(range_of(t.data, method));
  } else {
    const std::size_t plane = t.h * t.w;
    for (std::size_t c = 0; c < t.c; ++c) {
      std::vector<float> values;
      values.reserve(t.n * plane);
      for (std::size_t n = 0; n < t.n; ++n) {
        const float* p = t.data.data() + (n * t.c + c) * plane;
        values.insert(values.end(), p, p + plane);
      }
      ranges.push_back(range_of(std::move(values), method));
    }
  }
  return finish(std::move(ranges), bits, granularity);
}

namespace {
void check_channels(const Matrix& t, const QuantParams& q) {
  q.validate();
  if (q.granularity == Granularity::PerChannel && q.scales.size() != t.rows()) {
    fail(ErrorKind::Shape, "per-channel scale count does not match rows");
  }
}
}  // namespace

QuantizedMatrix quantize(const Matrix& t, const QuantParams& q) {
  check_channels(t, q);
  QuantizedMatrix out{t.rows(), t.cols(), std::vector<std::int8_t>(t.size())};
  const int qmax = q.qmax();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const float s = q.scale_for(r);
    for (std::size_t c = 0; c < t.cols(); ++c) {
      out.codes[r * t.cols() + c] = static_cast<std::int8_t>(quantize_value(t(r, c), s, qmax));
    }
  }
  return out;
}

Matrix dequantize(const QuantizedMatrix& qt, const QuantParams& q) {
  Matrix out(qt.rows, qt.cols);
  check_channels(out, q);
  for (std::size_t r = 0; r < qt.rows; ++r) {
    const float s = q.scale_for(r);
    for (std::size_t c = 0; c < qt.cols; ++c) out(r, c) = dequantize_value(qt.codes[r * qt.cols + c], s);
  }
  return out;
}

Matrix fake_quant(const Matrix& t, const QuantParams& q) {
  check_channels(t, q);
  Matrix out(t.rows(), t.cols());
  const int qmax = q.qmax();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const float s = q.scale_for(r);
    for (std::size_t c = 0; c < t.cols(); ++c) out(r, c) = fake_quant_value(t(r, c), s, qmax);
  }
  return out;
}

Tensor4 fake_quant(const Tensor4& t, const QuantParams& q) {
  q.validate();
  if (q.granularity == Granularity::PerChannel && q.scales.size() != t.c) {
    fail(ErrorKind::Shape, "per-channel scale count does not match channels");
  }
  Tensor4 out = t;
  const std::size_t plane = t.h * t.w;
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    const std::size_t c = (i / plane) % t.c;
    out.data[i] = fake_quant_value(t.data[i], q.scale_for(c), q.qmax());
  }
  return out;
}

void EmaScale::observe_amax(float amax) {
  if (!initialized_) {
    set_amax(amax);
    return;
  }
  amax_ = momentum_ * amax_ + (1.0f - momentum_) * amax;
}

QuantParams EmaScale::params() const {
  const float s = amax_ / static_cast<float>(qmax_for_bits(bits_));
  return QuantParams::per_tensor(bits_, s >= kMinScale ? s : kMinScale);
}

}  // namespace sparseq
