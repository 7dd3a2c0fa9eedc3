#include "doctest.h"
#include "sparseq/quantizer.hpp"
#include "sparseq/sparsity_pattern.hpp"

using namespace sparseq;

TEST_SUITE("quantizer") {
  TEST_CASE("amax calibration") {
    const Matrix t = Matrix::from_rows({{-1.0f, 0.5f}});
    const auto c = calibrate(t, 8, Granularity::PerTensor);
    CHECK(c.params.scales[0] == 1.0f / 127.0f);
    CHECK_FALSE(c.degenerate);

    const auto z = calibrate(Matrix(1, 1), 8, Granularity::PerTensor);
    CHECK(z.params.scales[0] == kMinScale);
    CHECK(z.degenerate);

    const auto i4 = calibrate(Matrix::from_rows({{-7, 7}}), 4, Granularity::PerTensor);
    CHECK(i4.params.scales[0] == 1.0f);
  }

  TEST_CASE("per-channel and percentile calibration") {
    const Matrix t = Matrix::from_rows({{1, -2, 0, 0}, {0, 0, 0, 14}});
    const auto c = calibrate(t, 4, Granularity::PerChannel);
    REQUIRE(c.params.scales.size() == 2);
    CHECK(c.params.scales[0] == doctest::Approx(2.0 / 7.0));
    CHECK(c.params.scales[1] == 2.0f);

    Matrix ramp(1, 100);
    for (std::size_t i = 0; i < 100; ++i) ramp(0, i) = static_cast<float>(i + 1);
    const auto p = calibrate(ramp, 8, Granularity::PerTensor, PercentileMethod{0.9});
    CHECK(p.params.scales[0] == doctest::Approx(90.0 / 127.0));

    Tensor4 img(2, 2, 1, 2);
    img.data = {1, 2, -3, 0, 4, 0, 0, -8};
    const auto pc = calibrate(img, 8, Granularity::PerChannel);
    CHECK(pc.params.scales[0] == doctest::Approx(4.0 / 127.0));
    CHECK(pc.params.scales[1] == doctest::Approx(8.0 / 127.0));
  }

  TEST_CASE("quantize: half-to-even, clamping, dequantize") {
    const float s = 1.0f / 127.0f;
    CHECK(quantize_value(0.5f, s, 127) == 64);  // 63.5 rounds to even
    CHECK(dequantize_value(64, s) == doctest::Approx(0.50394).epsilon(1e-4));
    CHECK(quantize_value(5.0f, s, 127) == 127);
    CHECK(quantize_value(-5.0f, s, 127) == -127);
    CHECK(quantize_value(2.5f, 1.0f, 7) == 2);
    CHECK(quantize_value(3.5f, 1.0f, 7) == 4);
    CHECK(fake_quant_value(9.0f, 1.0f, 7) == 7.0f);

    const Matrix t = Matrix::from_rows({{0.3f, -1.2f, 1.0f}});
    const auto q = QuantParams::per_tensor(8, 0.01f);
    const Matrix back = dequantize(quantize(t, q), q);
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(std::abs(back.data()[i] - t.data()[i]) <= 0.005f + 1e-7f);
  }

  TEST_CASE("fake_quant on-grid identity and snapping") {
    const float s = 0.125f;
    Matrix grid(1, 5);
    for (int i = 0; i < 5; ++i) grid(0, i) = static_cast<float>(i - 2) * s;
    const auto q = QuantParams::per_tensor(8, s);
    CHECK(fake_quant(grid, q) == grid);
    Matrix off = grid;
    for (auto& v : off.data()) v += s / 4;
    CHECK(fake_quant(off, q) == grid);
  }

  TEST_CASE("properties: idempotent, monotone, zero-preserving") {
    Rng rng(51);
    for (int bits : {8, 4}) {
      for (int trial = 0; trial < 50; ++trial) {
        const Matrix t = random_matrix(rng, 4, 16, Normal{0.0, 1.5});
        const auto q = calibrate(t, bits, Granularity::PerChannel).params;
        const Matrix once = fake_quant(t, q);
        CHECK(fake_quant(once, q) == once);

        const auto masked = apply_mask(t, select_mask_2of4(t));
        const Matrix fq = fake_quant(masked, q);
        for (std::size_t i = 0; i < t.size(); ++i) {
          if (masked.data()[i] == 0.0f) CHECK(fq.data()[i] == 0.0f);
        }
      }
      const float scale = 0.37f;
      float prev = -INFINITY;
      for (int i = -4000; i <= 4000; ++i) {
        const float v = fake_quant_value(static_cast<float>(i) * 0.001f, scale, qmax_for_bits(bits));
        CHECK(v >= prev);
        prev = v;
      }
    }
  }

  TEST_CASE("straight-through gate is inclusive at the clip boundary") {
    CHECK(ste_passes(7.0f, 1.0f, 7));
    CHECK(ste_passes(-7.0f, 1.0f, 7));
    CHECK_FALSE(ste_passes(7.01f, 1.0f, 7));
  }

  TEST_CASE("EMA activation scale") {
    EmaScale ema(8, 0.95f);
    ema.observe_amax(1.0f);
    CHECK(ema.amax() == 1.0f);
    ema.observe_amax(3.0f);
    CHECK(ema.amax() == doctest::Approx(1.1));
    CHECK(ema.params().scales[0] == doctest::Approx(1.1 / 127.0));
  }

  TEST_CASE("invalid params are rejected") {
    CHECK_THROWS_AS(QuantParams::per_tensor(8, 0.0f).validate(), Error);
    CHECK_THROWS_AS(QuantParams::per_tensor(6, 1.0f).validate(), Error);
    CHECK_THROWS_AS((void)calibrate(Matrix(), 8, Granularity::PerTensor), Error);
    CHECK_THROWS_AS((void)fake_quant(Matrix(3, 2), QuantParams{8, Granularity::PerChannel, {1.0f, 1.0f}}), Error);
  }
}
