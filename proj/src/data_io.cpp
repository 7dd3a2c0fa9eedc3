#include "sparseq/data_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "sparseq/byteio.hpp"

namespace sparseq {

namespace {

std::uint32_t be32(ByteReader& r) {
  const auto b = r.bytes(4);
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | std::uint32_t{b[3]};
}

// Header of an unsigned-byte IDX file; returns the dimensions.
std::vector<std::uint32_t> idx_header(ByteReader& r, std::uint32_t magic, const char* what) {
  const std::size_t at = r.offset();
  const std::uint32_t m = be32(r);
  if (m != magic) {
    char hex[11];
    std::snprintf(hex, sizeof hex, "0x%08x", m);
    fail(ErrorKind::Format, std::string(what) + ": bad magic " + hex + " at byte offset " + std::to_string(at));
  }
  std::vector<std::uint32_t> dims(magic & 0xff);
  for (auto& d : dims) d = be32(r);
  return dims;
}

void put_u32s(ByteWriter& w, std::span<const std::size_t> v) {
  w.u32(static_cast<std::uint32_t>(v.size()));
  for (auto x : v) w.u32(static_cast<std::uint32_t>(x));
}

}  // namespace

std::size_t Dataset::label(std::size_t i) const {
  if (i >= labels.size()) fail(ErrorKind::Range, "label index " + std::to_string(i) + " out of range");
  return labels[i];
}

void Dataset::validate() const {
  if (!labels.empty() && labels.size() != images_.n) fail(ErrorKind::Shape, "image and label counts differ");
  for (auto l : labels) {
    if (l >= num_classes) fail(ErrorKind::Range, "label " + std::to_string(l) + " outside class range");
  }
}

Dataset parse_idx(std::span<const std::uint8_t> images, std::optional<std::span<const std::uint8_t>> labels,
                  std::size_t classes) {
  Dataset ds;
  ds.num_classes = classes;
  ds.split = "idx";
  ByteReader r(images);
  const auto dims = idx_header(r, kIdxImagesMagic, "images");
  const std::uint64_t count = dims[0], h = dims[1], w = dims[2];
  if (h == 0 || w == 0) fail(ErrorKind::Format, "images: zero image dimension");
  const std::uint64_t hw = h * w;  // < 2^64 for 32-bit dims
  const bool fits = count == 0 ? r.remaining() == 0 : hw <= r.remaining() / count && count * hw == r.remaining();
  if (!fits) {
    fail(ErrorKind::Format, "images: header declares " + std::to_string(count) + "x" + std::to_string(h) + "x" + std::to_string(w) + " pixel bytes, file has " +
                                std::to_string(r.remaining()) + " after byte offset " + std::to_string(r.offset()));
  }
  ds.images_ = Tensor4(count, 1, h, w);
  const auto px = r.bytes(static_cast<std::size_t>(count * h * w));
  for (std::size_t i = 0; i < px.size(); ++i) ds.images_.data[i] = static_cast<float>(px[i]) / 255.0f;

  if (labels) {
    ByteReader lr(*labels);
    const auto ld = idx_header(lr, kIdxLabelsMagic, "labels");
    if (ld[0] != count) {
      fail(ErrorKind::Format, "labels: count " + std::to_string(ld[0]) + " does not match " + std::to_string(count) + " images");
    }
    if (lr.remaining() != count) {
      fail(ErrorKind::Format, "labels: header declares " + std::to_string(count) + " bytes, file has " +
                                  std::to_string(lr.remaining()) + " after byte offset " + std::to_string(lr.offset()));
    }
    const auto lb = lr.bytes(count);
    ds.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      if (lb[i] >= classes) {
        fail(ErrorKind::Format, "labels: value " + std::to_string(lb[i]) + " at byte offset " + std::to_string(8 + i) +
                                    " exceeds class count");
      }
      ds.labels[i] = lb[i];
    }
  }
  return ds;
}

Dataset load_idx(const std::filesystem::path& images_path, const std::optional<std::filesystem::path>& labels_path,
                 std::size_t classes) {
  const auto img = read_file(images_path);
  if (!labels_path) return parse_idx(img, std::nullopt, classes);
  const auto lab = read_file(*labels_path);
  return parse_idx(img, std::span<const std::uint8_t>(lab), classes);
}

Tensor4 pad_images(const Tensor4& x, std::size_t h, std::size_t w) {
  if (h < x.h || w < x.w) fail(ErrorKind::Shape, "pad target smaller than image");
  const std::size_t top = (h - x.h) / 2, left = (w - x.w) / 2;
  Tensor4 out(x.n, x.c, h, w);
  for (std::size_t n = 0; n < x.n; ++n)
    for (std::size_t c = 0; c < x.c; ++c)
      for (std::size_t y = 0; y < x.h; ++y)
        for (std::size_t xx = 0; xx < x.w; ++xx) out.at(n, c, y + top, xx + left) = x.at(n, c, y, xx);
  return out;
}

Dataset synth_dataset(Rng& rng, std::size_t classes, std::size_t n, std::size_t h, std::size_t w) {
  if (classes < 2) fail(ErrorKind::Config, "synthetic data needs at least two classes");
  if (h == 0 || w == 0) fail(ErrorKind::Config, "synthetic image size must be positive");
  struct Blob {
    double cy, cx, sigma;
  };
  // Two blobs per class template. Templates are redrawn (bounded tries) until
  // their blob pairs sit far enough from every earlier class.
  auto draw_template = [&] {
    std::array<Blob, 2> t{};
    for (auto& b : t) {
      b.cy = rng.uniform(0.2, 0.8) * static_cast<double>(h);
      b.cx = rng.uniform(0.2, 0.8) * static_cast<double>(w);
      b.sigma = rng.uniform(1.5, 3.0);
    }
    return t;
  };
  auto dist = [](const Blob& a, const Blob& b) { return std::hypot(a.cy - b.cy, a.cx - b.cx); };
  auto separation = [&](const std::array<Blob, 2>& a, const std::array<Blob, 2>& b) {
    return std::min(dist(a[0], b[0]) + dist(a[1], b[1]), dist(a[0], b[1]) + dist(a[1], b[0]));
  };
  const double min_sep = 0.25 * static_cast<double>(std::min(h, w));
  std::vector<std::array<Blob, 2>> templates;
  for (std::size_t c = 0; c < classes; ++c) {
    std::array<Blob, 2> best{};
    double best_sep = -1.0;
    for (int attempt = 0; attempt < 200 && best_sep < min_sep; ++attempt) {
      const auto t = draw_template();
      double sep = INFINITY;
      for (const auto& o : templates) sep = std::min(sep, separation(t, o));
      if (sep > best_sep) {
        best = t;
        best_sep = sep;
      }
    }
    templates.push_back(best);
  }
  Dataset ds;
  ds.num_classes = classes;
  ds.split = "synthetic";
  ds.images_ = Tensor4(n, 1, h, w);
  ds.labels.resize(n);
  auto draw = [&](std::size_t i, const Blob& b, double amp) {
    const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - b.cy, dx = static_cast<double>(x) - b.cx;
        ds.images_.at(i, 0, y, x) += static_cast<float>(amp * std::exp(-(dy * dy + dx * dx) * inv));
      }
  };
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = rng.below(classes);
    ds.labels[i] = cls;
    for (const Blob& t : templates[cls]) {
      const Blob b{t.cy + rng.normal(0.0, 1.0), t.cx + rng.normal(0.0, 1.0), t.sigma * rng.uniform(0.8, 1.2)};
      draw(i, b, rng.uniform(0.5, 1.0));
    }
    // One distractor blob drawn from the same distribution for every class.
    draw(i, Blob{rng.uniform(0.1, 0.9) * static_cast<double>(h), rng.uniform(0.1, 0.9) * static_cast<double>(w), rng.uniform(1.5, 3.5)},
         rng.uniform(0.1, 0.4));
    for (std::size_t p = 0; p < h * w; ++p) {
      float& v = ds.images_.data[i * h * w + p];
      v = std::clamp(v + static_cast<float>(rng.normal(0.0, 0.1)), 0.0f, 1.0f);
    }
  }
  return ds;
}

Tensor4 gather(const Tensor4& x, std::span<const std::size_t> idx) {
  Tensor4 out(idx.size(), x.c, x.h, x.w);
  const std::size_t sz = x.image_size();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.n) fail(ErrorKind::Range, "sample index out of range");
    std::copy_n(x.data.begin() + static_cast<long>(idx[i] * sz), sz, out.data.begin() + static_cast<long>(i * sz));
  }
  return out;
}

std::vector<std::uint8_t> encode_checkpoint(const ViTModel& model) {
  ByteWriter w;
  w.tag("SQCK");
  w.u8(kCheckpointVersion);
  const ViTConfig& c = model.config;
  for (std::size_t v : {c.image_h, c.image_w, c.channels, c.patch, c.dim, c.depth, c.heads, c.mlp_ratio, c.classes}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  put_u32s(w, c.stages);

  const auto params = model.params();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const Param* p : params) {
    w.str(p->name);
    w.u32(static_cast<std::uint32_t>(p->value.rows()));
    w.u32(static_cast<std::uint32_t>(p->value.cols()));
    for (float v : p->value.data()) w.f32(v);
    w.u8(p->mask ? 1 : 0);
    if (p->mask) {
      w.u8(static_cast<std::uint8_t>(p->mask->pattern));
      w.bytes(p->mask->bits);
    }
  }

  w.u8(static_cast<std::uint8_t>(model.quant_bits));
  if (model.quant_bits > 0) {
    w.u32(static_cast<std::uint32_t>(model.act_scales.size()));
    for (std::size_t i = 0; i < model.act_scales.size(); ++i) {
      const EmaScale& e = model.act_scales[i];
      w.u8(e.initialized() ? 1 : 0);
      w.f32(e.amax());
      const auto& q = model.weight_quant[i];
      w.u8(q ? 1 : 0);
      if (q) {
        w.u8(static_cast<std::uint8_t>(q->bits));
        w.u8(q->granularity == Granularity::PerChannel ? 1 : 0);
        w.u32(static_cast<std::uint32_t>(q->scales.size()));
        for (float s : q->scales) w.f32(s);
      }
    }
  }
  return w.take();
}

ViTModel decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_tag("SQCK");
  const std::uint8_t version = r.u8();
  if (version != kCheckpointVersion) {
    fail(ErrorKind::Format, "incompatible checkpoint version " + std::to_string(version) + " (this build reads version " +
                                std::to_string(kCheckpointVersion) + ")");
  }
  ViTConfig c;
  for (std::size_t* f : {&c.image_h, &c.image_w, &c.channels, &c.patch, &c.dim, &c.depth, &c.heads, &c.mlp_ratio, &c.classes}) {
    *f = r.u32();
  }
  const std::uint32_t ns = r.u32();
  if (ns > 4096) fail(ErrorKind::Format, "stage count too large at byte offset " + std::to_string(r.offset() - 4));
  c.stages.resize(ns);
  for (auto& s : c.stages) s = r.u32();
  for (std::size_t v : {c.image_h, c.image_w, c.dim, c.hidden(), c.classes}) {
    if (v > (1u << 16)) fail(ErrorKind::Format, "checkpoint config dimension " + std::to_string(v) + " out of range");
  }
  if (c.depth > 1024 || c.channels > 64 || c.mlp_ratio > 64) fail(ErrorKind::Format, "checkpoint config out of range");
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorKind::Format, std::string("checkpoint config invalid: ") + e.what());
  }
  // Every parameter needs at least four bytes; refuse to allocate beyond the input.
  if (count_params_flops(c, Compression::DenseFp32).params > r.remaining() / 4) {
    fail(ErrorKind::Format, "truncated: checkpoint too short for its declared model at byte offset " + std::to_string(r.offset()));
  }

  Rng rng(0);
  ViTModel m = build(c, rng);
  auto params = m.params();
  const std::uint32_t np = r.u32();
  if (np != params.size()) {
    fail(ErrorKind::Format, "checkpoint holds " + std::to_string(np) + " tensors, model needs " + std::to_string(params.size()));
  }
  for (Param* p : params) {
    const std::size_t at = r.offset();
    const std::string name = r.str();
    if (name != p->name) fail(ErrorKind::Format, "expected tensor '" + p->name + "' at byte offset " + std::to_string(at) + ", found '" + name + "'");
    const std::uint32_t rows = r.u32(), cols = r.u32();
    if (rows != p->value.rows() || cols != p->value.cols()) {
      fail(ErrorKind::Format, "tensor '" + name + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    for (auto& v : p->value.data()) v = r.f32();
    const std::uint8_t has_mask = r.u8();
    if (has_mask > 1) fail(ErrorKind::Format, "bad mask flag at byte offset " + std::to_string(r.offset() - 1));
    if (has_mask) {
      const std::uint8_t pat = r.u8();
      if (pat > 1) fail(ErrorKind::Format, "bad mask pattern at byte offset " + std::to_string(r.offset() - 1));
      SparsityMask mask{rows, cols, static_cast<SparsityPattern>(pat), {}};
      const auto b = r.bytes(static_cast<std::size_t>(rows) * cols);
      mask.bits.assign(b.begin(), b.end());
      for (auto v : mask.bits) {
        if (v > 1) fail(ErrorKind::Format, "mask bits must be 0 or 1 in tensor '" + name + "'");
      }
      if (!validate_mask(mask).legal()) fail(ErrorKind::Format, "mask of tensor '" + name + "' violates its pattern");
      p->mask = std::move(mask);
    }
  }

  const std::uint8_t bits = r.u8();
  if (bits != 0 && bits != 4 && bits != 8) fail(ErrorKind::Format, "bad quantization bits " + std::to_string(bits));
  if (bits > 0) {
    m.enable_quantization(bits);
    const std::uint32_t nl = r.u32();
    if (nl != m.act_scales.size()) fail(ErrorKind::Format, "quantization layer count mismatch");
    for (std::size_t i = 0; i < nl; ++i) {
      const std::uint8_t init = r.u8();
      const float amax = r.f32();
      if (init > 1) fail(ErrorKind::Format, "bad calibration flag at byte offset " + std::to_string(r.offset() - 5));
      if (init) m.act_scales[i].set_amax(amax);
      const std::uint8_t has_q = r.u8();
      if (has_q > 1) fail(ErrorKind::Format, "bad weight-scale flag at byte offset " + std::to_string(r.offset() - 1));
      if (has_q) {
        QuantParams q;
        q.bits = r.u8();
        const std::uint8_t gran = r.u8();
        if (gran > 1) fail(ErrorKind::Format, "bad granularity at byte offset " + std::to_string(r.offset() - 1));
        q.granularity = gran ? Granularity::PerChannel : Granularity::PerTensor;
        const std::uint32_t n = r.u32();
        if (n > (1u << 20)) fail(ErrorKind::Format, "scale count too large");
        q.scales.resize(n);
        for (auto& s : q.scales) s = r.f32();
        try {
          q.validate();
        } catch (const Error& e) {
          fail(ErrorKind::Format, std::string("weight scales invalid: ") + e.what());
        }
        m.weight_quant[i] = std::move(q);
      }
    }
  }
  r.expect_end();
  return m;
}

void save_checkpoint(const ViTModel& model, const std::filesystem::path& path) { write_file(path, encode_checkpoint(model)); }

ViTModel load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace sparseq
