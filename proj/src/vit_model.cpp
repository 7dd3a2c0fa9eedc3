#include "sparseq/vit_model.hpp"

#include <algorithm>
#include <string>

namespace sparseq {

namespace {

void require_config(bool ok, const std::string& msg) {
  if (!ok) fail(ErrorKind::Config, msg);
}

Param trunc_normal(Rng& rng, std::string name, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (auto& v : m.data()) v = static_cast<float>(rng.truncated_normal(0.02));
  return Param(std::move(name), std::move(m));
}

Param filled(std::string name, std::size_t rows, std::size_t cols, float v) {
  return Param(std::move(name), Matrix(rows, cols, v));
}

}  // namespace

void ViTConfig::validate() const {
  require_config(image_h > 0 && image_w > 0 && channels > 0 && patch > 0, "image and patch sizes must be positive");
  require_config(image_h % patch == 0 && image_w % patch == 0,
                 "image " + std::to_string(image_h) + "x" + std::to_string(image_w) + " not divisible by patch " +
                     std::to_string(patch));
  require_config(dim > 0 && heads > 0 && dim % heads == 0,
                 "embed dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  require_config(depth > 0 && mlp_ratio > 0, "depth and mlp ratio must be positive");
  require_config(classes >= 2, "need at least two classes");
  for (std::size_t width : {patch_dim(), dim, hidden()}) {
    require_config(width % 8 == 0, "sparsifiable weight width " + std::to_string(width) + " not divisible by 8");
  }
  require_config(!stages.empty(), "at least one stage tap is required");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    require_config(stages[i] >= 1 && stages[i] <= depth, "stage tap " + std::to_string(stages[i]) + " outside 1.." +
                                                             std::to_string(depth));
    require_config(i == 0 || stages[i] > stages[i - 1], "stage taps must be strictly increasing");
  }
}

std::vector<std::size_t> default_stages(std::size_t depth) {
  std::vector<std::size_t> out;
  for (std::size_t q = 1; q <= 4; ++q) {
    const std::size_t s = std::max<std::size_t>(1, depth * q / 4);
    if (out.empty() || out.back() != s) out.push_back(s);
  }
  return out;
}

ViTConfig ViTConfig::desk() { return ViTConfig{}; }

ViTConfig ViTConfig::deit_tiny() {
  ViTConfig c;
  c.image_h = c.image_w = 224;
  c.channels = 3;
  c.patch = 16;
  c.dim = 192;
  c.depth = 12;
  c.heads = 3;
  c.mlp_ratio = 4;
  c.classes = 1000;
  c.stages = default_stages(12);
  return c;
}

std::vector<LayerRef> ViTModel::sparsifiable_layers() {
  std::vector<LayerRef> out;
  out.push_back({"patch_embed", &patch_w, &patch_b});
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    Block& b = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    out.push_back({p + "q", &b.wq, &b.bq});
    out.push_back({p + "k", &b.wk, &b.bk});
    out.push_back({p + "v", &b.wv, &b.bv});
    out.push_back({p + "proj", &b.wo, &b.bo});
    out.push_back({p + "fc1", &b.fc1, &b.b1});
    out.push_back({p + "fc2", &b.fc2, &b.b2});
  }
  out.push_back({"head", &head_w, &head_b});
  return out;
}

std::vector<Param*> ViTModel::params() {
  std::vector<Param*> out{&patch_w, &patch_b, &cls, &pos};
  for (Block& b : blocks) {
    for (Param* p : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ln2_g, &b.ln2_b, &b.fc1,
                     &b.b1, &b.fc2, &b.b2}) {
      out.push_back(p);
    }
  }
  for (Param* p : {&norm_g, &norm_b, &head_w, &head_b}) out.push_back(p);
  return out;
}

std::vector<const Param*> ViTModel::params() const {
  auto ps = const_cast<ViTModel*>(this)->params();
  return {ps.begin(), ps.end()};
}

std::size_t ViTModel::param_count() const {
  std::size_t n = 0;
  for (const Param* p : params()) n += p->value.size();
  return n;
}

void ViTModel::enable_quantization(int bits) {
  if (bits != 8 && bits != 4) fail(ErrorKind::Config, "quantization needs 8 or 4 bits");
  quant_bits = bits;
  const std::size_t n = sparsifiable_layers().size();
  act_scales.assign(n, EmaScale(bits));
  weight_quant.assign(n, std::nullopt);
}

ViTModel build(const ViTConfig& config, Rng& rng) {
  config.validate();
  ViTModel m;
  m.config = config;
  const std::size_t d = config.dim, h = config.hidden();
  m.patch_w = trunc_normal(rng, "patch_embed.weight", d, config.patch_dim());
  m.patch_b = filled("patch_embed.bias", 1, d, 0.0f);
  m.cls = trunc_normal(rng, "cls_token", 1, d);
  m.pos = trunc_normal(rng, "pos_embed", config.tokens(), d);
  m.blocks.resize(config.depth);
  for (std::size_t i = 0; i < config.depth; ++i) {
    Block& b = m.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    b.ln1_g = filled(p + "ln1.gamma", 1, d, 1.0f);
    b.ln1_b = filled(p + "ln1.beta", 1, d, 0.0f);
    b.wq = trunc_normal(rng, p + "q.weight", d, d);
    b.bq = filled(p + "q.bias", 1, d, 0.0f);
    b.wk = trunc_normal(rng, p + "k.weight", d, d);
    b.bk = filled(p + "k.bias", 1, d, 0.0f);
    b.wv = trunc_normal(rng, p + "v.weight", d, d);
    b.bv = filled(p + "v.bias", 1, d, 0.0f);
    b.wo = trunc_normal(rng, p + "proj.weight", d, d);
    b.bo = filled(p + "proj.bias", 1, d, 0.0f);
    b.ln2_g = filled(p + "ln2.gamma", 1, d, 1.0f);
    b.ln2_b = filled(p + "ln2.beta", 1, d, 0.0f);
    b.fc1 = trunc_normal(rng, p + "fc1.weight", h, d);
    b.b1 = filled(p + "fc1.bias", 1, h, 0.0f);
    b.fc2 = trunc_normal(rng, p + "fc2.weight", d, h);
    b.b2 = filled(p + "fc2.bias", 1, d, 0.0f);
  }
  m.norm_g = filled("norm.gamma", 1, d, 1.0f);
  m.norm_b = filled("norm.beta", 1, d, 0.0f);
  m.head_w = trunc_normal(rng, "head.weight", config.classes, d);
  m.head_b = filled("head.bias", 1, config.classes, 0.0f);
  return m;
}

ForwardGraph build_forward(Graph& g, ViTModel& model, std::size_t batch, const ForwardOptions& opt) {
  const ViTConfig& cfg = model.config;
  if (batch == 0) fail(ErrorKind::Shape, "empty batch");
  const bool quant = opt.quantize && model.quant_bits > 0;
  auto layers = model.sparsifiable_layers();
  if (quant && (model.act_scales.size() != layers.size() || model.weight_quant.size() != layers.size())) {
    fail(ErrorKind::Config, "quantization state does not match the layer list");
  }

  ForwardGraph fg;
  fg.batch = batch;
  std::size_t li = 0;
  // One sparsifiable layer: optional mask and fake quant on the weight,
  // fake quant on the GEMM input activation.
  auto dense = [&](Var x) {
    const LayerRef& ref = layers[li];
    fg.layer_inputs.push_back(x);
    Var w = g.parameter(*ref.weight);
    if (ref.weight->mask) w = g.mask_mul(w, *ref.weight->mask);
    if (quant) {
      if (model.weight_quant[li]) {
        w = g.fake_quant(w, FixedQuant{*model.weight_quant[li]});
      } else {
        w = g.fake_quant(w, DynamicPerChannel{model.quant_bits});
      }
      x = g.fake_quant(x, EmaActivation{&model.act_scales[li], &model.training});
    }
    ++li;
    return g.add_bias(g.linear(x, w), g.parameter(*ref.bias));
  };

  fg.input = g.placeholder("patches");
  Var x = dense(fg.input);
  x = g.add_tiled(g.prepend_rows(x, g.parameter(model.cls), cfg.patches()), g.parameter(model.pos));

  std::size_t next_stage = 0;
  for (std::size_t bi = 0; bi < model.blocks.size(); ++bi) {
    Block& b = model.blocks[bi];
    const Var h = g.layernorm(x, g.parameter(b.ln1_g), g.parameter(b.ln1_b));
    const Var q = dense(h);
    const Var k = dense(h);
    const Var v = dense(h);
    const Var att = g.attention(q, k, v, cfg.heads, cfg.tokens());
    fg.attention.push_back(att);
    x = g.add(x, dense(att));
    const Var h2 = g.layernorm(x, g.parameter(b.ln2_g), g.parameter(b.ln2_b));
    const Var f = g.gelu(dense(h2));
    x = g.add(x, dense(f));
    if (next_stage < cfg.stages.size() && cfg.stages[next_stage] == bi + 1) {
      fg.stages.push_back(x);
      ++next_stage;
    }
  }

  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t i = 0; i < batch; ++i) cls_rows[i] = i * cfg.tokens();
  const Var pooled = g.layernorm(g.embed_lookup(x, std::move(cls_rows)), g.parameter(model.norm_g), g.parameter(model.norm_b));
  fg.logits = dense(pooled);
  return fg;
}

ForwardResult forward(ViTModel& model, const Tensor4& batch, const ForwardOptions& opt) {
  const ViTConfig& cfg = model.config;
  if (batch.c != cfg.channels || batch.h != cfg.image_h || batch.w != cfg.image_w) {
    fail(ErrorKind::Shape, "batch " + std::to_string(batch.c) + "x" + std::to_string(batch.h) + "x" + std::to_string(batch.w) +
                               " does not match model input " + std::to_string(cfg.channels) + "x" +
                               std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w));
  }
  Graph g;
  const ForwardGraph fg = build_forward(g, model, batch.n, opt);
  g.bind(fg.input, im2col(batch, cfg.patch));
  g.forward();
  ForwardResult out;
  out.logits = g.value(fg.logits);
  for (Var s : fg.stages) out.stages.push_back(g.value(s));
  return out;
}

const char* to_string(Compression c) {
  switch (c) {
    case Compression::DenseFp32: return "dense-fp32";
    case Compression::SparseInt8: return "sparse-int8";
    case Compression::SparseInt4: return "sparse-int4";
  }
  return "?";
}

ElementFormat format_for(Compression c) {
  if (c == Compression::SparseInt4) return ElementFormat::INT4;
  if (c == Compression::SparseInt8) return ElementFormat::INT8;
  fail(ErrorKind::Config, "dense model has no packed format");
}

std::vector<LayerCost> layer_costs(const ViTConfig& cfg) {
  cfg.validate();
  const std::uint64_t t = cfg.tokens(), d = cfg.dim, h = cfg.hidden();
  std::vector<LayerCost> out;
  out.push_back({"patch_embed", cfg.dim, cfg.patch_dim(), cfg.patches() * d * cfg.patch_dim(), true});
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    for (const char* n : {"q", "k", "v"}) out.push_back({p + n, cfg.dim, cfg.dim, t * d * d, true});
    out.push_back({p + "attn_scores", 0, 0, t * t * d, false});
    out.push_back({p + "attn_values", 0, 0, t * t * d, false});
    out.push_back({p + "proj", cfg.dim, cfg.dim, t * d * d, true});
    out.push_back({p + "fc1", cfg.hidden(), cfg.dim, t * d * h, true});
    out.push_back({p + "fc2", cfg.dim, cfg.hidden(), t * h * d, true});
  }
  out.push_back({"head", cfg.classes, cfg.dim, d * cfg.classes, true});
  return out;
}

double modeled_speedup(Compression c) {
  if (c == Compression::DenseFp32) return 1.0;
  return 2.0 * (32.0 / element_bits(format_for(c))) * 4.0;
}

CostReport count_params_flops(const ViTConfig& cfg, Compression c) {
  const auto layers = layer_costs(cfg);
  const std::uint64_t d = cfg.dim, h = cfg.hidden();
  const std::uint64_t per_block = 4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d);
  CostReport r;
  r.params = (cfg.patch_dim() * d + d) + d + cfg.tokens() * d + cfg.depth * per_block + 2 * d + (d * cfg.classes + cfg.classes);
  for (const auto& l : layers) r.macs += l.macs;

  if (c == Compression::DenseFp32) {
    r.params_m_equiv = static_cast<double>(r.params) / 1e6;
    r.flops_g_equiv = static_cast<double>(r.macs) / 1e9;
    return r;
  }
  const ElementFormat fmt = format_for(c);
  std::uint64_t packed_bits = 0, weight_params = 0;
  for (const auto& l : layers) {
    if (!l.sparsifiable) continue;
    packed_bits += storage_bits(l.rows, l.cols, fmt, true);
    weight_params += static_cast<std::uint64_t>(l.rows) * l.cols;
  }
  const double rest = static_cast<double>(r.params - weight_params) / compression_ratio(fmt).value();
  r.params_m_equiv = (static_cast<double>(packed_bits) / 32.0 + rest) / 1e6;
  r.flops_g_equiv = static_cast<double>(r.macs) / modeled_speedup(c) / 1e9;
  return r;
}

}  // namespace sparseq
