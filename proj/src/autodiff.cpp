#include "sparseq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace sparseq {

namespace {

constexpr float kSqrt2OverPi = 0.7978845608f;
constexpr float kGeluCubic = 0.044715f;

void require(bool ok, const std::string& what) {
  if (!ok) fail(ErrorKind::Shape, what);
}

void accumulate(Matrix& dst, const Matrix& g) {
  if (dst.empty()) {
    dst = g;
    return;
  }
  float* d = dst.data().data();
  const float* s = g.data().data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

// log-softmax of one row scaled by 1/temperature.
void log_softmax_row(std::span<const float> z, float inv_t, std::span<float> out) {
  float mx = -INFINITY;
  for (float v : z) mx = std::max(mx, v * inv_t);
  double sum = 0.0;
  for (float v : z) sum += std::exp(static_cast<double>(v * inv_t - mx));
  const float lse = mx + static_cast<float>(std::log(sum));
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] * inv_t - lse;
}

void softmax_inplace(std::span<float> row) {
  float mx = -INFINITY;
  for (float v : row) mx = std::max(mx, v);
  float sum = 0.0f;
  for (auto& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  const float inv = 1.0f / sum;
  for (auto& v : row) v *= inv;
}

// Rows of sample b, columns of head h, as a contiguous tokens x dh matrix.
Matrix head_slice(const Matrix& x, std::size_t b, std::size_t h, std::size_t tokens, std::size_t dh) {
  Matrix out(tokens, dh);
  for (std::size_t i = 0; i < tokens; ++i) {
    const float* src = x.row(b * tokens + i).data() + h * dh;
    std::copy(src, src + dh, out.row(i).data());
  }
  return out;
}

void put_head(Matrix& dst, const Matrix& src, std::size_t b, std::size_t h, std::size_t tokens, std::size_t dh) {
  for (std::size_t i = 0; i < tokens; ++i) std::copy(src.row(i).begin(), src.row(i).end(), dst.row(b * tokens + i).data() + h * dh);
}

std::size_t argmax(std::span<const float> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

float gelu_value(float x) noexcept {
  const float u = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(u));
}

void Param::zero_grad() {
  if (!grad.same_shape(value)) grad = Matrix(value.rows(), value.cols());
  else std::fill(grad.data().begin(), grad.data().end(), 0.0f);
}

const char* to_string(OpKind k) noexcept {
  switch (k) {
    case OpKind::Placeholder: return "placeholder";
    case OpKind::Constant: return "constant";
    case OpKind::Parameter: return "parameter";
    case OpKind::MatMul: return "matmul";
    case OpKind::Linear: return "linear";
    case OpKind::Add: return "add";
    case OpKind::AddBias: return "add_bias";
    case OpKind::AddTiled: return "add_tiled";
    case OpKind::PrependRows: return "prepend_rows";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Gelu: return "gelu";
    case OpKind::Softmax: return "softmax";
    case OpKind::LayerNorm: return "layernorm";
    case OpKind::EmbedLookup: return "embed_lookup";
    case OpKind::Reshape: return "reshape";
    case OpKind::Mean: return "mean";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::KlDiv: return "kl_div";
    case OpKind::Mse: return "mse";
    case OpKind::FakeQuant: return "fake_quant";
    case OpKind::MaskMul: return "mask_mul";
    case OpKind::Attention: return "attention";
    case OpKind::LabelGate: return "label_gate";
  }
  return "?";
}

Var Graph::push(Node n) {
  for (auto i : n.in) {
    if (i >= nodes_.size()) fail(ErrorKind::Graph, "input refers to a node that does not exist yet");
  }
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Graph::Node& Graph::node(Var v) {
  if (v.id >= nodes_.size()) fail(ErrorKind::Graph, "invalid node handle");
  return nodes_[v.id];
}

const Matrix& Graph::val(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.kind == OpKind::Parameter ? n.param->value : n.value;
}

const Matrix& Graph::value(Var v) const {
  if (v.id >= nodes_.size()) fail(ErrorKind::Graph, "invalid node handle");
  return val(v.id);
}

const Matrix& Graph::grad(Var v) const {
  if (v.id >= grads_.size()) fail(ErrorKind::Graph, "no gradient recorded for node");
  return grads_[v.id];
}

const Matrix& Graph::aux(Var v) const {
  if (v.id >= nodes_.size()) fail(ErrorKind::Graph, "invalid node handle");
  return nodes_[v.id].aux;
}

OpKind Graph::kind(Var v) const {
  if (v.id >= nodes_.size()) fail(ErrorKind::Graph, "invalid node handle");
  return nodes_[v.id].kind;
}

Var Graph::placeholder(std::string name) {
  Node n;
  n.kind = OpKind::Placeholder;
  n.name = std::move(name);
  return push(std::move(n));
}

void Graph::bind(Var v, Matrix value) {
  Node& n = node(v);
  if (n.kind != OpKind::Placeholder) fail(ErrorKind::Graph, "bind target is not a placeholder");
  n.value = std::move(value);
  n.bound = true;
}

Var Graph::constant(Matrix value) {
  Node n;
  n.kind = OpKind::Constant;
  n.value = std::move(value);
  n.bound = true;
  return push(std::move(n));
}

Var Graph::parameter(Param& p) {
  Node n;
  n.kind = OpKind::Parameter;
  n.param = &p;
  n.name = p.name;
  return push(std::move(n));
}

#define SPARSEQ_OP(KIND, ...) \
  Node n;                     \
  n.kind = OpKind::KIND;      \
  n.in = {__VA_ARGS__};

Var Graph::matmul(Var a, Var b) { SPARSEQ_OP(MatMul, a.id, b.id) return push(std::move(n)); }
Var Graph::linear(Var x, Var w) { SPARSEQ_OP(Linear, x.id, w.id) return push(std::move(n)); }
Var Graph::add(Var a, Var b) { SPARSEQ_OP(Add, a.id, b.id) return push(std::move(n)); }
Var Graph::add_bias(Var x, Var bias) { SPARSEQ_OP(AddBias, x.id, bias.id) return push(std::move(n)); }
Var Graph::add_tiled(Var x, Var tile) { SPARSEQ_OP(AddTiled, x.id, tile.id) return push(std::move(n)); }
Var Graph::prepend_rows(Var x, Var token, std::size_t group) {
  SPARSEQ_OP(PrependRows, x.id, token.id)
  if (group == 0) fail(ErrorKind::Graph, "prepend_rows group must be positive");
  n.i0 = group;
  return push(std::move(n));
}
Var Graph::mul(Var a, Var b) { SPARSEQ_OP(Mul, a.id, b.id) return push(std::move(n)); }
Var Graph::scale(Var x, float s) {
  SPARSEQ_OP(Scale, x.id)
  n.f0 = s;
  return push(std::move(n));
}
Var Graph::gelu(Var x) { SPARSEQ_OP(Gelu, x.id) return push(std::move(n)); }
Var Graph::softmax(Var x, int axis) {
  SPARSEQ_OP(Softmax, x.id)
  if (axis != 0 && axis != 1) fail(ErrorKind::Graph, "softmax axis must be 0 or 1");
  n.i0 = static_cast<std::size_t>(axis);
  return push(std::move(n));
}
Var Graph::layernorm(Var x, Var gamma, Var beta, float eps) {
  SPARSEQ_OP(LayerNorm, x.id, gamma.id, beta.id)
  n.f0 = eps;
  return push(std::move(n));
}
Var Graph::embed_lookup(Var table, std::vector<std::size_t> rows) {
  SPARSEQ_OP(EmbedLookup, table.id)
  n.indices = std::move(rows);
  return push(std::move(n));
}
Var Graph::reshape(Var x, std::size_t rows, std::size_t cols) {
  SPARSEQ_OP(Reshape, x.id)
  n.i0 = rows;
  n.i1 = cols;
  return push(std::move(n));
}
Var Graph::mean(Var x) { SPARSEQ_OP(Mean, x.id) return push(std::move(n)); }
Var Graph::cross_entropy(Var logits, Var target_probs) {
  SPARSEQ_OP(CrossEntropy, logits.id, target_probs.id)
  return push(std::move(n));
}
Var Graph::kl_div(Var student_logits, Var teacher_logits, float temperature) {
  SPARSEQ_OP(KlDiv, student_logits.id, teacher_logits.id)
  if (!(temperature > 0.0f)) fail(ErrorKind::Config, "temperature must be positive");
  n.f0 = temperature;
  return push(std::move(n));
}
Var Graph::mse(Var x, Var target, Var gate) { SPARSEQ_OP(Mse, x.id, target.id, gate.id) return push(std::move(n)); }
Var Graph::fake_quant(Var x, QuantSource source) {
  SPARSEQ_OP(FakeQuant, x.id)
  n.quant = std::move(source);
  return push(std::move(n));
}
Var Graph::mask_mul(Var x, const SparsityMask& mask) {
  SPARSEQ_OP(MaskMul, x.id)
  n.aux = mask.as_matrix();
  return push(std::move(n));
}
Var Graph::attention(Var q, Var k, Var v, std::size_t heads, std::size_t tokens) {
  SPARSEQ_OP(Attention, q.id, k.id, v.id)
  if (heads == 0 || tokens == 0) fail(ErrorKind::Graph, "attention needs heads, tokens > 0");
  n.i0 = heads;
  n.i1 = tokens;
  return push(std::move(n));
}
Var Graph::label_gate(Var student_logits, Var teacher_logits) {
  SPARSEQ_OP(LabelGate, student_logits.id, teacher_logits.id)
  return push(std::move(n));
}

#undef SPARSEQ_OP

void Graph::forward() {
  for (auto& n : nodes_) {
    if (n.kind == OpKind::Placeholder && !n.bound) fail(ErrorKind::Graph, "placeholder '" + n.name + "' is unbound");
    eval(n);
  }
}

void Graph::eval(Node& n) {
  auto in = [&](std::size_t i) -> const Matrix& { return val(n.in[i]); };
  switch (n.kind) {
    case OpKind::Placeholder:
    case OpKind::Constant:
    case OpKind::Parameter:
      return;
    case OpKind::MatMul:
      n.value = dense_gemm(in(0), in(1));
      return;
    case OpKind::Linear:
      n.value = gemm_nt(in(0), in(1));
      return;
    case OpKind::Add:
      n.value = sparseq::add(in(0), in(1));
      return;
    case OpKind::AddBias: {
      const Matrix& x = in(0);
      const Matrix& b = in(1);
      require(b.rows() == 1 && b.cols() == x.cols(), "bias must be 1 x cols");
      n.value = x;
      for (std::size_t r = 0; r < x.rows(); ++r) {
        float* row = n.value.row(r).data();
        for (std::size_t c = 0; c < x.cols(); ++c) row[c] += b.data()[c];
      }
      return;
    }
    case OpKind::AddTiled: {
      const Matrix& x = in(0);
      const Matrix& t = in(1);
      require(t.cols() == x.cols() && t.rows() > 0 && x.rows() % t.rows() == 0, "tile shape does not divide input");
      n.value = x;
      for (std::size_t r = 0; r < x.rows(); ++r) {
        float* row = n.value.row(r).data();
        const float* tr = t.row(r % t.rows()).data();
        for (std::size_t c = 0; c < x.cols(); ++c) row[c] += tr[c];
      }
      return;
    }
    case OpKind::PrependRows: {
      const Matrix& x = in(0);
      const Matrix& tok = in(1);
      const std::size_t g = n.i0;
      require(tok.rows() == 1 && tok.cols() == x.cols() && x.rows() % g == 0, "prepend_rows shape mismatch");
      const std::size_t groups = x.rows() / g;
      n.value = Matrix(x.rows() + groups, x.cols());
      for (std::size_t b = 0; b < groups; ++b) {
        std::copy(tok.data().begin(), tok.data().end(), n.value.row(b * (g + 1)).begin());
        for (std::size_t r = 0; r < g; ++r) {
          auto src = x.row(b * g + r);
          std::copy(src.begin(), src.end(), n.value.row(b * (g + 1) + 1 + r).begin());
        }
      }
      return;
    }
    case OpKind::Mul:
      n.value = hadamard(in(0), in(1));
      return;
    case OpKind::Scale:
      n.value = scaled(in(0), n.f0);
      return;
    case OpKind::Gelu: {
      n.value = in(0);
      for (auto& v : n.value.data()) v = gelu_value(v);
      return;
    }
    case OpKind::Softmax: {
      const Matrix& x = in(0);
      n.value = Matrix(x.rows(), x.cols());
      if (n.i0 == 1) {
        for (std::size_t r = 0; r < x.rows(); ++r) {
          log_softmax_row(x.row(r), 1.0f, n.value.row(r));
          for (auto& v : n.value.row(r)) v = std::exp(v);
        }
      } else {
        const Matrix t = transpose(x);
        Matrix s(t.rows(), t.cols());
        for (std::size_t r = 0; r < t.rows(); ++r) {
          log_softmax_row(t.row(r), 1.0f, s.row(r));
          for (auto& v : s.row(r)) v = std::exp(v);
        }
        n.value = transpose(s);
      }
      return;
    }
    case OpKind::LayerNorm: {
      const Matrix& x = in(0);
      const Matrix& gamma = in(1);
      const Matrix& beta = in(2);
      require(gamma.rows() == 1 && gamma.cols() == x.cols() && beta.same_shape(gamma), "layernorm affine shape mismatch");
      const std::size_t c = x.cols();
      n.value = Matrix(x.rows(), c);
      n.aux = Matrix(x.rows(), c);   // normalized input
      n.aux2 = Matrix(x.rows(), 1);  // reciprocal std
      for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        float mu = 0.0f;
        for (float v : xr) mu += v;
        mu /= static_cast<float>(c);
        float var = 0.0f;
        for (float v : xr) var += (v - mu) * (v - mu);
        var /= static_cast<float>(c);
        const float rstd = 1.0f / std::sqrt(var + n.f0);
        n.aux2(r, 0) = rstd;
        for (std::size_t j = 0; j < c; ++j) {
          const float xh = (xr[j] - mu) * rstd;
          n.aux(r, j) = xh;
          n.value(r, j) = xh * gamma.data()[j] + beta.data()[j];
        }
      }
      return;
    }
    case OpKind::EmbedLookup: {
      const Matrix& t = in(0);
      n.value = Matrix(n.indices.size(), t.cols());
      for (std::size_t i = 0; i < n.indices.size(); ++i) {
        require(n.indices[i] < t.rows(), "embed_lookup index out of range");
        auto src = t.row(n.indices[i]);
        std::copy(src.begin(), src.end(), n.value.row(i).begin());
      }
      return;
    }
    case OpKind::Reshape: {
      const Matrix& x = in(0);
      require(n.i0 * n.i1 == x.size(), "reshape changes element count");
      n.value = Matrix(n.i0, n.i1, x.data());
      return;
    }
    case OpKind::Mean: {
      const Matrix& x = in(0);
      require(!x.empty(), "mean of empty matrix");
      double s = 0.0;
      for (float v : x.data()) s += v;
      n.value = Matrix(1, 1, static_cast<float>(s / static_cast<double>(x.size())));
      return;
    }
    case OpKind::CrossEntropy: {
      const Matrix& z = in(0);
      const Matrix& t = in(1);
      require(z.same_shape(t) && z.rows() > 0, "cross_entropy target shape mismatch");
      n.aux = Matrix(z.rows(), z.cols());
      double loss = 0.0;
      for (std::size_t r = 0; r < z.rows(); ++r) {
        auto lp = n.aux.row(r);
        log_softmax_row(z.row(r), 1.0f, lp);
        for (std::size_t c = 0; c < z.cols(); ++c) {
          if (t(r, c) != 0.0f) loss -= static_cast<double>(t(r, c)) * lp[c];
        }
        for (auto& v : lp) v = std::exp(v);
      }
      n.value = Matrix(1, 1, static_cast<float>(loss / static_cast<double>(z.rows())));
      return;
    }
    case OpKind::KlDiv: {
      const Matrix& s = in(0);
      const Matrix& t = in(1);
      require(s.same_shape(t) && s.rows() > 0, "kl_div logits shape mismatch");
      const float inv_t = 1.0f / n.f0;
      n.aux = Matrix(s.rows(), s.cols());   // log p_student
      n.aux2 = Matrix(s.rows(), s.cols());  // log p_teacher
      double loss = 0.0;
      for (std::size_t r = 0; r < s.rows(); ++r) {
        log_softmax_row(s.row(r), inv_t, n.aux.row(r));
        log_softmax_row(t.row(r), inv_t, n.aux2.row(r));
        for (std::size_t c = 0; c < s.cols(); ++c) {
          const double lt = n.aux2(r, c);
          loss += std::exp(lt) * (lt - n.aux(r, c));
        }
      }
      loss = std::max(0.0, loss);
      n.value = Matrix(1, 1, static_cast<float>(static_cast<double>(n.f0) * n.f0 * loss / static_cast<double>(s.rows())));
      return;
    }
    case OpKind::Mse: {
      const Matrix& x = in(0);
      const Matrix& t = in(1);
      const Matrix& gate = in(2);
      require(x.same_shape(t), "mse target shape mismatch");
      require(gate.cols() == 1 && gate.rows() > 0 && x.rows() % gate.rows() == 0, "mse gate must be samples x 1");
      const std::size_t per = x.rows() / gate.rows();
      double sum = 0.0;
      std::size_t gated_rows = 0;
      for (std::size_t r = 0; r < x.rows(); ++r) {
        if (gate(r / per, 0) == 0.0f) continue;
        ++gated_rows;
        for (std::size_t c = 0; c < x.cols(); ++c) {
          const double d = static_cast<double>(x(r, c)) - t(r, c);
          sum += d * d;
        }
      }
      n.i0 = gated_rows;
      const double denom = static_cast<double>(gated_rows * x.cols());
      n.value = Matrix(1, 1, gated_rows ? static_cast<float>(sum / denom) : 0.0f);
      return;
    }
    case OpKind::FakeQuant: {
      const Matrix& x = in(0);
      int qmax = 0;
      n.scales.clear();
      if (const auto* f = std::get_if<FixedQuant>(&*n.quant)) {
        f->params.validate();
        require(f->params.granularity == Granularity::PerTensor || f->params.scales.size() == x.rows(),
                "fake_quant per-channel scales do not match rows");
        qmax = f->params.qmax();
        for (std::size_t r = 0; r < (f->params.granularity == Granularity::PerTensor ? 1 : x.rows()); ++r) {
          n.scales.push_back(f->params.scale_for(r));
        }
      } else if (const auto* d = std::get_if<DynamicPerChannel>(&*n.quant)) {
        qmax = qmax_for_bits(d->bits);
        for (std::size_t r = 0; r < x.rows(); ++r) {
          const float s = max_abs(x.row(r)) / static_cast<float>(qmax);
          n.scales.push_back(s >= kMinScale ? s : kMinScale);
        }
      } else {
        const auto& e = std::get<EmaActivation>(*n.quant);
        if (e.training && *e.training) e.ema->observe_amax(max_abs(x.data()));
        if (!e.ema->initialized()) fail(ErrorKind::Graph, "activation quantizer used before calibration");
        const QuantParams q = e.ema->params();
        qmax = q.qmax();
        n.scales.push_back(q.scales[0]);
      }
      n.i0 = static_cast<std::size_t>(qmax);
      n.value = Matrix(x.rows(), x.cols());
      for (std::size_t r = 0; r < x.rows(); ++r) {
        const float s = n.scales.size() == 1 ? n.scales[0] : n.scales[r];
        for (std::size_t c = 0; c < x.cols(); ++c) n.value(r, c) = fake_quant_value(x(r, c), s, qmax);
      }
      return;
    }
    case OpKind::MaskMul:
      n.value = hadamard(in(0), n.aux);
      return;
    case OpKind::Attention: {
      const Matrix& q = in(0);
      const Matrix& k = in(1);
      const Matrix& v = in(2);
      const std::size_t heads = n.i0, tokens = n.i1, d = q.cols();
      require(q.same_shape(k) && q.same_shape(v), "attention q/k/v shape mismatch");
      require(d % heads == 0 && q.rows() % tokens == 0, "attention dims not divisible");
      const std::size_t batch = q.rows() / tokens, dh = d / heads;
      const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
      n.value = Matrix(q.rows(), d);
      n.aux = Matrix(batch * heads * tokens, tokens);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const Matrix qh = head_slice(q, b, h, tokens, dh);
          const Matrix kh = head_slice(k, b, h, tokens, dh);
          Matrix p = gemm_nt(qh, kh);
          for (std::size_t i = 0; i < tokens; ++i) {
            auto row = p.row(i);
            for (auto& x : row) x *= inv_sqrt;
            softmax_inplace(row);
          }
          put_head(n.value, dense_gemm(p, head_slice(v, b, h, tokens, dh)), b, h, tokens, dh);
          std::copy(p.data().begin(), p.data().end(), n.aux.row((b * heads + h) * tokens).data());
        }
      }
      return;
    }
    case OpKind::LabelGate: {
      const Matrix& s = in(0);
      const Matrix& t = in(1);
      require(s.same_shape(t), "label_gate logits shape mismatch");
      n.value = Matrix(s.rows(), 1);
      for (std::size_t r = 0; r < s.rows(); ++r) n.value(r, 0) = argmax(s.row(r)) == argmax(t.row(r)) ? 1.0f : 0.0f;
      return;
    }
  }
}

void Graph::backward(Var loss) {
  if (loss.id >= nodes_.size()) fail(ErrorKind::Graph, "invalid loss handle");
  const Matrix& lv = val(loss.id);
  if (lv.rows() != 1 || lv.cols() != 1) fail(ErrorKind::Graph, "loss must be a scalar (1x1)");

  // Only nodes that reach a parameter need gradients.
  auto& needs = needs_;
  needs.assign(nodes_.size(), 0);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.kind == OpKind::Parameter) needs[i] = 1;
    if (n.kind == OpKind::LabelGate) continue;
    for (auto j : n.in) needs[i] |= needs[j];
  }

  grads_.assign(nodes_.size(), Matrix());
  grads_[loss.id] = Matrix(1, 1, 1.0f);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    if (grads_[i].empty() || !needs[i]) continue;
    propagate(i, grads_[i], grads_);
  }
  // Keep gradients for all reachable nodes; parameters also get them in Param::grad.
  for (std::size_t i = 0; i <= loss.id; ++i) {
    Node& n = nodes_[i];
    if (n.kind != OpKind::Parameter || grads_[i].empty()) continue;
    if (!n.param->grad.same_shape(n.param->value)) n.param->grad = Matrix(n.param->value.rows(), n.param->value.cols());
    accumulate(n.param->grad, grads_[i]);
  }
}

void Graph::propagate(std::size_t id, const Matrix& g, std::vector<Matrix>& grads) {
  Node& n = nodes_[id];
  auto in = [&](std::size_t i) -> const Matrix& { return val(n.in[i]); };
  auto send = [&](std::size_t i, const Matrix& gi) {
    if (needs_[n.in[i]]) accumulate(grads[n.in[i]], gi);
  };
  auto wants = [&](std::size_t i) { return needs_[n.in[i]] != 0; };

  switch (n.kind) {
    case OpKind::Placeholder:
    case OpKind::Constant:
    case OpKind::Parameter:
    case OpKind::LabelGate:
      return;
    case OpKind::MatMul:
      if (wants(0)) send(0, gemm_nt(g, in(1)));
      if (wants(1)) send(1, gemm_tn(in(0), g));
      return;
    case OpKind::Linear:
      // y = x w^T: dx = g w, dw = g^T x
      if (wants(0)) send(0, dense_gemm(g, in(1)));
      if (wants(1)) send(1, gemm_tn(g, in(0)));
      return;
    case OpKind::Add:
      send(0, g);
      send(1, g);
      return;
    case OpKind::AddBias: {
      send(0, g);
      Matrix gb(1, g.cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
      send(1, gb);
      return;
    }
    case OpKind::AddTiled: {
      send(0, g);
      const Matrix& t = in(1);
      Matrix gt(t.rows(), t.cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gt(r % t.rows(), c) += g(r, c);
      send(1, gt);
      return;
    }
    case OpKind::PrependRows: {
      const std::size_t grp = n.i0;
      const std::size_t groups = g.rows() / (grp + 1);
      Matrix gx(groups * grp, g.cols());
      Matrix gt(1, g.cols());
      for (std::size_t b = 0; b < groups; ++b) {
        for (std::size_t c = 0; c < g.cols(); ++c) gt(0, c) += g(b * (grp + 1), c);
        for (std::size_t r = 0; r < grp; ++r) {
          auto src = g.row(b * (grp + 1) + 1 + r);
          std::copy(src.begin(), src.end(), gx.row(b * grp + r).begin());
        }
      }
      send(0, gx);
      send(1, gt);
      return;
    }
    case OpKind::Mul:
      send(0, hadamard(g, in(1)));
      send(1, hadamard(g, in(0)));
      return;
    case OpKind::Scale:
      send(0, scaled(g, n.f0));
      return;
    case OpKind::Gelu: {
      const Matrix& x = in(0);
      Matrix gx(x.rows(), x.cols());
      for (std::size_t i = 0; i < x.size(); ++i) {
        const float v = x.data()[i];
        const float u = kSqrt2OverPi * (v + kGeluCubic * v * v * v);
        const float t = std::tanh(u);
        const float du = kSqrt2OverPi * (1.0f + 3.0f * kGeluCubic * v * v);
        gx.data()[i] = g.data()[i] * (0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du);
      }
      send(0, gx);
      return;
    }
    case OpKind::Softmax: {
      const Matrix& y = n.value;
      Matrix gx(y.rows(), y.cols());
      if (n.i0 == 1) {
        for (std::size_t r = 0; r < y.rows(); ++r) {
          float dot = 0.0f;
          for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
          for (std::size_t c = 0; c < y.cols(); ++c) gx(r, c) = y(r, c) * (g(r, c) - dot);
        }
      } else {
        for (std::size_t c = 0; c < y.cols(); ++c) {
          float dot = 0.0f;
          for (std::size_t r = 0; r < y.rows(); ++r) dot += g(r, c) * y(r, c);
          for (std::size_t r = 0; r < y.rows(); ++r) gx(r, c) = y(r, c) * (g(r, c) - dot);
        }
      }
      send(0, gx);
      return;
    }
    case OpKind::LayerNorm: {
      const Matrix& gamma = in(1);
      const std::size_t c = g.cols();
      Matrix gx(g.rows(), c), gg(1, c), gbeta(1, c);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        float m1 = 0.0f, m2 = 0.0f;
        for (std::size_t j = 0; j < c; ++j) {
          const float dxh = g(r, j) * gamma.data()[j];
          m1 += dxh;
          m2 += dxh * n.aux(r, j);
          gg(0, j) += g(r, j) * n.aux(r, j);
          gbeta(0, j) += g(r, j);
        }
        m1 /= static_cast<float>(c);
        m2 /= static_cast<float>(c);
        const float rstd = n.aux2(r, 0);
        for (std::size_t j = 0; j < c; ++j) {
          const float dxh = g(r, j) * gamma.data()[j];
          gx(r, j) = rstd * (dxh - m1 - n.aux(r, j) * m2);
        }
      }
      send(0, gx);
      send(1, gg);
      send(2, gbeta);
      return;
    }
    case OpKind::EmbedLookup: {
      const Matrix& t = in(0);
      Matrix gt(t.rows(), t.cols());
      for (std::size_t i = 0; i < n.indices.size(); ++i)
        for (std::size_t c = 0; c < t.cols(); ++c) gt(n.indices[i], c) += g(i, c);
      send(0, gt);
      return;
    }
    case OpKind::Reshape: {
      const Matrix& x = in(0);
      send(0, Matrix(x.rows(), x.cols(), g.data()));
      return;
    }
    case OpKind::Mean: {
      const Matrix& x = in(0);
      send(0, Matrix(x.rows(), x.cols(), g(0, 0) / static_cast<float>(x.size())));
      return;
    }
    case OpKind::CrossEntropy: {
      const Matrix& t = in(1);
      const float s = g(0, 0) / static_cast<float>(t.rows());
      Matrix gz(t.rows(), t.cols());
      Matrix gt(t.rows(), t.cols());
      for (std::size_t r = 0; r < t.rows(); ++r) {
        float tsum = 0.0f;
        for (std::size_t c = 0; c < t.cols(); ++c) tsum += t(r, c);
        for (std::size_t c = 0; c < t.cols(); ++c) {
          gz(r, c) = s * (n.aux(r, c) * tsum - t(r, c));
          gt(r, c) = -s * std::log(std::max(n.aux(r, c), 1e-30f));
        }
      }
      send(0, gz);
      send(1, gt);
      return;
    }
    case OpKind::KlDiv: {
      const std::size_t rows = n.aux.rows(), cols = n.aux.cols();
      const float temp = n.f0;
      const float s = g(0, 0) * temp / static_cast<float>(rows);
      Matrix gs(rows, cols), gt(rows, cols);
      for (std::size_t r = 0; r < rows; ++r) {
        float kl = 0.0f;
        for (std::size_t c = 0; c < cols; ++c) kl += std::exp(n.aux2(r, c)) * (n.aux2(r, c) - n.aux(r, c));
        for (std::size_t c = 0; c < cols; ++c) {
          const float ps = std::exp(n.aux(r, c));
          const float pt = std::exp(n.aux2(r, c));
          gs(r, c) = s * (ps - pt);
          gt(r, c) = s * pt * ((n.aux2(r, c) - n.aux(r, c)) - kl);
        }
      }
      send(0, gs);
      send(1, gt);
      return;
    }
    case OpKind::Mse: {
      const Matrix& x = in(0);
      const Matrix& t = in(1);
      const Matrix& gate = in(2);
      Matrix gx(x.rows(), x.cols());
      if (n.i0 > 0) {
        const std::size_t per = x.rows() / gate.rows();
        const float s = 2.0f * g(0, 0) / static_cast<float>(n.i0 * x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r) {
          if (gate(r / per, 0) == 0.0f) continue;
          for (std::size_t c = 0; c < x.cols(); ++c) gx(r, c) = s * (x(r, c) - t(r, c));
        }
      }
      send(1, scaled(gx, -1.0f));
      send(0, gx);
      return;
    }
    case OpKind::FakeQuant: {
      const Matrix& x = in(0);
      const int qmax = static_cast<int>(n.i0);
      Matrix gx(x.rows(), x.cols());
      for (std::size_t r = 0; r < x.rows(); ++r) {
        const float s = n.scales.size() == 1 ? n.scales[0] : n.scales[r];
        for (std::size_t c = 0; c < x.cols(); ++c) gx(r, c) = ste_passes(x(r, c), s, qmax) ? g(r, c) : 0.0f;
      }
      send(0, gx);
      return;
    }
    case OpKind::MaskMul:
      send(0, hadamard(g, n.aux));
      return;
    case OpKind::Attention: {
      const Matrix& q = in(0);
      const Matrix& k = in(1);
      const Matrix& v = in(2);
      const std::size_t heads = n.i0, tokens = n.i1, d = q.cols();
      const std::size_t batch = q.rows() / tokens, dh = d / heads;
      const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
      Matrix gq(q.rows(), d), gk(q.rows(), d), gv(q.rows(), d);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t p0 = (b * heads + h) * tokens * tokens;
          const Matrix p(tokens, tokens, std::vector<float>(n.aux.data().begin() + static_cast<long>(p0),
                                                            n.aux.data().begin() + static_cast<long>(p0 + tokens * tokens)));
          const Matrix go = head_slice(g, b, h, tokens, dh);
          const Matrix vh = head_slice(v, b, h, tokens, dh);
          put_head(gv, gemm_tn(p, go), b, h, tokens, dh);
          // dS = P * (dP - rowsum(dP * P)), scaled back through 1/sqrt(dh)
          Matrix ds = gemm_nt(go, vh);
          for (std::size_t i = 0; i < tokens; ++i) {
            float dot = 0.0f;
            for (std::size_t j = 0; j < tokens; ++j) dot += ds(i, j) * p(i, j);
            for (std::size_t j = 0; j < tokens; ++j) ds(i, j) = p(i, j) * (ds(i, j) - dot) * inv_sqrt;
          }
          put_head(gq, dense_gemm(ds, head_slice(k, b, h, tokens, dh)), b, h, tokens, dh);
          put_head(gk, gemm_tn(ds, head_slice(q, b, h, tokens, dh)), b, h, tokens, dh);
        }
      }
      send(0, gq);
      send(1, gk);
      send(2, gv);
      return;
    }
  }
}

namespace {
void check_grads(std::span<Param* const> params);
}  // namespace

void sgd_step(std::span<Param* const> params, float lr, float momentum) {
  check_grads(params);
  for (Param* p : params) {
    if (!p->grad.same_shape(p->value)) continue;
    if (!p->velocity.same_shape(p->value)) p->velocity = Matrix(p->value.rows(), p->value.cols());
    float* w = p->value.data().data();
    float* v = p->velocity.data().data();
    const float* g = p->grad.data().data();
    const std::uint8_t* keep = p->mask ? p->mask->bits.data() : nullptr;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      if (keep && !keep[i]) {
        v[i] = 0.0f;
        w[i] = 0.0f;
        continue;
      }
      v[i] = momentum * v[i] + g[i];
      w[i] -= lr * v[i];
    }
  }
}

namespace {
void check_grads(std::span<Param* const> params) {
  for (Param* p : params) {
    if (!p->grad.same_shape(p->value)) continue;
    for (std::size_t i = 0; i < p->grad.size(); ++i) {
      if (!std::isfinite(p->grad.data()[i])) {
        fail(ErrorKind::Training, "non-finite gradient in '" + p->name + "' at element " + std::to_string(i));
      }
    }
  }
}
}  // namespace

Adam::Adam(float beta1, float beta2, float eps, float weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  if (!(beta1 >= 0.0f && beta1 < 1.0f && beta2 >= 0.0f && beta2 < 1.0f && eps > 0.0f && weight_decay >= 0.0f)) {
    fail(ErrorKind::Config, "Adam hyper-parameters out of range");
  }
}

void Adam::step(std::span<Param* const> params, float lr) {
  check_grads(params);
  if (m_.empty()) {
    for (const Param* p : params) {
      m_.emplace_back(p->value.rows(), p->value.cols());
      v_.emplace_back(p->value.rows(), p->value.cols());
    }
  }
  if (m_.size() != params.size()) fail(ErrorKind::Graph, "Adam called with a different parameter list");
  ++t_;
  const float c1 = static_cast<float>(1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(t_)));
  const float c2 = static_cast<float>(1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(t_)));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param* p = params[k];
    if (!p->grad.same_shape(p->value)) continue;
    if (!m_[k].same_shape(p->value)) fail(ErrorKind::Graph, "Adam parameter '" + p->name + "' changed shape");
    float* w = p->value.data().data();
    float* m = m_[k].data().data();
    float* v = v_[k].data().data();
    const float* g = p->grad.data().data();
    const std::uint8_t* keep = p->mask ? p->mask->bits.data() : nullptr;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      if (keep && !keep[i]) {
        m[i] = v[i] = w[i] = 0.0f;
        continue;
      }
      m[i] = beta1_ * m[i] + (1.0f - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0f - beta2_) * g[i] * g[i];
      const float update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      w[i] -= lr * (update + weight_decay_ * w[i]);
    }
  }
}

}  // namespace sparseq
