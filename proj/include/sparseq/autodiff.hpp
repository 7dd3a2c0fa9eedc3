#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "sparseq/numerics.hpp"
#include "sparseq/quantizer.hpp"
#include "sparseq/sparsity_pattern.hpp"

namespace sparseq {

// Trainable tensor. `mask`, when present, pins pruned positions to zero: the
// optimizer hard-zeroes their gradient and value.
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix velocity;
  std::optional<SparsityMask> mask;

  Param() = default;
  Param(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {}
  void zero_grad();
};

// Handle to a graph node.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

// Quantization source for a fake-quant node.
struct FixedQuant {
  QuantParams params;
};
// Per-row amax of the current input, recomputed every forward (weights).
struct DynamicPerChannel {
  int bits = 8;
};
// Per-tensor scale from an EMA of batch amax (activations). The EMA is only
// updated when *training is true.
struct EmaActivation {
  EmaScale* ema = nullptr;
  const bool* training = nullptr;
};
using QuantSource = std::variant<FixedQuant, DynamicPerChannel, EmaActivation>;

enum class OpKind {
  Placeholder,
  Constant,
  Parameter,
  MatMul,          // a * b
  Linear,          // x * w^T
  Add,
  AddBias,         // x + row vector broadcast over rows
  AddTiled,        // x + t where t's rows repeat every t.rows() rows of x
  PrependRows,     // insert one token row before every group of rows
  Mul,
  Scale,
  Gelu,
  Softmax,
  LayerNorm,
  EmbedLookup,     // gather rows by index
  Reshape,
  Mean,
  CrossEntropy,    // soft-target cross entropy, batch mean
  KlDiv,           // T^2 * KL(softmax(t/T) || softmax(s/T)), batch mean
  Mse,             // gated per-element MSE
  FakeQuant,
  MaskMul,
  Attention,       // fused multi-head softmax(QK^T/sqrt(d))V
  LabelGate,       // per-sample argmax agreement, no gradient
};

const char* to_string(OpKind k) noexcept;

// Define-then-run reverse-mode graph over FP32 matrices. Nodes are evaluated
// in creation order, which is a topological order by construction. A graph can
// be re-run with new placeholder bindings and updated parameter values.
class Graph {
 public:
  Var placeholder(std::string name);
  void bind(Var v, Matrix value);
  Var constant(Matrix value);
  Var parameter(Param& p);

  Var matmul(Var a, Var b);
  Var linear(Var x, Var w);
  Var add(Var a, Var b);
  Var add_bias(Var x, Var bias);
  Var add_tiled(Var x, Var tile);
  Var prepend_rows(Var x, Var token, std::size_t group);
  Var mul(Var a, Var b);
  Var scale(Var x, float s);
  Var gelu(Var x);
  Var softmax(Var x, int axis = 1);
  Var layernorm(Var x, Var gamma, Var beta, float eps = 1e-5f);
  Var embed_lookup(Var table, std::vector<std::size_t> rows);
  Var reshape(Var x, std::size_t rows, std::size_t cols);
  Var mean(Var x);
  Var cross_entropy(Var logits, Var target_probs);
  Var kl_div(Var student_logits, Var teacher_logits, float temperature);
  // `gate` is a (samples x 1) 0/1 node; rows of x belong to sample r / (rows/samples).
  Var mse(Var x, Var target, Var gate);
  Var fake_quant(Var x, QuantSource source);
  Var mask_mul(Var x, const SparsityMask& mask);
  Var attention(Var q, Var k, Var v, std::size_t heads, std::size_t tokens);
  Var label_gate(Var student_logits, Var teacher_logits);

  void forward();
  // Seeds d(loss)/d(loss) = 1 and propagates; parameter gradients are
  // accumulated into Param::grad.
  void backward(Var loss);

  const Matrix& value(Var v) const;
  const Matrix& grad(Var v) const;
  // Per-node cache exposed for inspection (attention probabilities, ...).
  const Matrix& aux(Var v) const;
  OpKind kind(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind{};
    std::vector<std::size_t> in;
    Matrix value;
    Matrix aux;
    Matrix aux2;
    Param* param = nullptr;
    std::string name;
    bool bound = false;
    float f0 = 0.0f;
    std::size_t i0 = 0, i1 = 0;
    std::vector<std::size_t> indices;
    std::optional<QuantSource> quant;
    std::vector<float> scales;  // fake-quant scales used in the last forward
  };

  Var push(Node n);
  const Matrix& val(std::size_t id) const;
  Node& node(Var v);
  void eval(Node& n);
  void propagate(std::size_t id, const Matrix& g, std::vector<Matrix>& grads);

  std::vector<Node> nodes_;
  std::vector<Matrix> grads_;
  std::vector<char> needs_;
};

// Classical momentum: v = mu*v + g; w -= lr*v. Masked positions keep zero
// gradient, velocity and value. Throws Training on a non-finite gradient.
void sgd_step(std::span<Param* const> params, float lr, float momentum);

// Adam with bias correction and optional decoupled weight decay. Moments are
// held here, one pair per parameter position in the span, so the same span
// must be passed on every step. Masked positions behave as in sgd_step.
class Adam {
 public:
  explicit Adam(float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f, float weight_decay = 0.0f);
  void step(std::span<Param* const> params, float lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  float beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
  std::vector<Matrix> m_, v_;
};

// GELU, tanh approximation with constants sqrt(2/pi) = 0.7978845608 and 0.044715.
float gelu_value(float x) noexcept;

}  // namespace sparseq
