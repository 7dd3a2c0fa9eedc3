#pragma once

// Gradient-check fixtures: one small two-layer network per differentiable op.
// Layer one is always h = gelu(x W1^T + b1); layer two exercises the op under
// test and reduces to a scalar. Each case builds the FP32 graph and the
// matching double-precision reference loss.

#include <memory>
#include <string>
#include <vector>

#include "reference_ops.hpp"
#include "sparseq/autodiff.hpp"
#include "sparseq/sparsity_pattern.hpp"

namespace gradcheck {

using sparseq::Graph;
using sparseq::Matrix;
using sparseq::Param;
using sparseq::Var;

struct Result {
  std::string name;
  ref::GradCheck check;
};

class Fixture {
 public:
  explicit Fixture(std::uint64_t seed) : rng_(seed) {
    x_ = sparseq::random_matrix(rng_, 6, 8, sparseq::Normal{0.0, 1.0});
    add_param("W1", 8, 8, 0.4);
    add_param("b1", 1, 8, 0.1);
  }

  Param& add_param(const std::string& name, std::size_t r, std::size_t c, double sigma) {
    params_.push_back(std::make_unique<Param>(name, sparseq::random_matrix(rng_, r, c, sparseq::Normal{0.0, sigma})));
    return *params_.back();
  }
  Matrix random(std::size_t r, std::size_t c, double sigma = 1.0) {
    return sparseq::random_matrix(rng_, r, c, sparseq::Normal{0.0, sigma});
  }
  Matrix one_hot(std::size_t rows, std::size_t classes) {
    Matrix t(rows, classes);
    for (std::size_t i = 0; i < rows; ++i) t(i, rng_.below(classes)) = 1.0f;
    return t;
  }

  // Layer one in the graph.
  Var layer1(Graph& g) {
    const Var x = g.constant(x_);
    return g.gelu(g.add_bias(g.linear(x, g.parameter(*params_[0])), g.parameter(*params_[1])));
  }
  // Layer one in the reference (p[0] = W1, p[1] = b1).
  ref::M ref_layer1(const std::vector<ref::M>& p) const { return ref::gelu(ref::add_bias(ref::linear(ref::M(x_), p[0]), p[1])); }

  Result run(const std::string& name, Graph& g, Var loss, const std::function<double(const std::vector<ref::M>&)>& ref_loss) {
    std::vector<Param*> ps;
    for (auto& p : params_) {
      p->zero_grad();
      ps.push_back(p.get());
    }
    g.forward();
    g.backward(loss);
    return {name, ref::check_gradients(ps, ref_loss)};
  }

  std::vector<std::unique_ptr<Param>>& params() { return params_; }

 private:
  sparseq::Rng rng_;
  Matrix x_;
  std::vector<std::unique_ptr<Param>> params_;
};

inline std::vector<Result> run_all(std::uint64_t seed = 2024) {
  std::vector<Result> out;

  {  // matmul + cross_entropy
    Fixture f(seed);
    auto& w2 = f.add_param("W2", 8, 5, 0.5);
    const Matrix t = f.one_hot(6, 5);
    Graph g;
    const Var loss = g.cross_entropy(g.matmul(f.layer1(g), g.parameter(w2)), g.constant(t));
    out.push_back(f.run("matmul/cross_entropy", g, loss, [&](const std::vector<ref::M>& p) {
      return ref::cross_entropy(ref::matmul(f.ref_layer1(p), p[2]), ref::M(t));
    }));
  }
  {  // linear + add_bias + gelu + scale + mean + mul
    Fixture f(seed + 1);
    auto& w2 = f.add_param("W2", 4, 8, 0.5);
    const Matrix c = f.random(6, 4);
    Graph g;
    const Var y = g.scale(g.linear(f.layer1(g), g.parameter(w2)), 0.7f);
    const Var loss = g.mean(g.mul(y, g.constant(c)));
    out.push_back(f.run("linear/add_bias/gelu/scale/mul/mean", g, loss, [&](const std::vector<ref::M>& p) {
      return ref::mean(ref::mul(ref::scale(ref::linear(f.ref_layer1(p), p[2]), 0.7), ref::M(c)));
    }));
  }
  {  // add of two branches
    Fixture f(seed + 2);
    auto& w2 = f.add_param("W2", 8, 8, 0.5);
    const Matrix c = f.random(6, 8);
    Graph g;
    const Var h = f.layer1(g);
    const Var loss = g.mean(g.mul(g.add(h, g.linear(h, g.parameter(w2))), g.constant(c)));
    out.push_back(f.run("add", g, loss, [&](const std::vector<ref::M>& p) {
      const auto h = f.ref_layer1(p);
      return ref::mean(ref::mul(ref::add(h, ref::linear(h, p[2])), ref::M(c)));
    }));
  }
  for (int axis : {1, 0}) {  // softmax along both axes
    Fixture f(seed + 3 + static_cast<std::uint64_t>(axis));
    auto& w2 = f.add_param("W2", 5, 8, 0.8);
    const Matrix c = f.random(6, 5);
    Graph g;
    const Var loss = g.mean(g.mul(g.softmax(g.linear(f.layer1(g), g.parameter(w2)), axis), g.constant(c)));
    out.push_back(f.run("softmax(axis=" + std::to_string(axis) + ")", g, loss, [&, axis](const std::vector<ref::M>& p) {
      return ref::mean(ref::mul(ref::softmax(ref::linear(f.ref_layer1(p), p[2]), axis), ref::M(c)));
    }));
  }
  {  // layernorm
    Fixture f(seed + 5);
    auto& gamma = f.add_param("gamma", 1, 8, 1.0);
    auto& beta = f.add_param("beta", 1, 8, 0.3);
    const Matrix c = f.random(6, 8);
    Graph g;
    const Var loss = g.mean(g.mul(g.layernorm(f.layer1(g), g.parameter(gamma), g.parameter(beta)), g.constant(c)));
    out.push_back(f.run("layernorm", g, loss, [&](const std::vector<ref::M>& p) {
      return ref::mean(ref::mul(ref::layernorm(f.ref_layer1(p), p[2], p[3]), ref::M(c)));
    }));
  }
  {  // embed_lookup + reshape
    Fixture f(seed + 6);
    auto& w2 = f.add_param("W2", 3, 4, 0.5);
    const std::vector<std::size_t> idx{0, 2, 2, 5};
    const Matrix t = f.one_hot(8, 3);
    Graph g;
    const Var rows = g.embed_lookup(f.layer1(g), idx);  // 4 x 8
    const Var loss = g.cross_entropy(g.linear(g.reshape(rows, 8, 4), g.parameter(w2)), g.constant(t));
    out.push_back(f.run("embed_lookup/reshape", g, loss, [&](const std::vector<ref::M>& p) {
      return ref::cross_entropy(ref::linear(ref::reshape(ref::embed_lookup(f.ref_layer1(p), idx), 8, 4), p[2]), ref::M(t));
    }));
  }
  {  // kl_div, gradients into both student and teacher branches
    Fixture f(seed + 7);
    auto& ws = f.add_param("Ws", 5, 8, 0.8);
    auto& wt = f.add_param("Wt", 5, 8, 0.8);
    Graph g;
    const Var h = f.layer1(g);
    const Var loss = g.kl_div(g.linear(h, g.parameter(ws)), g.linear(h, g.parameter(wt)), 2.0f);
    out.push_back(f.run("kl_div", g, loss, [&](const std::vector<ref::M>& p) {
      const auto h = f.ref_layer1(p);
      return ref::kl_div(ref::linear(h, p[2]), ref::linear(h, p[3]), 2.0);
    }));
  }
  {  // gated mse, two rows per sample
    Fixture f(seed + 8);
    auto& target = f.add_param("target", 6, 8, 0.5);
    Graph g;
    Matrix gate(3, 1);
    gate(0, 0) = 1.0f;
    gate(2, 0) = 1.0f;
    const Var loss = g.mse(f.layer1(g), g.parameter(target), g.constant(gate));
    out.push_back(f.run("mse(gated)", g, loss, [&](const std::vector<ref::M>& p) { return ref::mse(f.ref_layer1(p), p[2], {1, 0, 1}); }));
  }
  {  // fake_quant (fixed per-tensor scale) with some values clipped
    Fixture f(seed + 9);
    const Matrix c = f.random(6, 8);
    const float scale = 0.6f / 7.0f;  // INT4, clip at 0.6
    Graph g;
    const Var fq = g.fake_quant(f.layer1(g), sparseq::FixedQuant{sparseq::QuantParams::per_tensor(4, scale)});
    const Var loss = g.mean(g.mul(fq, g.constant(c)));
    out.push_back(f.run("fake_quant(STE)", g, loss, [&](const std::vector<ref::M>& p) {
      return ref::mean(ref::mul(ref::ste_surrogate(f.ref_layer1(p), 7.0 * scale), ref::M(c)));
    }));
  }
  {  // mask_mul on a 2:4 weight
    Fixture f(seed + 10);
    auto& w2 = f.add_param("W2", 4, 8, 0.5);
    const auto mask = sparseq::select_mask_2of4(w2.value);
    const Matrix t = f.one_hot(6, 4);
    Graph g;
    const Var loss = g.cross_entropy(g.linear(f.layer1(g), g.mask_mul(g.parameter(w2), mask)), g.constant(t));
    const ref::M m01(mask.as_matrix());
    out.push_back(f.run("mask_mul", g, loss, [&](const std::vector<ref::M>& p) {
      return ref::cross_entropy(ref::linear(f.ref_layer1(p), ref::mul(p[2], m01)), ref::M(t));
    }));
  }
  {  // prepend_rows + add_tiled + attention
    Fixture f(seed + 11);
    auto& cls = f.add_param("cls", 1, 8, 0.5);
    auto& pos = f.add_param("pos", 4, 8, 0.5);
    auto& wq = f.add_param("Wq", 8, 8, 0.5);
    auto& wk = f.add_param("Wk", 8, 8, 0.5);
    auto& wv = f.add_param("Wv", 8, 8, 0.5);
    const Matrix c = f.random(8, 8);
    Graph g;
    const Var tok = g.add_tiled(g.prepend_rows(f.layer1(g), g.parameter(cls), 3), g.parameter(pos));  // 2 samples x 4 tokens
    const Var att = g.attention(g.linear(tok, g.parameter(wq)), g.linear(tok, g.parameter(wk)), g.linear(tok, g.parameter(wv)), 2, 4);
    const Var loss = g.mean(g.mul(att, g.constant(c)));
    out.push_back(f.run("prepend_rows/add_tiled/attention", g, loss, [&](const std::vector<ref::M>& p) {
      const auto t = ref::add_tiled(ref::prepend_rows(f.ref_layer1(p), p[2], 3), p[3]);
      return ref::mean(ref::mul(ref::attention(ref::linear(t, p[4]), ref::linear(t, p[5]), ref::linear(t, p[6]), 2, 4), ref::M(c)));
    }));
  }
  return out;
}

}  // namespace gradcheck
