#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sparseq/autodiff.hpp"
#include "sparseq/numerics.hpp"
#include "sparseq/quantizer.hpp"
#include "sparseq/sparse_format.hpp"
#include "sparseq/sparse_gemm.hpp"

namespace sparseq {

struct ViTConfig {
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t channels = 1;
  std::size_t patch = 4;
  std::size_t dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t classes = 10;
  // 1-based block indices whose outputs are stage feature taps.
  std::vector<std::size_t> stages{1, 2, 3, 4};

  std::size_t patches() const noexcept { return (image_h / patch) * (image_w / patch); }
  std::size_t tokens() const noexcept { return patches() + 1; }
  std::size_t patch_dim() const noexcept { return channels * patch * patch; }
  std::size_t hidden() const noexcept { return dim * mlp_ratio; }
  void validate() const;

  static ViTConfig desk();
  static ViTConfig deit_tiny();
  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

// Blocks {L/4, L/2, 3L/4, L}, deduplicated for shallow models.
std::vector<std::size_t> default_stages(std::size_t depth);

struct Block {
  Param ln1_g, ln1_b;
  Param wq, bq, wk, bk, wv, bv, wo, bo;
  Param ln2_g, ln2_b;
  Param fc1, b1, fc2, b2;
};

// A weight/bias pair that may be pruned and quantized.
struct LayerRef {
  std::string name;
  Param* weight;
  Param* bias;
};

struct ViTModel {
  ViTConfig config;
  Param patch_w, patch_b, cls, pos;
  std::vector<Block> blocks;
  Param norm_g, norm_b, head_w, head_b;

  // Quantization state. quant_bits == 0 is a float model. act_scales and
  // weight_quant are indexed like sparsifiable_layers().
  int quant_bits = 0;
  std::vector<EmaScale> act_scales;
  // Frozen per-channel weight scales; unset entries quantize dynamically.
  std::vector<std::optional<QuantParams>> weight_quant;
  // Read by activation quantizers: EMA scales only move while true.
  bool training = false;

  std::vector<LayerRef> sparsifiable_layers();
  // Every trainable tensor in a fixed order.
  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  std::size_t param_count() const;

  // Switches to fake-quant training at `bits`; activation scales start uncalibrated.
  void enable_quantization(int bits);
};

ViTModel build(const ViTConfig& config, Rng& rng);

struct ForwardOptions {
  bool quantize = false;  // honoured only when model.quant_bits > 0
};

// Graph handles for one forward pass.
struct ForwardGraph {
  Var input;                      // (N * patches) x patch_dim, from im2col()
  Var logits;                     // N x classes
  std::vector<Var> stages;        // (N * tokens) x dim per configured stage
  std::vector<Var> attention;     // one per block
  std::vector<Var> layer_inputs;  // GEMM input of each sparsifiable layer, before fake quant
  std::size_t batch = 0;
};

// Appends the forward pass of `model` to `g`. Parameters are referenced, so
// the model must outlive the graph and must not move.
ForwardGraph build_forward(Graph& g, ViTModel& model, std::size_t batch, const ForwardOptions& opt = {});

struct ForwardResult {
  Matrix logits;
  std::vector<Matrix> stages;
};
ForwardResult forward(ViTModel& model, const Tensor4& batch, const ForwardOptions& opt = {});

enum class Compression { DenseFp32, SparseInt8, SparseInt4 };
const char* to_string(Compression c);
ElementFormat format_for(Compression c);

struct LayerCost {
  std::string name;
  std::size_t rows = 0, cols = 0;  // weight shape; 0 x 0 for weightless GEMMs
  std::uint64_t macs = 0;
  bool sparsifiable = false;
};
// Per-image cost of every GEMM in the model plus the non-GEMM parameters.
std::vector<LayerCost> layer_costs(const ViTConfig& config);

struct CostReport {
  std::uint64_t params = 0;  // exact dense parameter count
  std::uint64_t macs = 0;    // dense multiply-accumulates per image
  double params_m_equiv = 0.0;
  // Reported FLOPs follow the multiply-accumulate convention (one MAC = one FLOP).
  double flops_g_equiv = 0.0;
};
// Effective speedup of a compressed GEMM: 2 (2:4) x (32 / bits) x 4.
double modeled_speedup(Compression c);
CostReport count_params_flops(const ViTConfig& config, Compression c);

}  // namespace sparseq
