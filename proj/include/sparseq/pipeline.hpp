#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "sparseq/data_io.hpp"
#include "sparseq/distillation.hpp"
#include "sparseq/sparse_format.hpp"
#include "sparseq/vit_model.hpp"

namespace sparseq {

// Installs the stderr logger; SPARSEQ_LOG (trace, debug, info, warn, error,
// off) overrides `fallback_level`.
void init_logging(std::string_view fallback_level);

enum class Mode { Supervised, Unsupervised };
const char* to_string(Mode m);

enum class Optimizer { Adam, Sgd };
const char* to_string(Optimizer o);

struct PipelineConfig {
  LossWeights weights;
  float temperature = 2.0f;
  ElementFormat fmt = ElementFormat::INT8;  // INT8 or INT4
  std::size_t dense_epochs = 30;
  std::size_t prune_epochs = 20;
  std::size_t qat_epochs = 10;
  Optimizer optimizer = Optimizer::Adam;
  float dense_lr = 1e-3f;
  float prune_lr = 2e-4f;
  float qat_lr = 1e-4f;
  float momentum = 0.9f;  // SGD only
  float weight_decay = 0.0f;  // Adam only, decoupled
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  Mode mode = Mode::Supervised;
  HardLabelSource hard_label = HardLabelSource::TeacherArgmax;
  // Stage taps (block indices) used for feature mimicry; empty means the last two.
  std::vector<std::size_t> feature_stages;
  bool use_weight_factor = true;
  WeightFactorFn factor_fn = WeightFactorFn::SoftmaxNegLoss;
  std::size_t calibration_batches = 8;

  void validate() const;
  SparsityPattern pattern() const { return pattern_for(fmt); }
  int bits() const { return element_bits(fmt); }
  std::vector<std::size_t> selected_stages(const ViTConfig& model) const;
};

// Constant rate with one 10x decay once 75% of the epochs are done.
float scheduled_lr(float base, std::size_t epoch, std::size_t epochs);

struct EpochMetrics {
  std::string phase;
  std::size_t epoch = 0;
  double l_hard = 0.0, l_soft = 0.0, l_feature = 0.0, combined = 0.0;
  double top1 = 0.0;
  double gate_hits = 0.0;
};

struct MetricsLog {
  std::vector<EpochMetrics> records;
  std::string to_jsonl() const;
  static MetricsLog from_jsonl(std::string_view text);
};

struct EvalResult {
  double top1 = 0.0;  // percent
  double top5 = 0.0;
};
// Quantized models are evaluated through their fake-quant path.
EvalResult evaluate(ViTModel& model, const Dataset& data, std::size_t batch_size = 128);
// Top-k accuracy (percent) of precomputed logits.
EvalResult topk_accuracy(const Matrix& logits, std::span<const std::size_t> labels);

// Trains `model` in place on ground-truth labels.
void train_dense(ViTModel& model, const TrainingSet& train, const Dataset& test, const PipelineConfig& cfg, MetricsLog& log);

struct PruneResult {
  ViTModel sparse;
  std::vector<std::size_t> stage_ids;     // selected stage taps
  std::vector<double> stage_losses;       // final-epoch mean feature loss per selected stage
};
PruneResult prune_workflow(const ViTModel& dense, const TrainingSet& train, const Dataset& test, const PipelineConfig& cfg,
                           MetricsLog& log);

ViTModel qat_workflow(const ViTModel& sparse, std::span<const double> stage_losses, const TrainingSet& train,
                      const Dataset& test, const PipelineConfig& cfg, MetricsLog& log);

// Packs every sparsifiable weight of a finished quantized model.
std::vector<std::pair<std::string, PackedSparseMatrix>> pack_model(ViTModel& quantized);

struct ReportRow {
  std::string model;
  double params_m = 0.0;
  double flops_g = 0.0;
  double params_ratio = 1.0;
  double flops_ratio = 1.0;
  double top1 = -1.0;  // negative when unknown
};
struct LayerStorageRow {
  std::string layer;
  std::size_t rows = 0, cols = 0;
  std::uint64_t dense_bits = 0, packed_bits = 0;
  double saving = 0.0;  // fraction of dense storage saved by the packed layout
};
struct CompressionReport {
  std::vector<ReportRow> rows;
  std::vector<LayerStorageRow> layers;
  std::string text() const;
  std::string tsv() const;
};
struct Accuracies {
  double dense = -1.0, sparse = -1.0, int8 = -1.0, int4 = -1.0;
};
CompressionReport compression_report(const ViTConfig& config, const Accuracies& acc, ElementFormat layer_fmt);

}  // namespace sparseq
