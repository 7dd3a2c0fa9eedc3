#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "sparseq/autodiff.hpp"
#include "sparseq/numerics.hpp"

namespace sparseq {

struct LossWeights {
  float alpha = 1.0f;   // hard label
  float beta = 10.0f;   // soft logits
  float gamma = 5.0f;   // features
  void validate() const;
};

enum class HardLabelSource { TeacherArgmax, GroundTruth };

struct DistillReport {
  double l_hard = 0.0;
  double l_soft = 0.0;
  double l_feature = 0.0;
  std::map<std::size_t, double> per_stage;  // stage block index -> feature loss
  double combined = 0.0;
  double gate_hits = 0.0;  // fraction of samples whose teacher and student labels agree
};

std::vector<std::size_t> argmax_rows(const Matrix& logits);
Matrix one_hot(std::span<const std::size_t> labels, std::size_t classes);

// Mean cross-entropy of the student against teacher argmax targets.
double hard_label_loss(const Matrix& student_logits, const Matrix& teacher_logits);
// Mean cross-entropy of the student against ground-truth labels.
double hard_label_loss(const Matrix& student_logits, std::span<const std::size_t> labels);

// T^2 * KL(softmax(teacher / T) || softmax(student / T)), batch mean.
double soft_logits_loss(const Matrix& student_logits, const Matrix& teacher_logits, float temperature);

// Per-sample agreement of student and teacher argmax.
std::vector<bool> label_gate(const Matrix& student_logits, const Matrix& teacher_logits);

struct FeatureLoss {
  double total = 0.0;
  std::map<std::size_t, double> per_stage;
  double gate_hits = 0.0;
};
// Stage tensors hold `rows / samples` token rows per sample. `stage_ids` names
// each tensor (its block index); only ids in `select` contribute. Per-element
// MSE over gate-true samples; total is the mean over selected stages.
FeatureLoss feature_loss(const std::vector<Matrix>& student_stages, const std::vector<Matrix>& teacher_stages,
                         const std::vector<bool>& gate, std::span<const std::size_t> stage_ids,
                         std::span<const std::size_t> select);

double combine_prune_loss(const DistillReport& report, const LossWeights& w);

enum class WeightFactorFn { SoftmaxNegLoss, InverseLoss };
// Per-stage factors summing to 1, smaller for larger pruning-stage loss.
std::vector<double> qat_weight_factors(std::span<const double> stage_losses, WeightFactorFn fn = WeightFactorFn::SoftmaxNegLoss);
double weighted_feature_loss(std::span<const double> factors, std::span<const double> stage_losses);
double combine_calibrate_loss(double hard, double soft, double weighted_feature, const LossWeights& w);

// Graph form of the combined loss for one batch.
struct DistillGraph {
  Var hard, soft, feature, combined, gate;
  std::vector<Var> per_stage;  // one per selected stage
};
struct DistillInputs {
  Var student_logits;
  Var teacher_logits;
  Var hard_target;                  // one-hot rows
  std::vector<Var> student_stages;  // selected stages only
  std::vector<Var> teacher_stages;
  std::vector<double> stage_factors;  // same length as the stages; 1/S each for the pruning loss
};
DistillGraph build_distill_loss(Graph& g, const DistillInputs& in, const LossWeights& w, float temperature);

}  // namespace sparseq
