#include "sparseq/distillation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace sparseq {

namespace {

std::vector<double> log_softmax(std::span<const float> z, double inv_t) {
  double mx = -INFINITY;
  for (float v : z) mx = std::max(mx, v * inv_t);
  double sum = 0.0;
  for (float v : z) sum += std::exp(v * inv_t - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] * inv_t - lse;
  return out;
}

void require_same(const Matrix& a, const Matrix& b, const char* what) {
  if (!a.same_shape(b)) {
    fail(ErrorKind::Shape, std::string(what) + ": " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                               std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

}  // namespace

void LossWeights::validate() const {
  if (!(alpha >= 0.0f && beta >= 0.0f && gamma >= 0.0f)) fail(ErrorKind::Config, "loss weights must be non-negative");
  if (alpha == 0.0f && beta == 0.0f && gamma == 0.0f) fail(ErrorKind::Config, "at least one loss weight must be positive");
}

std::vector<std::size_t> argmax_rows(const Matrix& logits) {
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

Matrix one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  Matrix m(labels.size(), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) fail(ErrorKind::Range, "label " + std::to_string(labels[i]) + " outside class range");
    m(i, labels[i]) = 1.0f;
  }
  return m;
}

double hard_label_loss(const Matrix& student_logits, std::span<const std::size_t> labels) {
  if (labels.size() != student_logits.rows()) fail(ErrorKind::Shape, "label count does not match batch");
  if (labels.empty()) return 0.0;
  double loss = 0.0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= student_logits.cols()) fail(ErrorKind::Shape, "label outside student class count");
    loss -= log_softmax(student_logits.row(r), 1.0)[labels[r]];
  }
  return loss / static_cast<double>(labels.size());
}

double hard_label_loss(const Matrix& student_logits, const Matrix& teacher_logits) {
  require_same(student_logits, teacher_logits, "hard label class counts differ");
  const auto t = argmax_rows(teacher_logits);
  return hard_label_loss(student_logits, t);
}

double soft_logits_loss(const Matrix& student_logits, const Matrix& teacher_logits, float temperature) {
  if (!(temperature > 0.0f)) fail(ErrorKind::Config, "temperature must be positive");
  require_same(student_logits, teacher_logits, "soft logits shapes differ");
  if (student_logits.rows() == 0) return 0.0;
  const double inv_t = 1.0 / temperature;
  double loss = 0.0;
  for (std::size_t r = 0; r < student_logits.rows(); ++r) {
    const auto ls = log_softmax(student_logits.row(r), inv_t);
    const auto lt = log_softmax(teacher_logits.row(r), inv_t);
    for (std::size_t c = 0; c < ls.size(); ++c) loss += std::exp(lt[c]) * (lt[c] - ls[c]);
  }
  const double t2 = static_cast<double>(temperature) * temperature;
  return std::max(0.0, t2 * loss / static_cast<double>(student_logits.rows()));
}

std::vector<bool> label_gate(const Matrix& student_logits, const Matrix& teacher_logits) {
  require_same(student_logits, teacher_logits, "label gate shapes differ");
  const auto s = argmax_rows(student_logits);
  const auto t = argmax_rows(teacher_logits);
  std::vector<bool> g(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) g[i] = s[i] == t[i];
  return g;
}

FeatureLoss feature_loss(const std::vector<Matrix>& student_stages, const std::vector<Matrix>& teacher_stages,
                         const std::vector<bool>& gate, std::span<const std::size_t> stage_ids,
                         std::span<const std::size_t> select) {
  if (student_stages.size() != teacher_stages.size() || student_stages.size() != stage_ids.size()) {
    fail(ErrorKind::Shape, "stage lists differ in length");
  }
  FeatureLoss out;
  const std::size_t samples = gate.size();
  const std::size_t hits = static_cast<std::size_t>(std::count(gate.begin(), gate.end(), true));
  out.gate_hits = samples ? static_cast<double>(hits) / static_cast<double>(samples) : 0.0;
  for (std::size_t i = 0; i < student_stages.size(); ++i) {
    const Matrix& s = student_stages[i];
    const Matrix& t = teacher_stages[i];
    require_same(s, t, "stage feature shapes differ");
    if (samples == 0 || s.rows() % samples != 0) fail(ErrorKind::Shape, "stage rows not divisible by gate length");
  }
  if (hits == 0) return out;

  for (std::size_t i = 0; i < student_stages.size(); ++i) {
    if (std::find(select.begin(), select.end(), stage_ids[i]) == select.end()) continue;
    const Matrix& s = student_stages[i];
    const Matrix& t = teacher_stages[i];
    const std::size_t per = s.rows() / samples;
    double sum = 0.0;
    for (std::size_t r = 0; r < s.rows(); ++r) {
      if (!gate[r / per]) continue;
      for (std::size_t c = 0; c < s.cols(); ++c) {
        const double d = static_cast<double>(s(r, c)) - t(r, c);
        sum += d * d;
      }
    }
    out.per_stage[stage_ids[i]] = sum / static_cast<double>(hits * per * s.cols());
  }
  if (!out.per_stage.empty()) {
    for (const auto& [id, l] : out.per_stage) out.total += l;
    out.total /= static_cast<double>(out.per_stage.size());
  }
  return out;
}

double combine_prune_loss(const DistillReport& r, const LossWeights& w) {
  return combine_calibrate_loss(r.l_hard, r.l_soft, r.l_feature, w);
}

std::vector<double> qat_weight_factors(std::span<const double> losses, WeightFactorFn fn) {
  if (losses.empty()) fail(ErrorKind::Config, "weight factors need at least one stage");
  for (double l : losses) {
    if (!(l >= 0.0) || !std::isfinite(l)) fail(ErrorKind::Range, "stage losses must be finite and non-negative");
  }
  std::vector<double> w(losses.size());
  if (fn == WeightFactorFn::SoftmaxNegLoss) {
    const double tau = std::max(std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size()), 1e-8);
    const double lo = *std::min_element(losses.begin(), losses.end());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(-(losses[i] - lo) / tau);
  } else {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 1.0 / (losses[i] + 1e-8);
  }
  const double sum = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& v : w) v /= sum;
  return w;
}

double weighted_feature_loss(std::span<const double> factors, std::span<const double> stage_losses) {
  if (factors.size() != stage_losses.size()) fail(ErrorKind::Shape, "factor and stage counts differ");
  double s = 0.0;
  for (std::size_t i = 0; i < factors.size(); ++i) s += factors[i] * stage_losses[i];
  return s;
}

double combine_calibrate_loss(double hard, double soft, double weighted_feature, const LossWeights& w) {
  return static_cast<double>(w.alpha) * hard + static_cast<double>(w.beta) * soft + static_cast<double>(w.gamma) * weighted_feature;
}

DistillGraph build_distill_loss(Graph& g, const DistillInputs& in, const LossWeights& w, float temperature) {
  w.validate();
  if (in.student_stages.size() != in.teacher_stages.size() || in.stage_factors.size() != in.student_stages.size()) {
    fail(ErrorKind::Config, "distillation stage lists differ in length");
  }
  DistillGraph d;
  d.hard = g.cross_entropy(in.student_logits, in.hard_target);
  d.soft = g.kl_div(in.student_logits, in.teacher_logits, temperature);
  d.gate = g.label_gate(in.student_logits, in.teacher_logits);
  Var feature{};
  for (std::size_t i = 0; i < in.student_stages.size(); ++i) {
    const Var l = g.mse(in.student_stages[i], in.teacher_stages[i], d.gate);
    d.per_stage.push_back(l);
    const Var term = g.scale(l, static_cast<float>(in.stage_factors[i]));
    feature = i == 0 ? term : g.add(feature, term);
  }
  d.feature = in.student_stages.empty() ? g.constant(Matrix(1, 1)) : feature;
  d.combined = g.add(g.add(g.scale(d.hard, w.alpha), g.scale(d.soft, w.beta)), g.scale(d.feature, w.gamma));
  return d;
}

}  // namespace sparseq
