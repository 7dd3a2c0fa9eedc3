#include "sparseq/pipeline.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace sparseq {

void init_logging(std::string_view fallback_level) {
  auto logger = spdlog::get("sparseq");
  if (!logger) logger = spdlog::stderr_color_mt("sparseq");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("SPARSEQ_LOG");
  spdlog::set_level(spdlog::level::from_str(env && *env ? env : std::string(fallback_level)));
}

const char* to_string(Mode m) { return m == Mode::Supervised ? "supervised" : "unsupervised"; }
const char* to_string(Optimizer o) { return o == Optimizer::Adam ? "adam" : "sgd"; }

void PipelineConfig::validate() const {
  weights.validate();
  if (!(temperature > 0.0f)) fail(ErrorKind::Config, "temperature must be positive");
  if (fmt != ElementFormat::INT8 && fmt != ElementFormat::INT4) fail(ErrorKind::Config, "target format must be int8 or int4");
  if (batch_size == 0) fail(ErrorKind::Config, "batch size must be positive");
  for (float lr : {dense_lr, prune_lr, qat_lr}) {
    if (!(lr >= 0.0f) || !std::isfinite(lr)) fail(ErrorKind::Config, "learning rates must be finite and non-negative");
  }
  if (!(momentum >= 0.0f && momentum < 1.0f)) fail(ErrorKind::Config, "momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0f) || !std::isfinite(weight_decay)) fail(ErrorKind::Config, "weight decay must be finite and non-negative");
  if (mode == Mode::Unsupervised && hard_label == HardLabelSource::GroundTruth) {
    fail(ErrorKind::Config, "unsupervised mode cannot use ground-truth hard labels");
  }
}

std::vector<std::size_t> PipelineConfig::selected_stages(const ViTConfig& model) const {
  if (feature_stages.empty()) {
    const auto& s = model.stages;
    return {s.end() - static_cast<long>(std::min<std::size_t>(2, s.size())), s.end()};
  }
  for (auto s : feature_stages) {
    if (std::find(model.stages.begin(), model.stages.end(), s) == model.stages.end()) {
      fail(ErrorKind::Config, "feature stage " + std::to_string(s) + " is not a stage tap of the model");
    }
  }
  return feature_stages;
}

float scheduled_lr(float base, std::size_t epoch, std::size_t epochs) {
  return 4 * epoch >= 3 * epochs ? base * 0.1f : base;
}

std::string MetricsLog::to_jsonl() const {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["phase"] = r.phase;
    j["epoch"] = r.epoch;
    j["l_hard"] = r.l_hard;
    j["l_soft"] = r.l_soft;
    j["l_feature"] = r.l_feature;
    j["combined"] = r.combined;
    j["top1"] = r.top1;
    j["gate_hits"] = r.gate_hits;
    out += j.dump();
    out += '\n';
  }
  return out;
}

MetricsLog MetricsLog::from_jsonl(std::string_view text) {
  MetricsLog log;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EpochMetrics m;
      m.phase = j.at("phase").get<std::string>();
      m.epoch = j.at("epoch").get<std::size_t>();
      m.l_hard = j.at("l_hard").get<double>();
      m.l_soft = j.at("l_soft").get<double>();
      m.l_feature = j.at("l_feature").get<double>();
      m.combined = j.at("combined").get<double>();
      m.top1 = j.at("top1").get<double>();
      m.gate_hits = j.at("gate_hits").get<double>();
      log.records.push_back(std::move(m));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Format, "metrics log line " + std::to_string(n) + ": " + e.what());
    }
  }
  return log;
}

EvalResult topk_accuracy(const Matrix& logits, std::span<const std::size_t> labels) {
  if (labels.size() != logits.rows()) fail(ErrorKind::Shape, "label count does not match logits");
  if (labels.empty()) return {};
  std::size_t top1 = 0, top5 = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    const float target = row[labels[r]];
    // Rank = number of classes scoring strictly higher, ties resolved toward the lower index.
    std::size_t rank = 0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (row[c] > target || (row[c] == target && c < labels[r])) ++rank;
    }
    top1 += rank == 0;
    top5 += rank < 5;
  }
  const double n = static_cast<double>(labels.size());
  return {100.0 * static_cast<double>(top1) / n, 100.0 * static_cast<double>(top5) / n};
}

EvalResult evaluate(ViTModel& model, const Dataset& data, std::size_t batch_size) {
  if (!data.has_labels()) fail(ErrorKind::Config, "evaluation needs a labeled split");
  const std::size_t n = data.size();
  if (n == 0) return {};
  Matrix logits(n, model.config.classes);
  const bool was_training = model.training;
  model.training = false;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto out = forward(model, gather(data.images(), idx), ForwardOptions{model.quant_bits > 0});
    std::copy(out.logits.data().begin(), out.logits.data().end(), logits.row(start).data());
  }
  model.training = was_training;
  return topk_accuracy(logits, data.labels);
}

namespace {

// Epoch order; every phase and epoch gets its own stream.
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t phase, std::size_t epoch, std::size_t n) {
  Rng rng = Rng(seed).fork(phase * 1000003ULL + epoch);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::vector<std::vector<std::size_t>> batches_of(const std::vector<std::size_t>& order, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < order.size(); s += batch) {
    out.emplace_back(order.begin() + static_cast<long>(s), order.begin() + static_cast<long>(std::min(order.size(), s + batch)));
  }
  return out;
}

void check_finite(double v, const char* phase, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(v)) {
    fail(ErrorKind::Training, std::string(phase) + " diverged at epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(batch) + ": loss is " + std::to_string(v));
  }
}

std::vector<std::size_t> batch_labels(const TrainingSet& data, std::span<const std::size_t> idx) {
  std::vector<std::size_t> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = data.label(idx[i]);
  return out;
}

// Positions within ForwardGraph::stages of the selected stage ids.
std::vector<std::size_t> stage_positions(const ViTConfig& cfg, const std::vector<std::size_t>& selected) {
  std::vector<std::size_t> pos;
  for (auto s : selected) pos.push_back(static_cast<std::size_t>(std::find(cfg.stages.begin(), cfg.stages.end(), s) - cfg.stages.begin()));
  return pos;
}

std::vector<Param*> trainable(ViTModel& m) { return m.params(); }

// Optimizer state for one workflow run.
class Stepper {
 public:
  explicit Stepper(const PipelineConfig& cfg) : kind_(cfg.optimizer), momentum_(cfg.momentum), adam_(0.9f, 0.999f, 1e-8f, cfg.weight_decay) {}
  void step(std::span<Param* const> params, float lr) {
    if (kind_ == Optimizer::Adam) {
      adam_.step(params, lr);
    } else {
      sgd_step(params, lr, momentum_);
    }
  }

 private:
  Optimizer kind_;
  float momentum_;
  Adam adam_;
};

// Frozen teacher: forward only, one graph per batch size.
class Teacher {
 public:
  Teacher(ViTModel& model, std::vector<std::size_t> positions) : model_(model), positions_(std::move(positions)) {}

  void run(const Tensor4& images) {
    auto& slot = graphs_[images.n];
    if (!slot) {
      slot = std::make_unique<Slot>();
      slot->fwd = build_forward(slot->g, model_, images.n, ForwardOptions{model_.quant_bits > 0});
    }
    slot->g.bind(slot->fwd.input, im2col(images, model_.config.patch));
    slot->g.forward();
    current_ = slot.get();
  }
  const Matrix& logits() const { return current_->g.value(current_->fwd.logits); }
  const Matrix& stage(std::size_t i) const { return current_->g.value(current_->fwd.stages[positions_[i]]); }

 private:
  struct Slot {
    Graph g;
    ForwardGraph fwd;
  };
  ViTModel& model_;
  std::vector<std::size_t> positions_;
  std::map<std::size_t, std::unique_ptr<Slot>> graphs_;
  Slot* current_ = nullptr;
};

// Student graph with the combined distillation loss, one per batch size.
class Student {
 public:
  Student(ViTModel& model, std::vector<std::size_t> positions, std::vector<double> factors, const PipelineConfig& cfg)
      : model_(model), positions_(std::move(positions)), factors_(std::move(factors)), cfg_(cfg) {}

  struct Slot {
    Graph g;
    ForwardGraph fwd;
    Var teacher_logits, hard_target;
    std::vector<Var> teacher_stages;
    DistillGraph loss;
  };

  Slot& slot(std::size_t batch) {
    auto& s = graphs_[batch];
    if (!s) {
      s = std::make_unique<Slot>();
      s->fwd = build_forward(s->g, model_, batch, ForwardOptions{model_.quant_bits > 0});
      DistillInputs in;
      in.student_logits = s->fwd.logits;
      s->teacher_logits = s->g.placeholder("teacher_logits");
      s->hard_target = s->g.placeholder("hard_target");
      in.teacher_logits = s->teacher_logits;
      in.hard_target = s->hard_target;
      for (std::size_t i = 0; i < positions_.size(); ++i) {
        in.student_stages.push_back(s->fwd.stages[positions_[i]]);
        s->teacher_stages.push_back(s->g.placeholder("teacher_stage"));
      }
      in.teacher_stages = s->teacher_stages;
      in.stage_factors = factors_;
      s->loss = build_distill_loss(s->g, in, cfg_.weights, cfg_.temperature);
    }
    return *s;
  }

 private:
  ViTModel& model_;
  std::vector<std::size_t> positions_;
  std::vector<double> factors_;
  const PipelineConfig& cfg_;
  std::map<std::size_t, std::unique_ptr<Slot>> graphs_;
};

struct DistillEpoch {
  EpochMetrics metrics;
  std::vector<double> stage_losses;
};

// One epoch of distillation training of `student` against `teacher`.
DistillEpoch distill_epoch(const char* phase, std::uint64_t phase_id, std::size_t epoch, std::size_t epochs, float base_lr,
                           ViTModel& student_model, Student& student, Teacher& teacher, std::size_t n_stages,
                           const TrainingSet& train, const PipelineConfig& cfg, Stepper& opt) {
  const float lr = scheduled_lr(base_lr, epoch, epochs);
  auto params = trainable(student_model);
  DistillEpoch out;
  out.stage_losses.assign(n_stages, 0.0);
  double seen = 0.0;
  const auto batches = batches_of(epoch_order(cfg.seed, phase_id, epoch, train.size()), cfg.batch_size);
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const auto& idx = batches[b];
    const Tensor4 images = gather(train.images(), idx);
    teacher.run(images);
    auto& s = student.slot(idx.size());
    const std::vector<std::size_t> targets =
        cfg.hard_label == HardLabelSource::GroundTruth ? batch_labels(train, idx) : argmax_rows(teacher.logits());
    s.g.bind(s.fwd.input, im2col(images, student_model.config.patch));
    s.g.bind(s.teacher_logits, teacher.logits());
    s.g.bind(s.hard_target, one_hot(targets, student_model.config.classes));
    for (std::size_t i = 0; i < n_stages; ++i) s.g.bind(s.teacher_stages[i], teacher.stage(i));
    for (Param* p : params) p->zero_grad();
    s.g.forward();
    const double combined = s.g.value(s.loss.combined)(0, 0);
    check_finite(combined, phase, epoch, b);
    s.g.backward(s.loss.combined);
    opt.step(params, lr);

    const double w = static_cast<double>(idx.size());
    seen += w;
    out.metrics.l_hard += w * s.g.value(s.loss.hard)(0, 0);
    out.metrics.l_soft += w * s.g.value(s.loss.soft)(0, 0);
    out.metrics.l_feature += w * s.g.value(s.loss.feature)(0, 0);
    out.metrics.combined += w * combined;
    const Matrix& gate = s.g.value(s.loss.gate);
    out.metrics.gate_hits += std::accumulate(gate.data().begin(), gate.data().end(), 0.0);
    for (std::size_t i = 0; i < n_stages; ++i) out.stage_losses[i] += w * s.g.value(s.loss.per_stage[i])(0, 0);
  }
  if (seen > 0) {
    for (double* v : {&out.metrics.l_hard, &out.metrics.l_soft, &out.metrics.l_feature, &out.metrics.combined,
                      &out.metrics.gate_hits}) {
      *v /= seen;
    }
    for (auto& v : out.stage_losses) v /= seen;
  }
  out.metrics.phase = phase;
  out.metrics.epoch = epoch;
  return out;
}

void log_epoch(const EpochMetrics& m) {
  spdlog::info("{} epoch {}: combined {:.5f} hard {:.5f} soft {:.5f} feature {:.5f} gate {:.3f} top1 {:.2f}", m.phase, m.epoch,
               m.combined, m.l_hard, m.l_soft, m.l_feature, m.gate_hits, m.top1);
}

}  // namespace

void train_dense(ViTModel& model, const TrainingSet& train, const Dataset& test, const PipelineConfig& cfg, MetricsLog& log) {
  cfg.validate();
  if (!train.has_labels()) fail(ErrorKind::Config, "dense training needs a labeled training split");
  auto params = trainable(model);
  struct Slot {
    Graph g;
    ForwardGraph fwd;
    Var target, loss;
  };
  std::map<std::size_t, std::unique_ptr<Slot>> graphs;
  Stepper opt(cfg);
  for (std::size_t epoch = 0; epoch < cfg.dense_epochs; ++epoch) {
    const float lr = scheduled_lr(cfg.dense_lr, epoch, cfg.dense_epochs);
    EpochMetrics m;
    m.phase = "dense";
    m.epoch = epoch;
    double seen = 0.0;
    const auto batches = batches_of(epoch_order(cfg.seed, 1, epoch, train.size()), cfg.batch_size);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& idx = batches[b];
      auto& s = graphs[idx.size()];
      if (!s) {
        s = std::make_unique<Slot>();
        s->fwd = build_forward(s->g, model, idx.size());
        s->target = s->g.placeholder("labels");
        s->loss = s->g.cross_entropy(s->fwd.logits, s->target);
      }
      s->g.bind(s->fwd.input, im2col(gather(train.images(), idx), model.config.patch));
      s->g.bind(s->target, one_hot(batch_labels(train, idx), model.config.classes));
      for (Param* p : params) p->zero_grad();
      s->g.forward();
      const double loss = s->g.value(s->loss)(0, 0);
      check_finite(loss, "dense", epoch, b);
      s->g.backward(s->loss);
      opt.step(params, lr);
      m.l_hard += loss * static_cast<double>(idx.size());
      seen += static_cast<double>(idx.size());
    }
    if (seen > 0) m.l_hard /= seen;
    m.combined = m.l_hard;
    m.top1 = evaluate(model, test).top1;
    log_epoch(m);
    log.records.push_back(m);
  }
}

PruneResult prune_workflow(const ViTModel& dense, const TrainingSet& train, const Dataset& test, const PipelineConfig& cfg,
                           MetricsLog& log) {
  cfg.validate();
  if (dense.quant_bits != 0) fail(ErrorKind::Config, "pruning expects a floating-point model");
  PruneResult r;
  r.sparse = dense;
  ViTModel teacher_model = dense;
  for (auto& l : r.sparse.sparsifiable_layers()) {
    const SparsityMask mask = select_mask(l.weight->value, cfg.pattern());
    l.weight->value = apply_mask(l.weight->value, mask);
    l.weight->mask = mask;
    l.weight->velocity = Matrix();
  }
  r.stage_ids = cfg.selected_stages(dense.config);
  const auto positions = stage_positions(dense.config, r.stage_ids);
  const std::vector<double> uniform(r.stage_ids.size(), 1.0 / static_cast<double>(r.stage_ids.size()));
  Teacher teacher(teacher_model, positions);
  Student student(r.sparse, positions, uniform, cfg);
  spdlog::info("prune: pattern {}, stages {}", cfg.pattern() == SparsityPattern::TwoOfFour ? "2:4" : "4:8 paired",
               r.stage_ids.size());
  Stepper opt(cfg);
  for (std::size_t epoch = 0; epoch < cfg.prune_epochs; ++epoch) {
    auto e = distill_epoch("prune", 2, epoch, cfg.prune_epochs, cfg.prune_lr, r.sparse, student, teacher, positions.size(), train, cfg,
                           opt);
    e.metrics.top1 = evaluate(r.sparse, test).top1;
    log_epoch(e.metrics);
    log.records.push_back(e.metrics);
    r.stage_losses = std::move(e.stage_losses);
  }
  if (r.stage_losses.empty()) r.stage_losses.assign(r.stage_ids.size(), 0.0);
  for (Param* p : r.sparse.params()) p->velocity = Matrix();
  return r;
}

ViTModel qat_workflow(const ViTModel& sparse, std::span<const double> stage_losses, const TrainingSet& train,
                      const Dataset& test, const PipelineConfig& cfg, MetricsLog& log) {
  cfg.validate();
  if (sparse.quant_bits != 0) fail(ErrorKind::Config, "QAT expects a floating-point sparse model");
  ViTModel teacher_model = sparse;
  ViTModel student = sparse;
  for (auto& l : student.sparsifiable_layers()) {
    if (!l.weight->mask) fail(ErrorKind::Config, "QAT input layer '" + l.name + "' carries no sparsity mask");
    if (l.weight->mask->pattern != cfg.pattern()) {
      // INT4 packs 4:8 paired groups; re-select within the current support.
      const SparsityMask mask = select_mask(l.weight->value, cfg.pattern());
      l.weight->value = apply_mask(l.weight->value, mask);
      l.weight->mask = mask;
    }
  }
  const auto stage_ids = cfg.selected_stages(sparse.config);
  if (stage_losses.size() != stage_ids.size()) {
    fail(ErrorKind::Config, "expected " + std::to_string(stage_ids.size()) + " stage losses from pruning, got " +
                                std::to_string(stage_losses.size()));
  }
  const std::vector<double> factors = cfg.use_weight_factor
                                          ? qat_weight_factors(stage_losses, cfg.factor_fn)
                                          : std::vector<double>(stage_ids.size(), 1.0 / static_cast<double>(stage_ids.size()));
  std::string fs;
  for (double f : factors) fs += std::to_string(f) + " ";
  spdlog::info("qat: int{} stage factors {}", cfg.bits(), fs);

  // Activation calibration: amax over the first batches, float path.
  student.enable_quantization(cfg.bits());
  {
    const auto layers = student.sparsifiable_layers();
    std::vector<float> amax(layers.size(), 0.0f);
    const auto batches = batches_of(epoch_order(cfg.seed, 3, 0, train.size()), cfg.batch_size);
    std::map<std::size_t, std::pair<std::unique_ptr<Graph>, ForwardGraph>> graphs;
    for (std::size_t b = 0; b < std::min(cfg.calibration_batches, batches.size()); ++b) {
      auto& [g, fwd] = graphs[batches[b].size()];
      if (!g) {
        g = std::make_unique<Graph>();
        fwd = build_forward(*g, student, batches[b].size(), ForwardOptions{false});
      }
      g->bind(fwd.input, im2col(gather(train.images(), batches[b]), student.config.patch));
      g->forward();
      for (std::size_t i = 0; i < layers.size(); ++i) amax[i] = std::max(amax[i], max_abs(g->value(fwd.layer_inputs[i]).data()));
    }
    for (std::size_t i = 0; i < layers.size(); ++i) student.act_scales[i].set_amax(amax[i]);
  }

  const auto positions = stage_positions(sparse.config, stage_ids);
  Teacher teacher(teacher_model, positions);
  Student st(student, positions, factors, cfg);
  student.training = true;
  Stepper opt(cfg);
  for (std::size_t epoch = 0; epoch < cfg.qat_epochs; ++epoch) {
    auto e = distill_epoch("qat", 4, epoch, cfg.qat_epochs, cfg.qat_lr, student, st, teacher, positions.size(), train, cfg, opt);
    e.metrics.top1 = evaluate(student, test).top1;
    log_epoch(e.metrics);
    log.records.push_back(e.metrics);
  }
  student.training = false;

  // Freeze per-channel weight scales and snap weights onto their grids.
  auto layers = student.sparsifiable_layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Param& w = *layers[i].weight;
    const QuantParams q = calibrate(w.value, cfg.bits(), Granularity::PerChannel).params;
    w.value = fake_quant(w.value, q);
    student.weight_quant[i] = q;
  }
  for (Param* p : student.params()) p->velocity = Matrix();
  return student;
}

std::vector<std::pair<std::string, PackedSparseMatrix>> pack_model(ViTModel& quantized) {
  if (quantized.quant_bits == 0) fail(ErrorKind::Config, "packing needs a quantized model");
  const ElementFormat fmt = quantized.quant_bits == 4 ? ElementFormat::INT4 : ElementFormat::INT8;
  std::vector<std::pair<std::string, PackedSparseMatrix>> out;
  auto layers = quantized.sparsifiable_layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Param& w = *layers[i].weight;
    if (!w.mask || !quantized.weight_quant[i]) fail(ErrorKind::Config, "layer '" + layers[i].name + "' is not finalized");
    out.emplace_back(layers[i].name, pack(w.value, *w.mask, fmt, quantized.weight_quant[i]));
  }
  return out;
}

CompressionReport compression_report(const ViTConfig& config, const Accuracies& acc, ElementFormat layer_fmt) {
  CompressionReport rep;
  const auto dense = count_params_flops(config, Compression::DenseFp32);
  auto row = [&](const char* name, Compression c, double top1) {
    const auto r = count_params_flops(config, c);
    rep.rows.push_back({name, r.params_m_equiv, r.flops_g_equiv, dense.params_m_equiv / r.params_m_equiv,
                        dense.flops_g_equiv / r.flops_g_equiv, top1});
  };
  row("dense-fp32", Compression::DenseFp32, acc.dense);
  if (acc.sparse >= 0) rep.rows.push_back({"sparse-fp32", dense.params_m_equiv, dense.flops_g_equiv, 1.0, 1.0, acc.sparse});
  row("sparse-int8", Compression::SparseInt8, acc.int8);
  row("sparse-int4", Compression::SparseInt4, acc.int4);
  for (const auto& l : layer_costs(config)) {
    if (!l.sparsifiable) continue;
    const Ratio s = storage_saving(l.rows, l.cols, layer_fmt);
    rep.layers.push_back({l.name, l.rows, l.cols, storage_bits(l.rows, l.cols, layer_fmt, false),
                          storage_bits(l.rows, l.cols, layer_fmt, true), s.value()});
  }
  return rep;
}

namespace {
std::string fmt_top1(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.2f", v);
  return b;
}
}  // namespace

std::string CompressionReport::text() const {
  std::ostringstream o;
  char buf[256];
  o << "model          params(M)  ratio   FLOPs(G)  ratio    top1\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-13s %10.4f %6.2fx %10.5f %6.1fx %7s\n", r.model.c_str(), r.params_m, r.params_ratio,
                  r.flops_g, r.flops_ratio, r.top1 < 0 ? "-" : fmt_top1(r.top1).c_str());
    o << buf;
  }
  o << "FLOPs are effective FLOPs (modeled), counted as multiply-accumulates.\n\n";
  o << "layer              shape        dense bits  packed bits  saving\n";
  for (const auto& l : layers) {
    std::snprintf(buf, sizeof buf, "%-18s %4zux%-6zu %11llu %12llu  %6.2f%%\n", l.layer.c_str(), l.rows, l.cols,
                  static_cast<unsigned long long>(l.dense_bits), static_cast<unsigned long long>(l.packed_bits), 100.0 * l.saving);
    o << buf;
  }
  return o.str();
}

std::string CompressionReport::tsv() const {
  std::ostringstream o;
  char buf[256];
  o << "kind\tname\tparams_m\tparams_ratio\tflops_g\tflops_ratio\ttop1\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "model\t%s\t%.6f\t%.4f\t%.6f\t%.4f\t%s\n", r.model.c_str(), r.params_m, r.params_ratio, r.flops_g,
                  r.flops_ratio, r.top1 < 0 ? "-" : fmt_top1(r.top1).c_str());
    o << buf;
  }
  o << "kind\tname\trows\tcols\tdense_bits\tpacked_bits\tsaving\n";
  for (const auto& l : layers) {
    std::snprintf(buf, sizeof buf, "layer\t%s\t%zu\t%zu\t%llu\t%llu\t%.4f\n", l.layer.c_str(), l.rows, l.cols,
                  static_cast<unsigned long long>(l.dense_bits), static_cast<unsigned long long>(l.packed_bits), l.saving);
    o << buf;
  }
  return o.str();
}

}  // namespace sparseq
