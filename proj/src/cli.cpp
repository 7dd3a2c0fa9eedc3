#include "sparseq/cli.hpp"

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>

#include "json.hpp"
#include "sparseq/byteio.hpp"

namespace sparseq {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ElementFormat parse_fmt(const std::string& s) {
  if (s == "int8") return ElementFormat::INT8;
  if (s == "int4") return ElementFormat::INT4;
  fail(ErrorKind::Config, "fmt must be int8 or int4, got '" + s + "'");
}

// Shortest decimal form, so 0.05f prints as 0.05.
double tidy(float v) { return std::stod(fmt::format("{}", v)); }

std::string fmt_name(ElementFormat f) { return f == ElementFormat::INT4 ? "int4" : "int8"; }

Mode parse_mode(const std::string& s) {
  if (s == "supervised") return Mode::Supervised;
  if (s == "unsupervised") return Mode::Unsupervised;
  fail(ErrorKind::Config, "mode must be supervised or unsupervised, got '" + s + "'");
}

HardLabelSource parse_hard_label(const std::string& s) {
  if (s == "teacher") return HardLabelSource::TeacherArgmax;
  if (s == "ground-truth") return HardLabelSource::GroundTruth;
  fail(ErrorKind::Config, "hard_label must be teacher or ground-truth, got '" + s + "'");
}

WeightFactorFn parse_factor_fn(const std::string& s) {
  if (s == "softmax") return WeightFactorFn::SoftmaxNegLoss;
  if (s == "inverse") return WeightFactorFn::InverseLoss;
  fail(ErrorKind::Config, "factor_fn must be softmax or inverse, got '" + s + "'");
}

template <class T>
T get_as(const json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::Config, "config key '" + key + "' has the wrong type");
  }
}

void apply_model(ViTConfig& m, const json& j) {
  if (!j.is_object()) fail(ErrorKind::Config, "config key 'model' must be an object");
  bool stages_set = false;
  for (const auto& [k, v] : j.items()) {
    if (k == "image") m.image_h = m.image_w = get_as<std::size_t>(v, k);
    else if (k == "channels") m.channels = get_as<std::size_t>(v, k);
    else if (k == "patch") m.patch = get_as<std::size_t>(v, k);
    else if (k == "dim") m.dim = get_as<std::size_t>(v, k);
    else if (k == "depth") m.depth = get_as<std::size_t>(v, k);
    else if (k == "heads") m.heads = get_as<std::size_t>(v, k);
    else if (k == "mlp_ratio") m.mlp_ratio = get_as<std::size_t>(v, k);
    else if (k == "classes") m.classes = get_as<std::size_t>(v, k);
    else if (k == "stages") {
      m.stages = get_as<std::vector<std::size_t>>(v, k);
      stages_set = true;
    } else {
      fail(ErrorKind::Config, "unknown config key 'model." + k + "'");
    }
  }
  if (!stages_set) m.stages = default_stages(m.depth);
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& text) {
  const std::vector<std::uint8_t> bytes(text.begin(), text.end());
  write_file(p, bytes);
}

Dataset take_first(const Dataset& d, std::size_t n, const std::string& split) {
  if (n == 0 || n >= d.size()) {
    Dataset out = d;
    out.split = split;
    return out;
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Dataset out;
  out.images_ = gather(d.images(), idx);
  if (d.has_labels()) out.labels.assign(d.labels.begin(), d.labels.begin() + static_cast<long>(n));
  out.num_classes = d.num_classes;
  out.split = split;
  return out;
}

void require_artifact(const fs::path& p, std::string_view producer) {
  if (!fs::exists(p)) {
    fail(ErrorKind::Io, "missing artifact " + p.string() + " (run `sparseq " + std::string(producer) + "` first)");
  }
}

void save_metrics(const fs::path& p, const MetricsLog& log) { write_text(p, log.to_jsonl()); }

double final_top1(const fs::path& p) {
  if (!fs::exists(p)) return -1.0;
  const auto log = MetricsLog::from_jsonl(read_text(p));
  return log.records.empty() ? -1.0 : log.records.back().top1;
}

struct Flags {
  std::string config;
  std::uint64_t seed = 0;
  std::string fmt, mode, out;
  float alpha = 0, beta = 0, gamma = 0;
  bool no_weight_factor = false;
  std::size_t epochs = 0;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
  sub->add_option("--seed", f.seed, "Seed for initialization and shuffling");
  sub->add_option("--fmt", f.fmt, "Target format")->check(CLI::IsMember({"int8", "int4"}));
  sub->add_option("--alpha", f.alpha, "Hard-label loss weight");
  sub->add_option("--beta", f.beta, "Soft-logits loss weight");
  sub->add_option("--gamma", f.gamma, "Feature loss weight");
  sub->add_flag("--no-weight-factor", f.no_weight_factor, "Uniform QAT stage factors");
  sub->add_option("--mode", f.mode, "Label mode")->check(CLI::IsMember({"supervised", "unsupervised"}));
  sub->add_option("--epochs", f.epochs, "Epochs for this command's phase");
  sub->add_option("--out", f.out, "Artifact directory");
}

// defaults < file < flags
CliConfig resolve(const CLI::App* sub, const Flags& f, std::string_view phase) {
  CliConfig c;
  if (!f.config.empty()) c = parse_cli_config(read_text(f.config), c);
  auto given = [&](const char* name) { return sub->count(name) > 0; };
  if (given("--seed")) c.pipeline.seed = f.seed;
  if (given("--fmt")) c.pipeline.fmt = parse_fmt(f.fmt);
  if (given("--alpha")) c.pipeline.weights.alpha = f.alpha;
  if (given("--beta")) c.pipeline.weights.beta = f.beta;
  if (given("--gamma")) c.pipeline.weights.gamma = f.gamma;
  if (f.no_weight_factor) c.pipeline.use_weight_factor = false;
  if (given("--mode")) c.pipeline.mode = parse_mode(f.mode);
  if (given("--out")) c.out = f.out;
  if (given("--epochs")) {
    if (phase == "dense") c.pipeline.dense_epochs = f.epochs;
    else if (phase == "prune") c.pipeline.prune_epochs = f.epochs;
    else if (phase == "qat") c.pipeline.qat_epochs = f.epochs;
  }
  c.validate();
  return c;
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Format:
      return kExitFormat;
    case ErrorKind::Training:
      return kExitDivergence;
    default:
      return kExitUsage;
  }
}

}  // namespace

void CliConfig::validate() const {
  pipeline.validate();
  model.validate();
  (void)pipeline.selected_stages(model);
  if (data == "synthetic") {
    if (train_size == 0 || test_size == 0) fail(ErrorKind::Config, "synthetic data needs positive train_size and test_size");
  } else if (data == "idx") {
    for (const auto* p : {&train_images, &train_labels, &test_images, &test_labels}) {
      if (p->empty()) fail(ErrorKind::Config, "idx data needs train_images, train_labels, test_images and test_labels");
      if (!fs::is_regular_file(*p)) fail(ErrorKind::Io, "data file not found: " + p->string());
    }
  } else {
    fail(ErrorKind::Config, "data must be synthetic or idx, got '" + data + "'");
  }
  if (out.empty()) fail(ErrorKind::Config, "output directory is empty");
}

CliConfig parse_cli_config(std::string_view json_text, CliConfig c) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Config, std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::Config, "config must be a JSON object");
  auto& p = c.pipeline;
  for (const auto& [k, v] : j.items()) {
    if (k == "alpha") p.weights.alpha = get_as<float>(v, k);
    else if (k == "beta") p.weights.beta = get_as<float>(v, k);
    else if (k == "gamma") p.weights.gamma = get_as<float>(v, k);
    else if (k == "temperature") p.temperature = get_as<float>(v, k);
    else if (k == "fmt") p.fmt = parse_fmt(get_as<std::string>(v, k));
    else if (k == "dense_epochs") p.dense_epochs = get_as<std::size_t>(v, k);
    else if (k == "prune_epochs") p.prune_epochs = get_as<std::size_t>(v, k);
    else if (k == "qat_epochs") p.qat_epochs = get_as<std::size_t>(v, k);
    else if (k == "dense_lr") p.dense_lr = get_as<float>(v, k);
    else if (k == "prune_lr") p.prune_lr = get_as<float>(v, k);
    else if (k == "qat_lr") p.qat_lr = get_as<float>(v, k);
    else if (k == "momentum") p.momentum = get_as<float>(v, k);
    else if (k == "weight_decay") p.weight_decay = get_as<float>(v, k);
    else if (k == "optimizer") {
      const auto o = get_as<std::string>(v, k);
      if (o != "adam" && o != "sgd") fail(ErrorKind::Config, "optimizer must be adam or sgd, got '" + o + "'");
      p.optimizer = o == "adam" ? Optimizer::Adam : Optimizer::Sgd;
    }
    else if (k == "batch_size") p.batch_size = get_as<std::size_t>(v, k);
    else if (k == "seed") p.seed = get_as<std::uint64_t>(v, k);
    else if (k == "mode") p.mode = parse_mode(get_as<std::string>(v, k));
    else if (k == "hard_label") p.hard_label = parse_hard_label(get_as<std::string>(v, k));
    else if (k == "feature_stages") p.feature_stages = get_as<std::vector<std::size_t>>(v, k);
    else if (k == "weight_factor") p.use_weight_factor = get_as<bool>(v, k);
    else if (k == "factor_fn") p.factor_fn = parse_factor_fn(get_as<std::string>(v, k));
    else if (k == "calibration_batches") p.calibration_batches = get_as<std::size_t>(v, k);
    else if (k == "model") apply_model(c.model, v);
    else if (k == "data") c.data = get_as<std::string>(v, k);
    else if (k == "train_size") c.train_size = get_as<std::size_t>(v, k);
    else if (k == "test_size") c.test_size = get_as<std::size_t>(v, k);
    else if (k == "data_seed") c.data_seed = get_as<std::uint64_t>(v, k);
    else if (k == "train_images") c.train_images = get_as<std::string>(v, k);
    else if (k == "train_labels") c.train_labels = get_as<std::string>(v, k);
    else if (k == "test_images") c.test_images = get_as<std::string>(v, k);
    else if (k == "test_labels") c.test_labels = get_as<std::string>(v, k);
    else if (k == "out") c.out = get_as<std::string>(v, k);
    else fail(ErrorKind::Config, "unknown config key '" + k + "'");
  }
  return c;
}

std::string dump_cli_config(const CliConfig& c) {
  const auto& p = c.pipeline;
  nlohmann::ordered_json j;
  j["alpha"] = tidy(p.weights.alpha);
  j["beta"] = tidy(p.weights.beta);
  j["gamma"] = tidy(p.weights.gamma);
  j["temperature"] = tidy(p.temperature);
  j["fmt"] = fmt_name(p.fmt);
  j["dense_epochs"] = p.dense_epochs;
  j["prune_epochs"] = p.prune_epochs;
  j["qat_epochs"] = p.qat_epochs;
  j["optimizer"] = to_string(p.optimizer);
  j["dense_lr"] = tidy(p.dense_lr);
  j["prune_lr"] = tidy(p.prune_lr);
  j["qat_lr"] = tidy(p.qat_lr);
  j["momentum"] = tidy(p.momentum);
  j["weight_decay"] = tidy(p.weight_decay);
  j["batch_size"] = p.batch_size;
  j["seed"] = p.seed;
  j["mode"] = to_string(p.mode);
  j["hard_label"] = p.hard_label == HardLabelSource::GroundTruth ? "ground-truth" : "teacher";
  j["feature_stages"] = p.feature_stages;
  j["weight_factor"] = p.use_weight_factor;
  j["factor_fn"] = p.factor_fn == WeightFactorFn::InverseLoss ? "inverse" : "softmax";
  j["calibration_batches"] = p.calibration_batches;
  j["model"] = {{"image", c.model.image_h}, {"channels", c.model.channels}, {"patch", c.model.patch},
                {"dim", c.model.dim},       {"depth", c.model.depth},       {"heads", c.model.heads},
                {"mlp_ratio", c.model.mlp_ratio}, {"classes", c.model.classes}, {"stages", c.model.stages}};
  j["data"] = c.data;
  j["train_size"] = c.train_size;
  j["test_size"] = c.test_size;
  j["data_seed"] = c.data_seed;
  if (c.data == "idx") {
    j["train_images"] = c.train_images.string();
    j["train_labels"] = c.train_labels.string();
    j["test_images"] = c.test_images.string();
    j["test_labels"] = c.test_labels.string();
  }
  j["out"] = c.out.string();
  return j.dump();
}

Splits load_splits(const CliConfig& c) {
  Splits s;
  const std::size_t h = c.model.image_h, w = c.model.image_w;
  if (c.data == "synthetic") {
    Rng rng(c.data_seed);
    const Dataset all = synth_dataset(rng, c.model.classes, c.train_size + c.test_size, h, w);
    std::vector<std::size_t> a(c.train_size), b(c.test_size);
    std::iota(a.begin(), a.end(), 0);
    std::iota(b.begin(), b.end(), c.train_size);
    for (auto [d, idx, name] : {std::tuple{&s.train, &a, "train"}, std::tuple{&s.test, &b, "test"}}) {
      d->images_ = gather(all.images(), *idx);
      for (auto i : *idx) d->labels.push_back(all.labels[i]);
      d->num_classes = c.model.classes;
      d->split = name;
    }
    return s;
  }
  s.train = take_first(load_idx(c.train_images, c.train_labels, c.model.classes), c.train_size, "train");
  s.test = take_first(load_idx(c.test_images, c.test_labels, c.model.classes), c.test_size, "test");
  for (Dataset* d : {&s.train, &s.test}) {
    if (d->images().c != c.model.channels || d->images().h > h || d->images().w > w) {
      fail(ErrorKind::Config, "IDX images do not fit the model input");
    }
    if (d->images().h != h || d->images().w != w) d->images_ = pad_images(d->images(), h, w);
  }
  return s;
}

namespace artifact {
fs::path dense(const CliConfig& c) { return c.out / "dense.sqck"; }
fs::path sparse(const CliConfig& c) { return c.out / ("sparse-" + fmt_name(c.pipeline.fmt) + ".sqck"); }
fs::path stage_losses(const CliConfig& c) { return c.out / ("stage-losses-" + fmt_name(c.pipeline.fmt) + ".json"); }
fs::path quantized(const CliConfig& c) { return c.out / ("quant-" + fmt_name(c.pipeline.fmt) + ".sqck"); }
fs::path packed_dir(const CliConfig& c) { return c.out / ("packed-" + fmt_name(c.pipeline.fmt)); }
fs::path metrics(const CliConfig& c, std::string_view phase) {
  if (phase == "dense") return c.out / "metrics-dense.jsonl";
  return c.out / ("metrics-" + std::string(phase) + "-" + fmt_name(c.pipeline.fmt) + ".jsonl");
}
}  // namespace artifact

namespace {

void log_config(const CliConfig& c, std::ostream& err) { err << "effective config: " << dump_cli_config(c) << "\n"; }

int cmd_train_dense(const CliConfig& c, std::ostream& out) {
  const Splits s = load_splits(c);
  fs::create_directories(c.out);
  Rng rng(c.pipeline.seed);
  ViTModel m = build(c.model, rng);
  MetricsLog log;
  train_dense(m, s.train, s.test, c.pipeline, log);
  save_checkpoint(m, artifact::dense(c));
  save_metrics(artifact::metrics(c, "dense"), log);
  out << "dense top1 " << fmt::format("{:.2f}", log.records.empty() ? 0.0 : log.records.back().top1) << " -> "
      << artifact::dense(c).string() << "\n";
  return kExitOk;
}

int cmd_prune(const CliConfig& c, std::ostream& out) {
  require_artifact(artifact::dense(c), "train-dense");
  const ViTModel dense = load_checkpoint(artifact::dense(c));
  if (!(dense.config == c.model)) fail(ErrorKind::Config, "dense checkpoint was trained with a different model config");
  const Splits s = load_splits(c);
  MetricsLog log;
  const PruneResult r = prune_workflow(dense, s.train, s.test, c.pipeline, log);
  save_checkpoint(r.sparse, artifact::sparse(c));
  nlohmann::ordered_json j;
  j["stage_ids"] = r.stage_ids;
  j["stage_losses"] = r.stage_losses;
  write_text(artifact::stage_losses(c), j.dump() + "\n");
  save_metrics(artifact::metrics(c, "prune"), log);
  out << "sparse top1 " << fmt::format("{:.2f}", log.records.empty() ? 0.0 : log.records.back().top1) << " -> "
      << artifact::sparse(c).string() << "\n";
  return kExitOk;
}

int cmd_qat(const CliConfig& c, std::ostream& out) {
  require_artifact(artifact::sparse(c), "prune --fmt " + fmt_name(c.pipeline.fmt));
  require_artifact(artifact::stage_losses(c), "prune --fmt " + fmt_name(c.pipeline.fmt));
  const ViTModel sparse = load_checkpoint(artifact::sparse(c));
  std::vector<double> losses;
  std::vector<std::size_t> ids;
  try {
    const auto j = json::parse(read_text(artifact::stage_losses(c)));
    losses = j.at("stage_losses").get<std::vector<double>>();
    ids = j.at("stage_ids").get<std::vector<std::size_t>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Format, artifact::stage_losses(c).string() + ": " + e.what());
  }
  if (ids != c.pipeline.selected_stages(c.model)) fail(ErrorKind::Config, "prune ran with different feature stages");
  const Splits s = load_splits(c);
  MetricsLog log;
  ViTModel q = qat_workflow(sparse, losses, s.train, s.test, c.pipeline, log);
  save_checkpoint(q, artifact::quantized(c));
  const fs::path dir = artifact::packed_dir(c);
  fs::create_directories(dir);
  for (const auto& [name, p] : pack_model(q)) save_spqz(dir / (name + ".spqz"), p);
  save_metrics(artifact::metrics(c, "qat"), log);
  out << fmt_name(c.pipeline.fmt) << " top1 " << fmt::format("{:.2f}", log.records.empty() ? 0.0 : log.records.back().top1)
      << " -> " << artifact::quantized(c).string() << "\n";
  return kExitOk;
}

int cmd_eval(const CliConfig& c, const std::string& checkpoint, std::ostream& out) {
  const fs::path p = checkpoint.empty() ? artifact::dense(c) : fs::path(checkpoint);
  require_artifact(p, "train-dense");
  ViTModel m = load_checkpoint(p);
  CliConfig cc = c;
  cc.model = m.config;
  const Splits s = load_splits(cc);
  const EvalResult r = evaluate(m, s.test);
  out << fmt::format("{}: top1 {:.2f} top5 {:.2f} on {} samples\n", p.string(), r.top1, r.top5, s.test.size());
  return kExitOk;
}

int cmd_inspect(const std::string& file, std::ostream& out) {
  const PackedSparseMatrix p = load_spqz(file);
  out << "file      " << file << "\n";
  out << "shape     " << p.rows << " x " << p.cols << "\n";
  out << "format    " << to_string(p.fmt) << "\n";
  out << "pattern   " << to_string(p.pattern()) << "\n";
  out << "values    " << p.values.size() << " bytes (" << p.stored_values() << " kept)\n";
  out << "metadata  " << p.metadata.size() << " bytes (" << p.metadata_entries() << " entries)\n";
  if (p.quant) {
    out << "scales    " << p.quant->scales.size() << " ("
        << (p.quant->granularity == Granularity::PerChannel ? "per-channel" : "per-tensor") << ", int" << p.quant->bits << ")\n";
  }
  SparsityMask mask{p.rows, p.cols, p.pattern(), std::vector<std::uint8_t>(p.rows * p.cols, 0)};
  std::vector<std::uint32_t> cols(p.cols / 2);
  for (std::size_t r = 0; r < p.rows; ++r) {
    decode_row_columns(p, r, cols);
    for (auto col : cols) mask.bits[r * p.cols + col] = 1;
  }
  const auto rep = validate_mask(mask);
  out << "valid     " << (rep.legal() ? "yes" : "no") << " (" << rep.violations.size() << " violations)\n";
  const Ratio s = storage_saving(p.rows, p.cols, p.fmt);
  out << fmt::format("saving {:.2f}%  ({} of {} bits)\n", 100.0 * s.value(), storage_bits(p.rows, p.cols, p.fmt, true),
                     storage_bits(p.rows, p.cols, p.fmt, false));
  return rep.legal() ? kExitOk : kExitFormat;
}

int cmd_report(const CliConfig& c, const std::string& format, std::ostream& out) {
  CliConfig c8 = c, c4 = c;
  c8.pipeline.fmt = ElementFormat::INT8;
  c4.pipeline.fmt = ElementFormat::INT4;
  Accuracies acc;
  acc.dense = final_top1(artifact::metrics(c, "dense"));
  acc.sparse = final_top1(artifact::metrics(c8, "prune"));
  acc.int8 = final_top1(artifact::metrics(c8, "qat"));
  acc.int4 = final_top1(artifact::metrics(c4, "qat"));
  const auto rep = compression_report(c.model, acc, c.pipeline.fmt);
  out << (format == "tsv" ? rep.tsv() : rep.text());
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse quantized ViT compression", "sparseq"};
  app.require_subcommand(1);
  Flags f;
  std::string checkpoint, pack_file, format = "text";
  auto* train = app.add_subcommand("train-dense", "Train the dense baseline");
  auto* prune = app.add_subcommand("prune", "2:4 prune with distillation fine-tuning");
  auto* qat = app.add_subcommand("qat", "Quantization-aware training of the sparse model");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  auto* inspect = app.add_subcommand("inspect-pack", "Describe an SPQZ file");
  auto* report = app.add_subcommand("report", "Compression table");
  for (auto* s : {train, prune, qat, eval, report}) add_common(s, f);
  eval->add_option("checkpoint", checkpoint, "Checkpoint (default: the dense one)");
  inspect->add_option("file", pack_file, "SPQZ file")->required();
  report->add_option("--format", format, "text or tsv")->check(CLI::IsMember({"text", "tsv"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    init_logging("info");
    if (inspect->parsed()) return cmd_inspect(pack_file, out);
    const std::pair<CLI::App*, std::string_view> phases[] = {
        {train, "dense"}, {prune, "prune"}, {qat, "qat"}, {eval, "eval"}, {report, "report"}};
    for (auto [sub, phase] : phases) {
      if (!sub->parsed()) continue;
      const CliConfig c = resolve(sub, f, phase);
      log_config(c, err);
      if (sub == train) return cmd_train_dense(c, out);
      if (sub == prune) return cmd_prune(c, out);
      if (sub == qat) return cmd_qat(c, out);
      if (sub == eval) return cmd_eval(c, checkpoint, out);
      return cmd_report(c, format, out);
    }
  } catch (const Error& e) {
    err << "sparseq: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "sparseq: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace sparseq
