#include "pfsam/run.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <iostream>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "pfsam/util.hpp"

namespace pfsam::run {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Strict config parsing
// ---------------------------------------------------------------------------

namespace {

void require_object(const json& j, const std::string& ctx) {
  if (!j.is_object()) throw ConfigError(ctx + ": expected an object");
}

void check_keys(const json& j, const std::string& ctx,
                std::initializer_list<const char*> required,
                std::initializer_list<const char*> optional) {
  require_object(j, ctx);
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    bool known = false;
    for (const char* k : required)
      if (key == k) known = true;
    for (const char* k : optional)
      if (key == k) known = true;
    if (!known) throw ConfigError(ctx + ": unknown key '" + key + "'");
  }
  for (const char* k : required)
    if (!j.contains(k)) throw ConfigError(ctx + ": missing key '" + k + "'");
}

template <typename T>
T get_as(const json& j, const std::string& ctx, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(ctx + "." + key + ": " + e.what());
  }
}

template <typename T>
T get_or(const json& j, const std::string& ctx, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  return get_as<T>(j, ctx, key);
}

model::ModelConfig parse_model(const json& j) {
  check_keys(j, "model", {"input_dim", "num_classes"},
             {"hidden_dims", "activation", "head_bias_init"});
  model::ModelConfig cfg;
  cfg.input_dim = get_as<std::size_t>(j, "model", "input_dim");
  cfg.num_classes = get_as<std::size_t>(j, "model", "num_classes");
  cfg.hidden_dims =
      get_or<std::vector<std::size_t>>(j, "model", "hidden_dims", {});
  std::string act = get_or<std::string>(j, "model", "activation", "relu");
  if (act == "relu") cfg.activation = model::Activation::kRelu;
  else if (act == "sigmoid") cfg.activation = model::Activation::kSigmoid;
  else throw ConfigError("model.activation: unknown value '" + act + "'");
  cfg.head_bias_init = get_or<double>(j, "model", "head_bias_init", 0.0);
  cfg.validate();
  return cfg;
}

objectives::LossSpec parse_loss(const json& j) {
  check_keys(j, "loss", {"kind"}, {"label_smooth_eps"});
  objectives::LossSpec spec;
  std::string kind = get_as<std::string>(j, "loss", "kind");
  if (kind == "ce") spec.kind = objectives::LossKind::kCe;
  else if (kind == "sigmoid_ce") spec.kind = objectives::LossKind::kSigmoidCe;
  else if (kind == "ce_label_smooth")
    spec.kind = objectives::LossKind::kCeLabelSmooth;
  else throw ConfigError("loss.kind: unknown value '" + kind + "'");
  spec.label_smooth_eps = get_or<double>(j, "loss", "label_smooth_eps", 0.0);
  spec.validate();
  return spec;
}

optim::OptimizerState parse_optimizer(const json& j) {
  check_keys(j, "optimizer", {"kind"},
             {"momentum", "beta1", "beta2", "eps"});
  std::string kind = get_as<std::string>(j, "optimizer", "kind");
  if (kind == "sgd_momentum") {
    return optim::OptimizerState::sgd_momentum(
        0, get_or<double>(j, "optimizer", "momentum", 0.9));
  }
  if (kind == "adamw") {
    return optim::OptimizerState::adamw(
        0, get_or<double>(j, "optimizer", "beta1", 0.9),
        get_or<double>(j, "optimizer", "beta2", 0.999),
        get_or<double>(j, "optimizer", "eps", 1e-8));
  }
  throw ConfigError("optimizer.kind: unknown value '" + kind + "'");
}

ScheduleConfig parse_schedule(const json& j, const std::string& ctx) {
  check_keys(j, ctx, {"max"}, {"min", "warmup_epochs"});
  ScheduleConfig s;
  s.max_value = get_as<double>(j, ctx, "max");
  s.min_value = get_or<double>(j, ctx, "min", s.max_value);
  s.warmup_epochs = get_or<double>(j, ctx, "warmup_epochs", 0.0);
  if (s.warmup_epochs < 0.0)
    throw ConfigError(ctx + ".warmup_epochs: must be non-negative");
  return s;
}

perturb::PerturbationSpec parse_perturbation(const json& j,
                                             std::size_t num_classes) {
  check_keys(j, "perturbation", {"kind"}, {"m", "obf", "asam"});
  perturb::PerturbationSpec spec;
  spec.kind = perturb::kind_from_name(
      get_as<std::string>(j, "perturbation", "kind"));
  spec.m = get_or<std::size_t>(j, "perturbation", "m", 0);
  spec.obf.lambda = 1.0 / static_cast<double>(num_classes);
  if (j.contains("obf")) {
    check_keys(j.at("obf"), "perturbation.obf", {}, {"gamma", "lambda"});
    spec.obf.gamma = get_or<double>(j.at("obf"), "perturbation.obf", "gamma", 0.0);
    spec.obf.lambda = get_or<double>(j.at("obf"), "perturbation.obf", "lambda",
                                     spec.obf.lambda);
  }
  spec.obf.validate();
  std::string asam = get_or<std::string>(j, "perturbation", "asam", "off");
  if (asam == "off") spec.asam = perturb::AsamMode::kOff;
  else if (asam == "standard") spec.asam = perturb::AsamMode::kStandard;
  else if (asam == "fixed_norm") spec.asam = perturb::AsamMode::kFixedNorm;
  else throw ConfigError("perturbation.asam: unknown value '" + asam + "'");
  return spec;
}

DataConfig parse_data(const json& j) {
  check_keys(j, "data", {"source"},
             {"spurious", "gaussians", "file", "standardize"});
  DataConfig cfg;
  std::string source = get_as<std::string>(j, "data", "source");
  cfg.standardize = get_or<bool>(j, "data", "standardize", false);
  if (source == "spurious") {
    cfg.source = DataConfig::Source::kSpurious;
    if (j.contains("spurious")) {
      const json& s = j.at("spurious");
      check_keys(s, "data.spurious", {},
                 {"n_train", "n_test", "core_dim", "spurious_dim", "margin",
                  "q", "sigma"});
      cfg.spurious.n_train =
          get_or<std::size_t>(s, "data.spurious", "n_train", 2000);
      cfg.spurious.n_test =
          get_or<std::size_t>(s, "data.spurious", "n_test", 2000);
      cfg.spurious.core_dim =
          get_or<std::size_t>(s, "data.spurious", "core_dim", 8);
      cfg.spurious.spurious_dim =
          get_or<std::size_t>(s, "data.spurious", "spurious_dim", 8);
      cfg.spurious.margin = get_or<double>(s, "data.spurious", "margin", 1.0);
      cfg.spurious.train_correlation_q =
          get_or<double>(s, "data.spurious", "q", 0.95);
      cfg.spurious.noise_sigma =
          get_or<double>(s, "data.spurious", "sigma", 0.7);
    }
    cfg.spurious.validate();
  } else if (source == "gaussians") {
    cfg.source = DataConfig::Source::kGaussians;
    const json& s = j.at("gaussians");
    check_keys(s, "data.gaussians", {"dim", "classes"},
               {"n_train", "n_test", "separation"});
    cfg.g_dim = get_as<std::size_t>(s, "data.gaussians", "dim");
    cfg.g_classes = get_as<std::size_t>(s, "data.gaussians", "classes");
    cfg.g_n_train = get_or<std::size_t>(s, "data.gaussians", "n_train", 2000);
    cfg.g_n_test = get_or<std::size_t>(s, "data.gaussians", "n_test", 2000);
    cfg.g_separation = get_or<double>(s, "data.gaussians", "separation", 2.0);
  } else if (source == "file") {
    cfg.source = DataConfig::Source::kFile;
    const json& s = j.at("file");
    check_keys(s, "data.file", {"train_path", "test_path"}, {"label_column"});
    cfg.train_path = get_as<std::string>(s, "data.file", "train_path");
    cfg.test_path = get_as<std::string>(s, "data.file", "test_path");
    cfg.label_column = get_or<std::size_t>(s, "data.file", "label_column", 0);
  } else {
    throw ConfigError("data.source: unknown value '" + source + "'");
  }
  return cfg;
}

TrainConfig parse_train(const json& j) {
  check_keys(j, "train", {"epochs", "batch_size"},
             {"snapshot_every", "snapshot_ensemble", "eval_every", "log_every"});
  TrainConfig cfg;
  cfg.epochs = get_as<std::uint64_t>(j, "train", "epochs");
  cfg.batch_size = get_as<std::size_t>(j, "train", "batch_size");
  if (cfg.batch_size == 0)
    throw ConfigError("train.batch_size: must be positive");
  cfg.snapshot_every =
      get_or<std::uint64_t>(j, "train", "snapshot_every", 25);
  cfg.snapshot_ensemble =
      get_or<std::size_t>(j, "train", "snapshot_ensemble", 8);
  cfg.eval_every = get_or<std::uint64_t>(j, "train", "eval_every", 1);
  cfg.log_every = get_or<std::uint64_t>(j, "train", "log_every", 50);
  if (cfg.eval_every == 0) throw ConfigError("train.eval_every: must be >= 1");
  return cfg;
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  check_keys(j, "config",
             {"model", "loss", "optimizer", "step", "perturbation", "data",
              "train"},
             {"seed", "out_dir"});
  RunConfig cfg;
  cfg.model = parse_model(j.at("model"));
  cfg.loss = parse_loss(j.at("loss"));
  cfg.optimizer_template = parse_optimizer(j.at("optimizer"));

  const json& step = j.at("step");
  check_keys(step, "step", {"lr"},
             {"rho", "weight_decay", "clip_norm", "gsam",
              "shrink_perturb_beta"});
  cfg.lr = parse_schedule(step.at("lr"), "step.lr");
  if (step.contains("rho")) cfg.rho = parse_schedule(step.at("rho"), "step.rho");
  cfg.weight_decay = get_or<double>(step, "step", "weight_decay", 0.0);
  if (cfg.weight_decay < 0.0)
    throw ConfigError("step.weight_decay: must be non-negative");
  if (step.contains("clip_norm")) {
    cfg.clip_norm = get_as<double>(step, "step", "clip_norm");
    if (!(*cfg.clip_norm > 0.0))
      throw ConfigError("step.clip_norm: must be positive");
  }
  if (step.contains("gsam")) {
    check_keys(step.at("gsam"), "step.gsam", {"xi"}, {"norm_backup"});
    optim::GsamConfig g;
    g.xi = get_as<double>(step.at("gsam"), "step.gsam", "xi");
    g.norm_backup =
        get_or<bool>(step.at("gsam"), "step.gsam", "norm_backup", false);
    cfg.gsam = g;
  }
  if (step.contains("shrink_perturb_beta")) {
    cfg.shrink_perturb_beta =
        get_as<double>(step, "step", "shrink_perturb_beta");
    if (!(*cfg.shrink_perturb_beta >= 0.0 && *cfg.shrink_perturb_beta <= 1.0))
      throw ConfigError("step.shrink_perturb_beta: must be in [0,1]");
  }

  cfg.perturbation = parse_perturbation(j.at("perturbation"),
                                        cfg.model.num_classes);
  cfg.data = parse_data(j.at("data"));
  cfg.train = parse_train(j.at("train"));
  cfg.seed = get_or<std::uint64_t>(j, "config", "seed", 0);
  cfg.out_dir = fs::path(get_or<std::string>(j, "config", "out_dir", ""));
  return cfg;
}

RunConfig RunConfig::from_file(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

json RunConfig::to_json() const {
  json j;
  j["model"] = {
      {"input_dim", model.input_dim},
      {"hidden_dims", model.hidden_dims},
      {"num_classes", model.num_classes},
      {"activation",
       model.activation == model::Activation::kRelu ? "relu" : "sigmoid"},
      {"head_bias_init", model.head_bias_init}};
  const char* loss_kind = loss.kind == objectives::LossKind::kCe ? "ce"
                          : loss.kind == objectives::LossKind::kSigmoidCe
                              ? "sigmoid_ce"
                              : "ce_label_smooth";
  j["loss"] = {{"kind", loss_kind}, {"label_smooth_eps", loss.label_smooth_eps}};
  if (optimizer_template.kind == optim::OptKind::kSgdMomentum) {
    j["optimizer"] = {{"kind", "sgd_momentum"},
                      {"momentum", optimizer_template.momentum}};
  } else {
    j["optimizer"] = {{"kind", "adamw"},
                      {"beta1", optimizer_template.beta1},
                      {"beta2", optimizer_template.beta2},
                      {"eps", optimizer_template.eps}};
  }
  j["step"] = {{"lr",
                {{"max", lr.max_value},
                 {"min", lr.min_value},
                 {"warmup_epochs", lr.warmup_epochs}}},
               {"rho",
                {{"max", rho.max_value},
                 {"min", rho.min_value},
                 {"warmup_epochs", rho.warmup_epochs}}},
               {"weight_decay", weight_decay}};
  if (clip_norm) j["step"]["clip_norm"] = *clip_norm;
  if (gsam)
    j["step"]["gsam"] = {{"xi", gsam->xi}, {"norm_backup", gsam->norm_backup}};
  if (shrink_perturb_beta) j["step"]["shrink_perturb_beta"] = *shrink_perturb_beta;
  j["perturbation"] = {{"kind", perturb::kind_name(perturbation.kind)},
                       {"m", perturbation.m},
                       {"obf",
                        {{"gamma", perturbation.obf.gamma},
                         {"lambda", perturbation.obf.lambda}}},
                       {"asam", perturbation.asam == perturb::AsamMode::kOff
                                    ? "off"
                                    : perturbation.asam ==
                                              perturb::AsamMode::kStandard
                                          ? "standard"
                                          : "fixed_norm"}};
  switch (data.source) {
    case DataConfig::Source::kSpurious:
      j["data"] = {{"source", "spurious"},
                   {"spurious",
                    {{"n_train", data.spurious.n_train},
                     {"n_test", data.spurious.n_test},
                     {"core_dim", data.spurious.core_dim},
                     {"spurious_dim", data.spurious.spurious_dim},
                     {"margin", data.spurious.margin},
                     {"q", data.spurious.train_correlation_q},
                     {"sigma", data.spurious.noise_sigma}}}};
      break;
    case DataConfig::Source::kGaussians:
      j["data"] = {{"source", "gaussians"},
                   {"gaussians",
                    {{"n_train", data.g_n_train},
                     {"n_test", data.g_n_test},
                     {"dim", data.g_dim},
                     {"classes", data.g_classes},
                     {"separation", data.g_separation}}}};
      break;
    case DataConfig::Source::kFile:
      j["data"] = {{"source", "file"},
                   {"file",
                    {{"train_path", data.train_path.string()},
                     {"test_path", data.test_path.string()},
                     {"label_column", data.label_column}}}};
      break;
  }
  j["data"]["standardize"] = data.standardize;
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"snapshot_every", train.snapshot_every},
                {"snapshot_ensemble", train.snapshot_ensemble},
                {"eval_every", train.eval_every},
                {"log_every", train.log_every}};
  j["seed"] = seed;
  j["out_dir"] = out_dir.string();
  return j;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

diff::Tensor likelihoods(const model::ModelConfig& cfg,
                         const ParameterVector& params, const diff::Tensor& X,
                         bool sigmoid_head) {
  diff::Graph g;
  auto fwd = model::forward_into(g, cfg, params, X);
  diff::NodeId out =
      sigmoid_head ? g.sigmoid(fwd.logits) : g.softmax(fwd.logits);
  return g.value(out);
}

double accuracy(const model::ModelConfig& cfg, const ParameterVector& params,
                const data::Dataset& ds) {
  if (ds.size() == 0) throw UsageError("accuracy: empty dataset");
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 512;
  for (std::size_t lo = 0; lo < ds.size(); lo += kChunk) {
    std::size_t hi = std::min(lo + kChunk, ds.size());
    diff::Tensor X(hi - lo, ds.dim());
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t j = 0; j < ds.dim(); ++j)
        X.at(i - lo, j) = ds.X.at(i, j);
    diff::Tensor logits = model::forward_values(cfg, params, X);
    for (std::size_t i = 0; i < logits.rows; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < logits.cols; ++c)
        if (logits.at(i, c) > logits.at(i, best)) best = c;
      if (static_cast<std::int32_t>(best) == ds.y[lo + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace {

double batch_loss(const model::ModelConfig& cfg,
                  const objectives::LossSpec& loss,
                  const ParameterVector& params, const diff::Tensor& X,
                  std::span<const std::int32_t> y) {
  diff::Graph g;
  auto fwd = model::forward_into(g, cfg, params, X);
  return g.value(objectives::task_loss(g, fwd.logits, y, loss)).at(0, 0);
}

std::pair<data::Dataset, data::Dataset> load_data(const DataConfig& cfg,
                                                  std::uint64_t seed) {
  std::pair<data::Dataset, data::Dataset> out;
  switch (cfg.source) {
    case DataConfig::Source::kSpurious:
      out = data::gen_spurious(cfg.spurious, seed);
      break;
    case DataConfig::Source::kGaussians: {
      out.first = data::gen_gaussians(cfg.g_n_train, cfg.g_dim, cfg.g_classes,
                                      cfg.g_separation, mix_seed(seed, 11));
      out.second = data::gen_gaussians(cfg.g_n_test, cfg.g_dim, cfg.g_classes,
                                       cfg.g_separation, mix_seed(seed, 12));
      out.first.split = "train";
      out.second.split = "test";
      break;
    }
    case DataConfig::Source::kFile:
      out.first = data::load_delimited(cfg.train_path, cfg.label_column);
      out.second = data::load_delimited(cfg.test_path, cfg.label_column);
      out.first.split = "train";
      out.second.split = "test";
      break;
  }
  if (cfg.standardize) data::standardize(out.first, out.second);
  return out;
}

optim::StepConfig build_step_config(const RunConfig& cfg,
                                    std::uint64_t total_steps,
                                    std::uint64_t steps_per_epoch) {
  auto to_schedule = [&](const ScheduleConfig& s) {
    optim::ScheduleSpec spec;
    spec.max_value = s.max_value;
    spec.min_value = s.min_value;
    spec.warmup_steps = static_cast<std::uint64_t>(
        std::llround(s.warmup_epochs * static_cast<double>(steps_per_epoch)));
    spec.total_steps = total_steps;
    if (spec.warmup_steps > spec.total_steps)
      spec.warmup_steps = spec.total_steps;
    spec.validate();
    return spec;
  };
  optim::StepConfig step;
  step.lr_schedule = to_schedule(cfg.lr);
  step.rho_schedule = to_schedule(cfg.rho);
  step.weight_decay = cfg.weight_decay;
  step.clip_norm = cfg.clip_norm;
  step.gsam = cfg.gsam;
  step.shrink_perturb_beta = cfg.shrink_perturb_beta;
  return step;
}

std::string csv_cell(double x) { return format_double(x); }

class MetricsBuffer {
 public:
  MetricsBuffer() {
    rows_.push_back(
        "step,epoch,train_loss,eval_acc,lr,rho,grad_norm,degenerate");
  }
  void log_step(std::uint64_t step, std::uint64_t epoch, double loss,
                const optim::StepDiag& diag) {
    rows_.push_back(std::to_string(step) + "," + std::to_string(epoch) + "," +
                    csv_cell(loss) + ",," + csv_cell(diag.lr) + "," +
                    csv_cell(diag.rho) + "," + csv_cell(diag.grad_norm) + "," +
                    std::to_string(diag.degenerate_count));
  }
  void log_eval(std::uint64_t step, std::uint64_t epoch, double acc) {
    rows_.push_back(std::to_string(step) + "," + std::to_string(epoch) +
                    ",," + csv_cell(acc) + ",,,,");
  }
  void write(const fs::path& path) const {
    std::string out;
    for (const std::string& r : rows_) {
      out += r;
      out += '\n';
    }
    atomic_write_file(path, out);
  }

 private:
  std::vector<std::string> rows_;
};

// Perturbed-output ensemble for a snapshot: each draw perturbs from a fresh
// m-sized training microbatch at the current parameters and rho.
analysis::OutputSnapshot collect_snapshot(
    const RunConfig& cfg, const ParameterVector& params,
    const data::Dataset& train, const data::Dataset& eval_split,
    std::uint64_t epoch, double rho_now) {
  analysis::OutputSnapshot snap;
  snap.epoch = epoch;
  snap.labels = eval_split.y;
  snap.m = cfg.perturbation.m == 0 ? cfg.train.batch_size : cfg.perturbation.m;
  snap.kind = cfg.perturbation.kind;
  snap.seed = cfg.seed;
  snap.sigmoid_head = cfg.loss.sigmoid_head();
  snap.unperturbed = likelihoods(cfg.model, params, eval_split.X,
                                 snap.sigmoid_head);

  const std::size_t draw_m = std::min(snap.m, train.size());
  for (std::size_t e = 0; e < cfg.train.snapshot_ensemble; ++e) {
    std::uint64_t draw_seed = mix_seed(mix_seed(cfg.seed, 0x50AB) ^ epoch, e);
    std::mt19937_64 rng(draw_seed);
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(draw_m);
    data::Dataset micro = data::take(train, idx);

    perturb::PerturbationResult pert;
    switch (cfg.perturbation.kind) {
      case perturb::Kind::kSteepest:
        pert = perturb::steepest_perturb(cfg.model, params, micro.X, micro.y,
                                         cfg.loss, rho_now,
                                         cfg.perturbation.asam);
        break;
      case perturb::Kind::kObf:
        pert = perturb::obf_perturb(cfg.model, params, micro.X, micro.y,
                                    cfg.perturbation.obf, rho_now, cfg.loss,
                                    cfg.perturbation.asam);
        break;
      case perturb::Kind::kRandom:
        pert = perturb::random_perturb_like(params, rho_now, draw_seed);
        break;
      case perturb::Kind::kNone:
        pert.epsilon = ParameterVector::zeros_like(params);
        break;
    }
    ParameterVector at = add_scaled(params, pert.epsilon, 1.0);
    snap.ensemble.push_back(
        likelihoods(cfg.model, at, eval_split.X, snap.sigmoid_head));
  }
  return snap;
}

}  // namespace

analysis::SharpnessResult sharpness_probe(const model::ModelConfig& model_cfg,
                                          const objectives::LossSpec& loss,
                                          const ParameterVector& params,
                                          const data::Dataset& train,
                                          int max_iters, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0x5a9));
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min<std::size_t>(256, idx.size()));
  data::Dataset batch = data::take(train, idx);

  diff::LossBuilder builder = [&](diff::Graph& g) {
    auto fwd = model::forward_into(g, model_cfg, params, batch.X);
    diff::NodeId l = objectives::task_loss(g, fwd.logits, batch.y, loss);
    return diff::BuiltLoss{l, fwd.leaves};
  };
  return analysis::power_iteration_sharpness(builder, params, max_iters, 1e-4,
                                             mix_seed(seed, 0x5aa));
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TrainResult run_training(const RunConfig& cfg) {
  cfg.model.validate();
  if (cfg.out_dir.empty()) throw ConfigError("out_dir is required");
  fs::create_directories(cfg.out_dir);
  atomic_write_file(cfg.out_dir / "config.json", cfg.to_json().dump(2) + "\n");

  auto [train_ds, test_ds] = load_data(cfg.data, mix_seed(cfg.seed, 0xDA7A));
  if (train_ds.dim() != cfg.model.input_dim)
    throw ConfigError("model.input_dim does not match the data (" +
                      std::to_string(train_ds.dim()) + " features)");
  if (train_ds.num_classes() > static_cast<std::int32_t>(cfg.model.num_classes))
    throw ConfigError("model.num_classes smaller than the labels in the data");

  const std::uint64_t steps_per_epoch =
      (train_ds.size() + cfg.train.batch_size - 1) / cfg.train.batch_size;
  const std::uint64_t total_steps = cfg.train.epochs * steps_per_epoch;
  optim::StepConfig step_cfg =
      build_step_config(cfg, total_steps, steps_per_epoch);

  ParameterVector params = model::init_params(cfg.model, cfg.seed);
  const ParameterVector init_params = params;
  optim::OptimizerState state = cfg.optimizer_template;
  state.buf.assign(params.size(), 0.0);
  if (state.kind == optim::OptKind::kAdamW)
    state.buf2.assign(params.size(), 0.0);

  perturb::PerturbationSpec spec = cfg.perturbation;
  spec.seed = mix_seed(cfg.seed, 0xB47C);

  TrainResult result;
  result.run_dir = cfg.out_dir;

  auto save_checkpoint = [&](const std::string& name) {
    model::Checkpoint cp;
    cp.params = params;
    cp.config_hash = cfg.model.hash();
    cp.step = state.step_count;
    cp.seed = cfg.seed;
    cp.optimizer_state = state;
    model::save(cp, cfg.out_dir / name);
  };

  MetricsBuffer metrics;
  save_checkpoint("ckpt_init.bin");

  std::uint64_t step = 0;
  try {
    for (std::uint64_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
      auto batches = data::batch_iter(train_ds, cfg.train.batch_size,
                                      mix_seed(cfg.seed, 0xE0), epoch);
      for (const auto& batch_rows : batches) {
        data::Dataset batch = data::take(train_ds, batch_rows);
        bool log_now =
            cfg.train.log_every != 0 && step % cfg.train.log_every == 0;
        double loss_now = 0.0;
        if (log_now)
          loss_now = batch_loss(cfg.model, cfg.loss, params, batch.X, batch.y);
        optim::StepDiag diag =
            optim::step(cfg.model, cfg.loss, params, batch.X, batch.y, spec,
                        step_cfg, state, &init_params);
        if (log_now) metrics.log_step(step, epoch, loss_now, diag);
        ++step;
      }
      if ((epoch + 1) % cfg.train.eval_every == 0 ||
          epoch + 1 == cfg.train.epochs) {
        double acc = accuracy(cfg.model, params, test_ds);
        metrics.log_eval(step, epoch, acc);
      }
      if (cfg.train.snapshot_every != 0 &&
          (epoch + 1) % cfg.train.snapshot_every == 0) {
        double rho_now = optim::schedule_value(
            step_cfg.rho_schedule, std::min(state.step_count, total_steps));
        analysis::OutputSnapshot snap = collect_snapshot(
            cfg, params, train_ds, test_ds, epoch + 1, rho_now);
        char name[64];
        std::snprintf(name, sizeof(name), "snapshot_epoch%06llu.snap",
                      static_cast<unsigned long long>(epoch + 1));
        fs::path snap_path = cfg.out_dir / name;
        analysis::save_snapshot(snap, snap_path);
        result.snapshot_files.push_back(snap_path);
        save_checkpoint("ckpt_latest.bin");
      }
    }
  } catch (const NumericError& e) {
    metrics.write(cfg.out_dir / "metrics.csv");
    atomic_write_file(cfg.out_dir / "abort.txt",
                      "step " + std::to_string(step) + ": " + e.what() + "\n");
    throw NumericAbort(step, e.what());
  }

  metrics.write(cfg.out_dir / "metrics.csv");
  save_checkpoint("ckpt_final.bin");
  result.final_test_accuracy = accuracy(cfg.model, params, test_ds);
  result.final_train_accuracy = accuracy(cfg.model, params, train_ds);
  result.steps = step;
  result.final_params = std::move(params);
  return result;
}

// ---------------------------------------------------------------------------
// Snapshot analysis
// ---------------------------------------------------------------------------

SnapshotAnalysis analyze_snapshot(const analysis::OutputSnapshot& snap) {
  SnapshotAnalysis a;
  a.curves = analysis::mi_curve(snap);
  a.adjusted = analysis::adjust_thresholds(a.curves);
  a.scores = analysis::forgetting_scores(a.adjusted);
  return a;
}

void write_snapshot_csvs(const SnapshotAnalysis& a, const fs::path& out_dir,
                         const std::string& stem) {
  {
    std::string csv =
        "threshold,unpert_cond_mi,pert_cond_mi,unpert_target_mi,pert_target_mi\n";
    const auto& u = a.curves.unperturbed;
    const auto& p = a.curves.perturbed;
    for (std::size_t k = 0; k < u.thresholds.size(); ++k) {
      csv += csv_cell(u.thresholds[k]) + "," +
             csv_cell(u.i_x_yhat_given_y[k]) + "," +
             csv_cell(p.i_x_yhat_given_y[k]) + "," + csv_cell(u.i_yhat_y[k]) +
             "," + csv_cell(p.i_yhat_y[k]) + "\n";
    }
    atomic_write_file(out_dir / (stem + "_micurve.csv"), csv);
  }
  {
    std::string csv =
        "level,threshold,unpert_cond,pert_cond,unpert_target,pert_target\n";
    const auto& adj = a.adjusted;
    for (std::size_t j = 0; j < adj.levels.size(); ++j) {
      csv += csv_cell(adj.levels[j]) + "," + csv_cell(adj.thresholds[j]) +
             "," + csv_cell(adj.unpert_cond[j]) + "," +
             csv_cell(adj.pert_cond[j]) + "," + csv_cell(adj.unpert_target[j]) +
             "," + csv_cell(adj.pert_target[j]) + "\n";
    }
    atomic_write_file(out_dir / (stem + "_adjusted.csv"), csv);
  }
  {
    std::string csv = "level,d_forget,d_target\n";
    for (std::size_t j = 0; j < a.scores.levels.size(); ++j) {
      csv += csv_cell(a.scores.levels[j]) + "," +
             csv_cell(a.scores.d_forget[j]) + "," +
             csv_cell(a.scores.d_target[j]) + "\n";
    }
    atomic_write_file(out_dir / (stem + "_forgetting.csv"), csv);
  }
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

SweepConfig SweepConfig::from_json(const json& j) {
  check_keys(j, "sweep", {"base", "kinds", "m_values"},
             {"n_perm", "workers", "out_dir"});
  SweepConfig cfg;
  cfg.base = RunConfig::from_json(j.at("base"));
  for (const auto& k : j.at("kinds"))
    cfg.kinds.push_back(perturb::kind_from_name(k.get<std::string>()));
  cfg.m_values = j.at("m_values").get<std::vector<std::size_t>>();
  if (cfg.kinds.empty() || cfg.m_values.empty())
    throw ConfigError("sweep: kinds and m_values must be non-empty");
  cfg.n_perm = get_or<int>(j, "sweep", "n_perm", 10000);
  cfg.workers = get_or<int>(j, "sweep", "workers", 1);
  if (cfg.n_perm < 1) throw ConfigError("sweep.n_perm: must be >= 1");
  if (cfg.workers < 1) throw ConfigError("sweep.workers: must be >= 1");
  cfg.out_dir = fs::path(get_or<std::string>(j, "sweep", "out_dir", ""));
  if (cfg.out_dir.empty()) cfg.out_dir = cfg.base.out_dir;
  return cfg;
}

SweepConfig SweepConfig::from_file(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

analysis::CorrelationResult correlate_pool(
    const std::vector<const SweepMember*>& pool, int n_perm,
    std::uint64_t seed) {
  if (pool.size() < 2)
    throw UsageError("correlate_pool: need at least two members");
  const std::size_t levels = pool.front()->mean_d_forget.size();
  std::vector<double> acc;
  for (const SweepMember* m : pool) acc.push_back(m->test_accuracy);

  analysis::CorrelationResult res;
  auto tau_or_nan = [](std::optional<double> v) {
    return v ? *v : std::numeric_limits<double>::quiet_NaN();
  };

  std::vector<double> xs(pool.size());
  for (std::size_t j = 0; j < levels; ++j) {
    double level = static_cast<double>(j) / static_cast<double>(levels - 1);
    res.adjusted_levels.push_back(level);
    for (std::size_t i = 0; i < pool.size(); ++i)
      xs[i] = pool[i]->mean_d_forget[j];
    res.tau_forgetting.push_back(tau_or_nan(analysis::kendall_tau(xs, acc)));
    res.p_forgetting.push_back(
        tau_or_nan(analysis::permutation_p(xs, acc, n_perm, mix_seed(seed, j))));
    for (std::size_t i = 0; i < pool.size(); ++i)
      xs[i] = pool[i]->mean_d_target[j];
    res.tau_target_info.push_back(tau_or_nan(analysis::kendall_tau(xs, acc)));
    res.p_target_info.push_back(tau_or_nan(
        analysis::permutation_p(xs, acc, n_perm, mix_seed(seed, 1000 + j))));
  }

  for (std::size_t i = 0; i < pool.size(); ++i) xs[i] = pool[i]->sharpness;
  res.tau_sharpness = tau_or_nan(analysis::kendall_tau(xs, acc));
  res.p_sharpness = tau_or_nan(
      analysis::permutation_p(xs, acc, n_perm, mix_seed(seed, 0xC0)));

  // Level-averaged aggregate (the alternative reading).
  auto mean_of = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  for (std::size_t i = 0; i < pool.size(); ++i)
    xs[i] = mean_of(pool[i]->mean_d_forget);
  res.tau_forgetting_avg = tau_or_nan(analysis::kendall_tau(xs, acc));
  res.p_forgetting_avg = tau_or_nan(
      analysis::permutation_p(xs, acc, n_perm, mix_seed(seed, 0xC1)));
  for (std::size_t i = 0; i < pool.size(); ++i)
    xs[i] = mean_of(pool[i]->mean_d_target);
  res.tau_target_avg = tau_or_nan(analysis::kendall_tau(xs, acc));
  res.p_target_avg = tau_or_nan(
      analysis::permutation_p(xs, acc, n_perm, mix_seed(seed, 0xC2)));
  return res;
}

namespace {

void write_correlation_csv(const analysis::CorrelationResult& res,
                           const fs::path& path) {
  std::string csv =
      "level,tau_forget,p_forget,tau_target,p_target,tau_sharpness,"
      "p_sharpness\n";
  for (std::size_t j = 0; j < res.adjusted_levels.size(); ++j) {
    csv += csv_cell(res.adjusted_levels[j]) + "," +
           csv_cell(res.tau_forgetting[j]) + "," + csv_cell(res.p_forgetting[j]) +
           "," + csv_cell(res.tau_target_info[j]) + "," +
           csv_cell(res.p_target_info[j]) + "," + csv_cell(res.tau_sharpness) +
           "," + csv_cell(res.p_sharpness) + "\n";
  }
  atomic_write_file(path, csv);
}

}  // namespace

SweepResult run_sweep(const SweepConfig& cfg) {
  fs::create_directories(cfg.out_dir);

  SweepResult result;
  for (perturb::Kind kind : cfg.kinds) {
    for (std::size_t m : cfg.m_values) {
      SweepMember member;
      member.kind = kind;
      member.m = m;
      member.name = std::string(perturb::kind_name(kind)) + "_m" +
                    std::to_string(m);
      result.members.push_back(std::move(member));
    }
  }

  // Parallel member training; each member is internally deterministic and
  // owns its artifact directory, so worker count cannot change results.
  std::mutex mu;
  std::size_t next = 0;
  bool failed = false;
  auto worker = [&]() {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (failed || next >= result.members.size()) return;
        i = next++;
      }
      SweepMember& member = result.members[i];
      try {
        RunConfig rc = cfg.base;
        rc.perturbation.kind = member.kind;
        rc.perturbation.m = member.m;
        rc.out_dir = cfg.out_dir / member.name;
        TrainResult tr = run_training(rc);

        member.test_accuracy = tr.final_test_accuracy;
        auto [train_ds, test_ds] =
            load_data(rc.data, mix_seed(rc.seed, 0xDA7A));
        member.sharpness =
            sharpness_probe(rc.model, rc.loss, tr.final_params, train_ds, 100,
                            rc.seed)
                .eigenvalue;

        // Forgetting scores averaged over snapshot epochs, per level.
        std::size_t count = 0;
        for (const fs::path& sp : tr.snapshot_files) {
          analysis::OutputSnapshot snap = analysis::load_snapshot(sp);
          SnapshotAnalysis a = analyze_snapshot(snap);
          write_snapshot_csvs(a, rc.out_dir, sp.stem().string());
          if (member.mean_d_forget.empty()) {
            member.mean_d_forget.assign(a.scores.d_forget.size(), 0.0);
            member.mean_d_target.assign(a.scores.d_target.size(), 0.0);
          }
          for (std::size_t j = 0; j < a.scores.d_forget.size(); ++j) {
            member.mean_d_forget[j] += a.scores.d_forget[j];
            member.mean_d_target[j] += a.scores.d_target[j];
          }
          ++count;
        }
        if (count == 0)
          throw ConfigError(
              "sweep member produced no snapshots; set train.snapshot_every "
              "to divide train.epochs");
        for (double& x : member.mean_d_forget)
          x /= static_cast<double>(count);
        for (double& x : member.mean_d_target)
          x /= static_cast<double>(count);
        member.ok = true;
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(mu);
        member.error = e.what();
        failed = true;
        return;
      }
    }
  };

  {
    std::vector<std::thread> threads;
    int nthreads = std::min<int>(cfg.workers,
                                 static_cast<int>(result.members.size()));
    for (int t = 0; t < nthreads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  // Status manifest, in fixed member order.
  {
    std::string csv = "member,kind,m,status,test_acc,sharpness,error\n";
    for (const SweepMember& m : result.members) {
      std::string status = m.ok ? "ok" : (m.error.empty() ? "skipped" : "failed");
      std::string err = m.error;
      std::replace(err.begin(), err.end(), ',', ';');
      std::replace(err.begin(), err.end(), '\n', ' ');
      csv += m.name + "," + perturb::kind_name(m.kind) + "," +
             std::to_string(m.m) + "," + status + "," +
             (m.ok ? csv_cell(m.test_accuracy) : "") + "," +
             (m.ok ? csv_cell(m.sharpness) : "") + "," + err + "\n";
      if (!m.ok) result.complete = false;
    }
    atomic_write_file(cfg.out_dir / "status.csv", csv);
  }

  // Correlations per kind over the m pool; plot data per member.
  for (perturb::Kind kind : cfg.kinds) {
    std::vector<const SweepMember*> pool;
    for (const SweepMember& m : result.members)
      if (m.kind == kind && m.ok) pool.push_back(&m);

    std::string plot = "m,test_acc,sharpness,mean_d_forget,mean_d_target\n";
    for (const SweepMember* m : pool) {
      double mf = 0.0, mt = 0.0;
      for (double x : m->mean_d_forget) mf += x;
      for (double x : m->mean_d_target) mt += x;
      if (!m->mean_d_forget.empty()) {
        mf /= static_cast<double>(m->mean_d_forget.size());
        mt /= static_cast<double>(m->mean_d_target.size());
      }
      plot += std::to_string(m->m) + "," + csv_cell(m->test_accuracy) + "," +
              csv_cell(m->sharpness) + "," + csv_cell(mf) + "," + csv_cell(mt) +
              "\n";
    }
    atomic_write_file(cfg.out_dir / ("plotdata_" +
                                     std::string(perturb::kind_name(kind)) +
                                     ".csv"),
                      plot);

    if (pool.size() >= 2) {
      analysis::CorrelationResult corr =
          correlate_pool(pool, cfg.n_perm, mix_seed(cfg.base.seed, 0xC088));
      write_correlation_csv(
          corr, cfg.out_dir / ("correlation_" +
                               std::string(perturb::kind_name(kind)) + ".csv"));
      std::string agg =
          "tau_forget_avg,p_forget_avg,tau_target_avg,p_target_avg\n" +
          csv_cell(corr.tau_forgetting_avg) + "," +
          csv_cell(corr.p_forgetting_avg) + "," + csv_cell(corr.tau_target_avg) +
          "," + csv_cell(corr.p_target_avg) + "\n";
      atomic_write_file(cfg.out_dir / ("aggregate_" +
                                       std::string(perturb::kind_name(kind)) +
                                       ".csv"),
                        agg);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

namespace {

int cmd_train(const std::string& config_path,
              const std::optional<std::uint64_t>& seed,
              const std::string& out_dir) {
  RunConfig cfg = RunConfig::from_file(config_path);
  if (seed) cfg.seed = *seed;
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  TrainResult tr = run_training(cfg);
  std::cout << "run_dir: " << tr.run_dir.string() << "\n"
            << "steps: " << tr.steps << "\n"
            << "final_train_acc: " << format_double(tr.final_train_accuracy)
            << "\n"
            << "final_test_acc: " << format_double(tr.final_test_accuracy)
            << "\n";
  return kExitOk;
}

int cmd_sharpness(const std::string& config_path, const std::string& ckpt,
                  const std::optional<std::uint64_t>& seed, int max_iters,
                  const std::string& out_dir) {
  RunConfig cfg = RunConfig::from_file(config_path);
  if (seed) cfg.seed = *seed;
  model::Checkpoint cp = model::load_checked(ckpt, cfg.model);
  auto [train_ds, test_ds] = load_data(cfg.data, mix_seed(cfg.seed, 0xDA7A));
  analysis::SharpnessResult res = sharpness_probe(
      cfg.model, cfg.loss, cp.params, train_ds, max_iters, cfg.seed);
  std::cout << "sharpness: " << format_double(res.eigenvalue) << "\n"
            << "iterations: " << res.iterations << "\n"
            << "converged: " << (res.converged ? "yes" : "no") << "\n"
            << "degenerate: " << (res.degenerate ? "yes" : "no") << "\n";
  fs::path out = out_dir.empty() ? fs::path(ckpt).parent_path() : fs::path(out_dir);
  if (out.empty()) out = ".";
  std::string csv = "sharpness,iterations,converged,degenerate\n" +
                    csv_cell(res.eigenvalue) + "," +
                    std::to_string(res.iterations) + "," +
                    (res.converged ? "1" : "0") + "," +
                    (res.degenerate ? "1" : "0") + "\n";
  atomic_write_file(out / "sharpness.csv", csv);
  return kExitOk;
}

int cmd_analyze(const std::vector<std::string>& snapshots,
                const std::string& out_dir) {
  if (snapshots.empty()) throw ConfigError("analyze: no snapshot files given");
  bool any_failed = false;
  for (const std::string& s : snapshots) {
    fs::path path(s);
    try {
      analysis::OutputSnapshot snap = analysis::load_snapshot(path);
      SnapshotAnalysis a = analyze_snapshot(snap);
      fs::path out = out_dir.empty() ? path.parent_path() : fs::path(out_dir);
      if (out.empty()) out = ".";
      write_snapshot_csvs(a, out, path.stem().string());
      std::cout << path.string() << ": ok\n";
    } catch (const std::exception& e) {
      std::cerr << path.string() << ": error: " << e.what() << "\n";
      any_failed = true;
    }
  }
  return any_failed ? 1 : kExitOk;
}

int cmd_sweep(const std::string& config_path,
              const std::optional<std::uint64_t>& seed, int workers,
              const std::string& out_dir) {
  SweepConfig cfg = SweepConfig::from_file(config_path);
  if (seed) cfg.base.seed = *seed;
  if (workers > 0) cfg.workers = workers;
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  SweepResult res = run_sweep(cfg);
  for (const SweepMember& m : res.members) {
    std::cout << m.name << ": "
              << (m.ok ? "ok acc=" + format_double(m.test_accuracy)
                       : (m.error.empty() ? "skipped" : "failed: " + m.error))
              << "\n";
  }
  return res.complete ? kExitOk : kExitPartial;
}

}  // namespace

int run_cli(std::vector<std::string> args) {
  CLI::App app{"SAM-family perturbed-gradient optimizers and the forgetting "
               "measurement pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ckpt;
  std::optional<std::uint64_t> seed;
  int workers = 0;
  int max_iters = 100;
  std::vector<std::string> snapshots;

  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& v) { seed = v; },
        "override the config seed");
  };

  CLI::App* train = app.add_subcommand("train", "train a model per config");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--out", out_dir, "output directory override");
  add_seed(train);

  CLI::App* sharp = app.add_subcommand("sharpness",
                                       "dominant Hessian eigenvalue of a "
                                       "checkpoint");
  sharp->add_option("--config", config_path, "run config JSON")->required();
  sharp->add_option("--ckpt", ckpt, "checkpoint path")->required();
  sharp->add_option("--max-iters", max_iters, "power iteration cap");
  sharp->add_option("--out", out_dir, "output directory override");
  add_seed(sharp);

  CLI::App* analyze =
      app.add_subcommand("analyze", "MI curves from snapshot files");
  analyze->add_option("snapshots", snapshots, "snapshot files")->required();
  analyze->add_option("--out", out_dir, "output directory override");

  CLI::App* sweep = app.add_subcommand("sweep", "train a pool and correlate "
                                                "forgetting with accuracy");
  sweep->add_option("--config", config_path, "study config JSON")->required();
  sweep->add_option("--workers", workers, "parallel member runs");
  sweep->add_option("--out", out_dir, "output directory override");
  add_seed(sweep);

  std::vector<const char*> argv;
  argv.push_back("pfsam");
  for (const std::string& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (app.got_subcommand(train)) return cmd_train(config_path, seed, out_dir);
    if (app.got_subcommand(sharp))
      return cmd_sharpness(config_path, ckpt, seed, max_iters, out_dir);
    if (app.got_subcommand(analyze)) return cmd_analyze(snapshots, out_dir);
    if (app.got_subcommand(sweep))
      return cmd_sweep(config_path, seed, workers, out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericAbort& e) {
    std::cerr << "numeric abort at step " << e.step << ": " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitConfig;
}

}  // namespace pfsam::run
