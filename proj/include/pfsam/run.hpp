#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfsam/analysis.hpp"
#include "pfsam/data.hpp"
#include "pfsam/model.hpp"
#include "pfsam/optim.hpp"
#include "pfsam/perturb.hpp"

namespace pfsam::run {

// ---------------------------------------------------------------------------
// Configuration (strict JSON schema; unknown keys are errors)
// ---------------------------------------------------------------------------

struct ScheduleConfig {
  double max_value = 0.0;
  double min_value = 0.0;
  double warmup_epochs = 0.0;
};

struct DataConfig {
  enum class Source { kSpurious, kGaussians, kFile };
  Source source = Source::kSpurious;
  data::SpuriousConfig spurious;
  // gaussians
  std::size_t g_n_train = 2000, g_n_test = 2000, g_dim = 8, g_classes = 2;
  double g_separation = 2.0;
  // file
  std::filesystem::path train_path, test_path;
  std::size_t label_column = 0;
  bool standardize = false;
};

struct TrainConfig {
  std::uint64_t epochs = 100;
  std::size_t batch_size = 50;
  std::uint64_t snapshot_every = 25;  // epochs; 0 disables snapshots
  std::size_t snapshot_ensemble = 8;
  std::uint64_t eval_every = 1;       // epochs
  std::uint64_t log_every = 50;       // steps; 0 disables step logging
};

struct RunConfig {
  model::ModelConfig model;
  objectives::LossSpec loss;
  optim::OptimizerState optimizer_template;  // buffers sized at train time
  ScheduleConfig lr;
  ScheduleConfig rho;
  double weight_decay = 0.0;
  std::optional<double> clip_norm;
  std::optional<optim::GsamConfig> gsam;
  std::optional<double> shrink_perturb_beta;
  perturb::PerturbationSpec perturbation;
  DataConfig data;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig from_file(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// Raised when the training loss goes non-finite; the run directory keeps the
// last checkpoint written before the abort.
struct NumericAbort : std::runtime_error {
  std::uint64_t step;
  NumericAbort(std::uint64_t s, const std::string& what)
      : std::runtime_error(what), step(s) {}
};

struct TrainResult {
  std::filesystem::path run_dir;
  double final_test_accuracy = 0.0;
  double final_train_accuracy = 0.0;
  std::uint64_t steps = 0;
  ParameterVector final_params;
  std::vector<std::filesystem::path> snapshot_files;
};

TrainResult run_training(const RunConfig& cfg);

double accuracy(const model::ModelConfig& cfg, const ParameterVector& params,
                const data::Dataset& ds);

// Likelihoods under the trained head: softmax rows, or elementwise sigmoid
// for the sigmoid cross-entropy loss.
diff::Tensor likelihoods(const model::ModelConfig& cfg,
                         const ParameterVector& params, const diff::Tensor& X,
                         bool sigmoid_head);

// Dominant Hessian eigenvalue of the task loss on a fixed seeded batch of
// (at most) 256 training samples.
analysis::SharpnessResult sharpness_probe(const model::ModelConfig& model_cfg,
                                          const objectives::LossSpec& loss,
                                          const ParameterVector& params,
                                          const data::Dataset& train,
                                          int max_iters, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Snapshot analysis artifacts
// ---------------------------------------------------------------------------

struct SnapshotAnalysis {
  analysis::SnapshotCurves curves;
  analysis::AdjustedCurves adjusted;
  analysis::ForgettingScores scores;
};

SnapshotAnalysis analyze_snapshot(const analysis::OutputSnapshot& snap);

// Writes <stem>_micurve.csv, <stem>_adjusted.csv, <stem>_forgetting.csv next
// to out_dir.
void write_snapshot_csvs(const SnapshotAnalysis& a,
                         const std::filesystem::path& out_dir,
                         const std::string& stem);

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct SweepConfig {
  RunConfig base;
  std::vector<perturb::Kind> kinds;
  std::vector<std::size_t> m_values;
  int n_perm = 10000;
  int workers = 1;
  std::filesystem::path out_dir;

  static SweepConfig from_file(const std::filesystem::path& path);
  static SweepConfig from_json(const nlohmann::json& j);
};

struct SweepMember {
  perturb::Kind kind;
  std::size_t m = 0;
  std::string name;
  bool ok = false;
  std::string error;
  double test_accuracy = 0.0;
  double sharpness = 0.0;
  // Forgetting scores averaged over snapshot epochs, one value per level.
  std::vector<double> mean_d_forget;
  std::vector<double> mean_d_target;
};

struct SweepResult {
  std::vector<SweepMember> members;
  bool complete = true;
};

SweepResult run_sweep(const SweepConfig& cfg);

// Per-kind correlation of forgetting/target-info/sharpness with accuracy
// across the member pool.
analysis::CorrelationResult correlate_pool(
    const std::vector<const SweepMember*>& pool, int n_perm,
    std::uint64_t seed);

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitPartial = 4;

int run_cli(std::vector<std::string> args);

}  // namespace pfsam::run
