#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "pfsam/hvp.hpp"
#include "pfsam/perturb.hpp"
#include "pfsam/tensor.hpp"

namespace pfsam::analysis {

// ---------------------------------------------------------------------------
// Sharpness
// ---------------------------------------------------------------------------

struct SharpnessResult {
  double eigenvalue = 0.0;  // Rayleigh quotient at the final iterate
  int iterations = 0;
  bool converged = false;
  bool degenerate = false;  // Hv vanished
};

// Power iteration v <- Hv/||Hv|| with exact Hessian-vector products, from a
// seeded random unit vector. Convergence when the relative change of the
// Rayleigh quotient drops below rel_tol.
SharpnessResult power_iteration_sharpness(const diff::LossBuilder& builder,
                                          const ParameterVector& params,
                                          int max_iters = 100,
                                          double rel_tol = 1e-4,
                                          std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Output snapshots and binned mutual information
// ---------------------------------------------------------------------------

struct OutputSnapshot {
  std::uint64_t epoch = 0;
  std::vector<std::int32_t> labels;
  diff::Tensor unperturbed;                // n x C likelihoods
  std::vector<diff::Tensor> ensemble;      // perturbed draws, each n x C
  std::size_t m = 0;
  perturb::Kind kind = perturb::Kind::kNone;
  std::uint64_t seed = 0;
  bool sigmoid_head = false;  // rows need not sum to one

  void validate() const;
};

// Text header line plus raw little-endian f64 likelihood blocks.
void save_snapshot(const OutputSnapshot& snap, const std::filesystem::path& path);
OutputSnapshot load_snapshot(const std::filesystem::path& path);

// Per row: bit c is set iff likelihood[c] >= t. Supports up to 62 classes.
std::vector<std::uint64_t> bin_outputs(const diff::Tensor& likelihoods, double t);

// Sparse distribution over codes, sorted by code.
using CodeDist = std::vector<std::pair<std::uint64_t, double>>;

CodeDist point_mass(std::uint64_t code);
// One empirical distribution per sample from ensemble draws (draws x n).
std::vector<CodeDist> ensemble_distributions(
    const std::vector<std::vector<std::uint64_t>>& draws);

// Plug-in I(X; Yhat | Y) in bits: mean over samples of
// H(p(.|x), p(.|y)) - H(p(.|x)), with p(.|y) the mean of p(.|x') over the
// label class. Equals H(Yhat | Y) for deterministic snapshots.
double conditional_mi(std::span<const CodeDist> dists,
                      std::span<const std::int32_t> labels);

// Plug-in I(Yhat; Y) in bits over the empirical joint of (code, label).
double target_mi(std::span<const std::uint64_t> codes,
                 std::span<const std::int32_t> labels);
// Ensemble-expanded variant: every draw of every sample is a datum.
double target_mi_ensemble(const std::vector<std::vector<std::uint64_t>>& draws,
                          std::span<const std::int32_t> labels);

struct MICurve {
  std::vector<double> thresholds;
  std::vector<double> i_x_yhat_given_y;  // bits
  std::vector<double> i_yhat_y;          // bits
};

struct SnapshotCurves {
  MICurve unperturbed;  // point-mass distributions
  MICurve perturbed;    // ensemble distributions
};

inline constexpr std::size_t kNumThresholds = 100;

// Thresholds 10^r for 100 values of r linearly spaced in [-12, 0].
std::vector<double> threshold_grid();

SnapshotCurves mi_curve(const OutputSnapshot& snap);

// Adjusted grid: the unperturbed conditional-MI curve is normalized by its
// maximum and restricted to the decreasing branch (thresholds at and above
// the argmax); level s in [0,1] maps to the threshold where the normalized
// curve equals 1-s. All curves are reported at that grid, divided by the
// same normalization constant.
struct AdjustedCurves {
  std::vector<double> levels;
  std::vector<double> thresholds;
  std::vector<double> unpert_cond;   // equals 1 - level by construction
  std::vector<double> pert_cond;
  std::vector<double> unpert_target;
  std::vector<double> pert_target;
  double norm_constant = 0.0;
};

AdjustedCurves adjust_thresholds(const SnapshotCurves& curves,
                                 std::size_t num_levels = 100);

struct ForgettingScores {
  std::vector<double> levels;
  std::vector<double> d_forget;  // I(X;Yhat|Y) - I(X;Yhat_p|Y)
  std::vector<double> d_target;  // I(Yhat;Y) - I(Yhat_p;Y)
};

ForgettingScores forgetting_scores(const AdjustedCurves& curves);
// Grid-checked variant for curves that were resampled separately.
ForgettingScores forgetting_scores(std::span<const double> levels_a,
                                   std::span<const double> cond_a,
                                   std::span<const double> target_a,
                                   std::span<const double> levels_b,
                                   std::span<const double> cond_b,
                                   std::span<const double> target_b);

// ---------------------------------------------------------------------------
// Rank statistics
// ---------------------------------------------------------------------------

// Kendall tau-b with tie corrections. nullopt when x or y is entirely tied.
std::optional<double> kendall_tau(std::span<const double> x,
                                  std::span<const double> y);

// Two-sided permutation test: p = (1 + #{|tau(x, y.pi)| >= |tau(x,y)|}) /
// (n_perm + 1). nullopt when tau itself is undefined.
std::optional<double> permutation_p(std::span<const double> x,
                                    std::span<const double> y, int n_perm,
                                    std::uint64_t seed);

struct CorrelationResult {
  std::vector<double> adjusted_levels;
  std::vector<double> tau_forgetting;
  std::vector<double> p_forgetting;
  std::vector<double> tau_target_info;
  std::vector<double> p_target_info;
  double tau_sharpness = 0.0;
  double p_sharpness = 1.0;
  // Aggregate over levels (the level-averaged reading).
  double tau_forgetting_avg = 0.0;
  double p_forgetting_avg = 1.0;
  double tau_target_avg = 0.0;
  double p_target_avg = 1.0;
};

}  // namespace pfsam::analysis
