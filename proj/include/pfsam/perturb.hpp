#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pfsam/model.hpp"
#include "pfsam/objectives.hpp"
#include "pfsam/params.hpp"

namespace pfsam::perturb {

enum class Kind { kNone, kSteepest, kObf, kRandom };
enum class AsamMode { kOff, kStandard, kFixedNorm };

const char* kind_name(Kind k);
Kind kind_from_name(const std::string& name);

struct PerturbationSpec {
  Kind kind = Kind::kNone;
  double rho = 0.0;
  std::size_t m = 0;  // microbatch size; 0 means full batch
  objectives::OBFParams obf;
  AsamMode asam = AsamMode::kOff;
  std::uint64_t seed = 0;
};

struct PerturbationResult {
  ParameterVector epsilon;
  double grad_norm = 0.0;  // norm of the vector that was normalized
  bool degenerate = false;
};

// Norm threshold below which a perturbing gradient is treated as zero.
inline constexpr double kDegenerateNorm = 1e-12;

// epsilon = rho * g / ||g||_2 with g the task-loss gradient on the
// microbatch. Degenerate gradients yield epsilon = 0 with the flag set.
PerturbationResult steepest_perturb(const model::ModelConfig& cfg,
                                    const ParameterVector& params,
                                    const diff::Tensor& X,
                                    std::span<const std::int32_t> y,
                                    const objectives::LossSpec& loss, double rho,
                                    AsamMode asam = AsamMode::kOff);

// Ascent direction of the output-bias-forgetting objective. Per-sample alpha
// comes from dynamic_alpha on the current target likelihood (softmax, or the
// per-logit sigmoid when the task loss uses a sigmoid head).
PerturbationResult obf_perturb(const model::ModelConfig& cfg,
                               const ParameterVector& params,
                               const diff::Tensor& X,
                               std::span<const std::int32_t> y,
                               const objectives::OBFParams& obf, double rho,
                               const objectives::LossSpec& loss,
                               AsamMode asam = AsamMode::kOff);

// Uniform direction on the radius-rho hypersphere (normalized Gaussian).
PerturbationResult random_perturb(std::size_t dim, double rho,
                                  std::uint64_t seed);
PerturbationResult random_perturb_like(const ParameterVector& like, double rho,
                                       std::uint64_t seed);

// ASAM scaling with operator T = |theta| elementwise:
//   standard:   epsilon = rho * T^2 g / ||T g||
//   fixed_norm: epsilon = rho * T g / ||T g||   (so ||epsilon|| = rho)
PerturbationResult asam_apply(const ParameterVector& g,
                              const ParameterVector& theta, AsamMode mode,
                              double rho);

// Seeded-shuffle partition into ceil(n/m) contiguous chunks; the last chunk
// may be short. A single chunk keeps the original order.
std::vector<std::vector<std::size_t>> microbatch_partition(std::size_t n,
                                                           std::size_t m,
                                                           std::uint64_t seed);

struct MsamResult {
  ParameterVector gradient;
  std::size_t microbatches = 0;
  std::size_t degenerate_count = 0;
  double mean_perturb_norm = 0.0;  // mean perturbing-gradient norm over chunks
};

// m-SAM update gradient: per microbatch, perturb by spec.kind and evaluate
// the task gradient at theta + epsilon; average over microbatches in index
// order. kind == none or rho == 0 reduces bit-exactly to the plain full-batch
// task gradient.
MsamResult msam_gradient(const model::ModelConfig& cfg,
                         const ParameterVector& params, const diff::Tensor& X,
                         std::span<const std::int32_t> y,
                         const PerturbationSpec& spec,
                         const objectives::LossSpec& loss);

// Task-loss gradient at params on the full batch (no perturbation).
ParameterVector task_gradient(const model::ModelConfig& cfg,
                              const ParameterVector& params,
                              const diff::Tensor& X,
                              std::span<const std::int32_t> y,
                              const objectives::LossSpec& loss);

// Gradient of the perturbation objective at params on the full batch; used
// by the GSAM decomposition. Falls back to the task gradient for kinds
// without an objective (none, random).
ParameterVector perturb_objective_gradient(const model::ModelConfig& cfg,
                                           const ParameterVector& params,
                                           const diff::Tensor& X,
                                           std::span<const std::int32_t> y,
                                           const PerturbationSpec& spec,
                                           const objectives::LossSpec& loss);

}  // namespace pfsam::perturb
