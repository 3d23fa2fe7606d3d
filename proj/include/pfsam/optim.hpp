#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "pfsam/params.hpp"
#include "pfsam/perturb.hpp"

namespace pfsam::optim {

// Linear warmup from 0 to max over warmup_steps, then linear decay from max
// to min at total_steps. max == min with zero warmup is a constant schedule.
struct ScheduleSpec {
  double max_value = 0.0;
  double min_value = 0.0;
  std::uint64_t warmup_steps = 0;
  std::uint64_t total_steps = 0;

  void validate() const;
  static ScheduleSpec constant(double value);
};

double schedule_value(const ScheduleSpec& s, std::uint64_t step);

enum class OptKind { kSgdMomentum, kAdamW };

struct OptimizerState {
  OptKind kind = OptKind::kSgdMomentum;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<double> buf;  // momentum buffer (sgd) or first moment (adamw)
  std::vector<double> buf2; // second moment (adamw)
  std::uint64_t step_count = 0;

  static OptimizerState sgd_momentum(std::size_t dim, double momentum = 0.9);
  static OptimizerState adamw(std::size_t dim, double beta1 = 0.9,
                              double beta2 = 0.999, double eps = 1e-8);
};

void to_json(nlohmann::json& j, const OptimizerState& s);
void from_json(const nlohmann::json& j, OptimizerState& s);

struct GsamConfig {
  double xi = 0.0;
  bool norm_backup = false;  // normalize the perturbing gradient first
};

struct StepConfig {
  ScheduleSpec lr_schedule;
  ScheduleSpec rho_schedule = ScheduleSpec::constant(0.0);
  double weight_decay = 0.0;
  std::optional<double> clip_norm;
  std::optional<GsamConfig> gsam;
  std::optional<double> shrink_perturb_beta;

  void validate() const;
};

// If ||g|| > c, rescale to norm c; otherwise identity.
ParameterVector clip_global_norm(const ParameterVector& g, double c);

// One base-optimizer update with decoupled weight decay: the decay term is
// applied directly to the parameters, never through the gradient.
void base_step(OptimizerState& state, ParameterVector& params,
               const ParameterVector& g, double lr, double weight_decay);

// theta' = (1 - beta) * theta + beta * theta0
ParameterVector shrink_perturb(const ParameterVector& params,
                               const ParameterVector& init_params, double beta);

struct StepDiag {
  double lr = 0.0;
  double rho = 0.0;
  double grad_norm = 0.0;  // composed update gradient, before clipping
  std::size_t microbatches = 0;
  std::size_t degenerate_count = 0;
  bool gsam_fallback = false;
};

// SAM-family step: m-SAM gradient with the scheduled rho, optional clipping,
// base step at the unperturbed parameters, optional shrink-and-perturb.
StepDiag sam_step(const model::ModelConfig& model_cfg,
                  const objectives::LossSpec& loss, ParameterVector& params,
                  const diff::Tensor& X, std::span<const std::int32_t> y,
                  const perturb::PerturbationSpec& spec, const StepConfig& cfg,
                  OptimizerState& state,
                  const ParameterVector* init_params = nullptr);

// GSAM step: decomposes the at-theta perturbing gradient against the m-SAM
// gradient and descends g_sam - xi * g_perp.
StepDiag gsam_step(const model::ModelConfig& model_cfg,
                   const objectives::LossSpec& loss, ParameterVector& params,
                   const diff::Tensor& X, std::span<const std::int32_t> y,
                   const perturb::PerturbationSpec& spec, const StepConfig& cfg,
                   OptimizerState& state,
                   const ParameterVector* init_params = nullptr);

// Dispatches to gsam_step when cfg.gsam is set, else sam_step.
StepDiag step(const model::ModelConfig& model_cfg,
              const objectives::LossSpec& loss, ParameterVector& params,
              const diff::Tensor& X, std::span<const std::int32_t> y,
              const perturb::PerturbationSpec& spec, const StepConfig& cfg,
              OptimizerState& state,
              const ParameterVector* init_params = nullptr);

}  // namespace pfsam::optim
