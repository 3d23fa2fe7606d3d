#include "pfsam/optim.hpp"

#include <cmath>

#include "pfsam/util.hpp"

namespace pfsam::optim {

void ScheduleSpec::validate() const {
  if (warmup_steps > total_steps)
    throw ConfigError("schedule: warmup_steps must not exceed total_steps");
  if (min_value > max_value)
    throw ConfigError("schedule: min must not exceed max");
}

ScheduleSpec ScheduleSpec::constant(double value) {
  return {value, value, 0, 0};
}

double schedule_value(const ScheduleSpec& s, std::uint64_t step) {
  s.validate();
  if (step > s.total_steps && !(s.max_value == s.min_value))
    throw UsageError("schedule_value: step out of range");
  if (step < s.warmup_steps) {
    return s.max_value * static_cast<double>(step) /
           static_cast<double>(s.warmup_steps);
  }
  if (s.total_steps == s.warmup_steps) return s.max_value;
  double frac = static_cast<double>(step - s.warmup_steps) /
                static_cast<double>(s.total_steps - s.warmup_steps);
  return s.max_value + (s.min_value - s.max_value) * frac;
}

OptimizerState OptimizerState::sgd_momentum(std::size_t dim, double momentum) {
  OptimizerState s;
  s.kind = OptKind::kSgdMomentum;
  s.momentum = momentum;
  s.buf.assign(dim, 0.0);
  return s;
}

OptimizerState OptimizerState::adamw(std::size_t dim, double beta1,
                                     double beta2, double eps) {
  OptimizerState s;
  s.kind = OptKind::kAdamW;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  s.buf.assign(dim, 0.0);
  s.buf2.assign(dim, 0.0);
  return s;
}

void to_json(nlohmann::json& j, const OptimizerState& s) {
  j = nlohmann::json{
      {"kind", s.kind == OptKind::kSgdMomentum ? "sgd_momentum" : "adamw"},
      {"momentum", s.momentum},
      {"beta1", s.beta1},
      {"beta2", s.beta2},
      {"eps", s.eps},
      {"buf", s.buf},
      {"buf2", s.buf2},
      {"step_count", s.step_count}};
}

void from_json(const nlohmann::json& j, OptimizerState& s) {
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "sgd_momentum") s.kind = OptKind::kSgdMomentum;
  else if (kind == "adamw") s.kind = OptKind::kAdamW;
  else throw FormatError("optimizer state: unknown kind " + kind);
  s.momentum = j.at("momentum").get<double>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.eps = j.at("eps").get<double>();
  s.buf = j.at("buf").get<std::vector<double>>();
  s.buf2 = j.at("buf2").get<std::vector<double>>();
  s.step_count = j.at("step_count").get<std::uint64_t>();
}

void StepConfig::validate() const {
  lr_schedule.validate();
  rho_schedule.validate();
  if (weight_decay < 0.0)
    throw ConfigError("step: weight_decay must be non-negative");
  if (clip_norm && !(*clip_norm > 0.0))
    throw ConfigError("step: clip_norm must be positive");
  if (shrink_perturb_beta &&
      !(*shrink_perturb_beta >= 0.0 && *shrink_perturb_beta <= 1.0))
    throw ConfigError("step: shrink_perturb beta must be in [0,1]");
}

ParameterVector clip_global_norm(const ParameterVector& g, double c) {
  if (!(c > 0.0)) throw UsageError("clip_global_norm: c must be positive");
  double norm = l2_norm(g);
  if (norm <= c) return g;
  return scaled(g, c / norm);
}

void base_step(OptimizerState& state, ParameterVector& params,
               const ParameterVector& g, double lr, double weight_decay) {
  if (g.size() != params.size())
    throw UsageError("base_step: dimension mismatch");
  if (state.buf.size() != params.size() ||
      (state.kind == OptKind::kAdamW && state.buf2.size() != params.size()))
    throw UsageError("base_step: state buffers do not match parameters");

  state.step_count += 1;
  if (state.kind == OptKind::kSgdMomentum) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.buf[i] = state.momentum * state.buf[i] + g[i];
      params[i] = params[i] - lr * state.buf[i] - lr * weight_decay * params[i];
    }
  } else {
    double t = static_cast<double>(state.step_count);
    double bc1 = 1.0 - std::pow(state.beta1, t);
    double bc2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.buf[i] = state.beta1 * state.buf[i] + (1.0 - state.beta1) * g[i];
      state.buf2[i] =
          state.beta2 * state.buf2[i] + (1.0 - state.beta2) * g[i] * g[i];
      double mhat = state.buf[i] / bc1;
      double vhat = state.buf2[i] / bc2;
      params[i] = params[i] - lr * mhat / (std::sqrt(vhat) + state.eps) -
                  lr * weight_decay * params[i];
    }
  }
}

ParameterVector shrink_perturb(const ParameterVector& params,
                               const ParameterVector& init_params,
                               double beta) {
  if (!(beta >= 0.0 && beta <= 1.0))
    throw UsageError("shrink_perturb: beta must be in [0,1]");
  if (params.size() != init_params.size())
    throw UsageError("shrink_perturb: dimension mismatch");
  if (beta == 0.0) return params;
  ParameterVector out = params;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = (1.0 - beta) * params[i] + beta * init_params[i];
  return out;
}

namespace {

void finish_step(const StepConfig& cfg, OptimizerState& state,
                 ParameterVector& params, ParameterVector update, double lr,
                 const ParameterVector* init_params, StepDiag& diag) {
  diag.grad_norm = l2_norm(update);
  if (cfg.clip_norm) update = clip_global_norm(update, *cfg.clip_norm);
  base_step(state, params, update, lr, cfg.weight_decay);
  if (cfg.shrink_perturb_beta) {
    if (!init_params)
      throw UsageError("step: shrink_perturb requires the initial parameters");
    params = shrink_perturb(params, *init_params, *cfg.shrink_perturb_beta);
  }
}

}  // namespace

StepDiag sam_step(const model::ModelConfig& model_cfg,
                  const objectives::LossSpec& loss, ParameterVector& params,
                  const diff::Tensor& X, std::span<const std::int32_t> y,
                  const perturb::PerturbationSpec& spec, const StepConfig& cfg,
                  OptimizerState& state, const ParameterVector* init_params) {
  cfg.validate();
  StepDiag diag;
  diag.lr = schedule_value(cfg.lr_schedule, state.step_count);
  diag.rho = schedule_value(cfg.rho_schedule, state.step_count);

  perturb::PerturbationSpec step_spec = spec;
  step_spec.rho = diag.rho;
  step_spec.seed = mix_seed(spec.seed, state.step_count);

  auto msam = perturb::msam_gradient(model_cfg, params, X, y, step_spec, loss);
  diag.microbatches = msam.microbatches;
  diag.degenerate_count = msam.degenerate_count;
  finish_step(cfg, state, params, std::move(msam.gradient), diag.lr,
              init_params, diag);
  return diag;
}

StepDiag gsam_step(const model::ModelConfig& model_cfg,
                   const objectives::LossSpec& loss, ParameterVector& params,
                   const diff::Tensor& X, std::span<const std::int32_t> y,
                   const perturb::PerturbationSpec& spec, const StepConfig& cfg,
                   OptimizerState& state, const ParameterVector* init_params) {
  cfg.validate();
  if (!cfg.gsam) throw UsageError("gsam_step: gsam config missing");
  StepDiag diag;
  diag.lr = schedule_value(cfg.lr_schedule, state.step_count);
  diag.rho = schedule_value(cfg.rho_schedule, state.step_count);

  perturb::PerturbationSpec step_spec = spec;
  step_spec.rho = diag.rho;
  step_spec.seed = mix_seed(spec.seed, state.step_count);

  auto msam = perturb::msam_gradient(model_cfg, params, X, y, step_spec, loss);
  diag.microbatches = msam.microbatches;
  diag.degenerate_count = msam.degenerate_count;
  ParameterVector g_sam = std::move(msam.gradient);

  ParameterVector update = g_sam;
  const double xi = cfg.gsam->xi;
  double sam_norm = l2_norm(g_sam);
  if (xi != 0.0) {
    if (sam_norm < perturb::kDegenerateNorm) {
      // No direction to decompose against; descend g_sam alone.
      diag.gsam_fallback = true;
    } else {
      ParameterVector g_pert = perturb::perturb_objective_gradient(
          model_cfg, params, X, y, step_spec, loss);
      if (cfg.gsam->norm_backup) {
        double pn = l2_norm(g_pert);
        if (pn >= perturb::kDegenerateNorm) g_pert = scaled(g_pert, 1.0 / pn);
      }
      double coef = dot(g_pert, g_sam) / (sam_norm * sam_norm);
      // g_perp = g_pert - coef * g_sam; update = g_sam - xi * g_perp.
      for (std::size_t i = 0; i < update.size(); ++i)
        update[i] = g_sam[i] - xi * (g_pert[i] - coef * g_sam[i]);
    }
  }
  finish_step(cfg, state, params, std::move(update), diag.lr, init_params,
              diag);
  return diag;
}

StepDiag step(const model::ModelConfig& model_cfg,
              const objectives::LossSpec& loss, ParameterVector& params,
              const diff::Tensor& X, std::span<const std::int32_t> y,
              const perturb::PerturbationSpec& spec, const StepConfig& cfg,
              OptimizerState& state, const ParameterVector* init_params) {
  if (cfg.gsam)
    return gsam_step(model_cfg, loss, params, X, y, spec, cfg, state,
                     init_params);
  return sam_step(model_cfg, loss, params, X, y, spec, cfg, state, init_params);
}

}  // namespace pfsam::optim
