#include "pfsam/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "pfsam/util.hpp"

namespace pfsam::perturb {

namespace {

using diff::Tensor;
using objectives::LossSpec;

ParameterVector graph_gradient(diff::Graph& g, diff::NodeId loss,
                               const std::vector<diff::NodeId>& leaves,
                               const ParameterVector& like) {
  auto grads = g.backward(loss);
  ParameterVector out = ParameterVector::zeros_like(like);
  std::size_t offset = 0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const Tensor& t = g.value(grads[li].second);
    for (std::size_t i = 0; i < t.size(); ++i) out[offset + i] = t.v[i];
    offset += t.size();
  }
  return out;
}

PerturbationResult normalize_to_rho(ParameterVector g, double rho) {
  PerturbationResult res;
  res.grad_norm = l2_norm(g);
  if (res.grad_norm < kDegenerateNorm) {
    res.degenerate = true;
    res.epsilon = ParameterVector::zeros_like(g);
    return res;
  }
  double s = rho / res.grad_norm;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= s;
  res.epsilon = std::move(g);
  return res;
}

// Per-sample target likelihoods under the head the task loss trains.
// The softmax push can reallocate graph storage, so logits are copied first.
std::vector<double> target_likelihoods(diff::Graph& g, diff::NodeId logits,
                                       std::span<const std::int32_t> y,
                                       bool sigmoid_head) {
  const Tensor z = g.value(logits);
  std::vector<double> out(z.rows);
  if (sigmoid_head) {
    for (std::size_t i = 0; i < z.rows; ++i) {
      double zy = z.at(i, static_cast<std::size_t>(y[i]));
      out[i] = zy >= 0.0 ? 1.0 / (1.0 + std::exp(-zy))
                         : std::exp(zy) / (1.0 + std::exp(zy));
    }
  } else {
    const Tensor probs = g.value(g.softmax(logits));
    for (std::size_t i = 0; i < z.rows; ++i)
      out[i] = probs.at(i, static_cast<std::size_t>(y[i]));
  }
  return out;
}

std::vector<double> random_direction(std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> w(dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& x : w) {
      x = normal(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
  } while (norm < kDegenerateNorm);
  for (double& x : w) x /= norm;
  return w;
}

}  // namespace

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::kNone: return "none";
    case Kind::kSteepest: return "steepest";
    case Kind::kObf: return "obf";
    case Kind::kRandom: return "random";
  }
  return "?";
}

Kind kind_from_name(const std::string& name) {
  if (name == "none") return Kind::kNone;
  if (name == "steepest") return Kind::kSteepest;
  if (name == "obf") return Kind::kObf;
  if (name == "random") return Kind::kRandom;
  throw ConfigError("unknown perturbation kind: " + name);
}

PerturbationResult steepest_perturb(const model::ModelConfig& cfg,
                                    const ParameterVector& params,
                                    const Tensor& X,
                                    std::span<const std::int32_t> y,
                                    const LossSpec& loss, double rho,
                                    AsamMode asam) {
  if (rho < 0.0) throw UsageError("perturb: rho must be non-negative");
  diff::Graph g;
  auto fwd = model::forward_into(g, cfg, params, X);
  diff::NodeId l = objectives::task_loss(g, fwd.logits, y, loss);
  ParameterVector grad = graph_gradient(g, l, fwd.leaves, params);
  if (asam != AsamMode::kOff) return asam_apply(grad, params, asam, rho);
  return normalize_to_rho(std::move(grad), rho);
}

PerturbationResult obf_perturb(const model::ModelConfig& cfg,
                               const ParameterVector& params, const Tensor& X,
                               std::span<const std::int32_t> y,
                               const objectives::OBFParams& obf, double rho,
                               const LossSpec& loss, AsamMode asam) {
  if (rho < 0.0) throw UsageError("perturb: rho must be non-negative");
  obf.validate();
  diff::Graph g;
  auto fwd = model::forward_into(g, cfg, params, X);

  // alpha is fixed from the current likelihoods before the perturbing
  // gradient is formed; no gradient flows through it.
  std::vector<double> yhat =
      target_likelihoods(g, fwd.logits, y, loss.sigmoid_head());
  std::vector<double> alpha(yhat.size());
  for (std::size_t i = 0; i < yhat.size(); ++i)
    alpha[i] = objectives::dynamic_alpha(yhat[i], obf.gamma, obf.lambda);

  diff::NodeId l =
      loss.sigmoid_head()
          ? objectives::obf_objective_sigmoid(g, fwd.logits, y, alpha)
          : objectives::obf_objective(g, fwd.logits, y, alpha);
  ParameterVector grad = graph_gradient(g, l, fwd.leaves, params);
  if (asam != AsamMode::kOff) return asam_apply(grad, params, asam, rho);
  return normalize_to_rho(std::move(grad), rho);
}

PerturbationResult random_perturb(std::size_t dim, double rho,
                                  std::uint64_t seed) {
  if (dim == 0) throw UsageError("random_perturb: dim must be positive");
  ParameterVector like(std::vector<double>(dim, 0.0), {{"all", 0, dim}});
  return random_perturb_like(like, rho, seed);
}

PerturbationResult random_perturb_like(const ParameterVector& like, double rho,
                                       std::uint64_t seed) {
  if (rho < 0.0) throw UsageError("perturb: rho must be non-negative");
  std::vector<double> dir = random_direction(like.size(), seed);
  PerturbationResult res;
  res.epsilon = ParameterVector::zeros_like(like);
  for (std::size_t i = 0; i < dir.size(); ++i) res.epsilon[i] = rho * dir[i];
  res.grad_norm = 1.0;
  return res;
}

PerturbationResult asam_apply(const ParameterVector& g,
                              const ParameterVector& theta, AsamMode mode,
                              double rho) {
  if (g.size() != theta.size()) throw UsageError("asam: dimension mismatch");
  if (mode == AsamMode::kOff) throw UsageError("asam: mode must be set");

  // T g, with T = |theta| elementwise.
  ParameterVector tg = ParameterVector::zeros_like(g);
  for (std::size_t i = 0; i < g.size(); ++i)
    tg[i] = std::abs(theta[i]) * g[i];

  PerturbationResult res;
  res.grad_norm = l2_norm(tg);
  if (res.grad_norm < kDegenerateNorm) {
    res.degenerate = true;
    res.epsilon = ParameterVector::zeros_like(g);
    return res;
  }
  double s = rho / res.grad_norm;
  res.epsilon = ParameterVector::zeros_like(g);
  if (mode == AsamMode::kFixedNorm) {
    for (std::size_t i = 0; i < g.size(); ++i) res.epsilon[i] = s * tg[i];
  } else {
    for (std::size_t i = 0; i < g.size(); ++i)
      res.epsilon[i] = s * std::abs(theta[i]) * tg[i];
  }
  return res;
}

std::vector<std::vector<std::size_t>> microbatch_partition(std::size_t n,
                                                           std::size_t m,
                                                           std::uint64_t seed) {
  if (n == 0) throw UsageError("microbatch_partition: empty batch");
  if (m == 0 || m > n) m = n;
  std::size_t chunks = (n + m - 1) / m;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  if (chunks > 1) {
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out(chunks);
  for (std::size_t c = 0; c < chunks; ++c) {
    std::size_t lo = c * m;
    std::size_t hi = std::min(lo + m, n);
    out[c].assign(perm.begin() + lo, perm.begin() + hi);
  }
  return out;
}

namespace {

void take_rows(const Tensor& X, std::span<const std::int32_t> y,
               const std::vector<std::size_t>& rows, Tensor& Xc,
               std::vector<std::int32_t>& yc) {
  Xc = Tensor(rows.size(), X.cols);
  yc.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < X.cols; ++j) Xc.at(i, j) = X.at(rows[i], j);
    yc[i] = y[rows[i]];
  }
}

}  // namespace

ParameterVector task_gradient(const model::ModelConfig& cfg,
                              const ParameterVector& params, const Tensor& X,
                              std::span<const std::int32_t> y,
                              const LossSpec& loss) {
  diff::Graph g;
  auto fwd = model::forward_into(g, cfg, params, X);
  diff::NodeId l = objectives::task_loss(g, fwd.logits, y, loss);
  return graph_gradient(g, l, fwd.leaves, params);
}

MsamResult msam_gradient(const model::ModelConfig& cfg,
                         const ParameterVector& params, const Tensor& X,
                         std::span<const std::int32_t> y,
                         const PerturbationSpec& spec, const LossSpec& loss) {
  if (X.rows == 0) throw UsageError("msam: empty batch");
  if (y.size() != X.rows) throw UsageError("msam: one label per row required");

  MsamResult res;
  if (spec.kind == Kind::kNone || spec.rho == 0.0) {
    res.gradient = task_gradient(cfg, params, X, y, loss);
    res.microbatches = 1;
    return res;
  }

  auto chunks = microbatch_partition(X.rows, spec.m, spec.seed);
  res.microbatches = chunks.size();
  ParameterVector acc = ParameterVector::zeros_like(params);
  Tensor Xc;
  std::vector<std::int32_t> yc;
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    take_rows(X, y, chunks[c], Xc, yc);
    PerturbationResult pert;
    switch (spec.kind) {
      case Kind::kSteepest:
        pert = steepest_perturb(cfg, params, Xc, yc, loss, spec.rho, spec.asam);
        break;
      case Kind::kObf:
        pert = obf_perturb(cfg, params, Xc, yc, spec.obf, spec.rho, loss,
                           spec.asam);
        break;
      case Kind::kRandom:
        pert = random_perturb_like(params, spec.rho, mix_seed(spec.seed, c));
        break;
      case Kind::kNone:
        break;  // unreachable
    }
    if (pert.degenerate) ++res.degenerate_count;
    res.mean_perturb_norm += pert.grad_norm;

    // Task gradient at the perturbed point; degenerate chunks contribute
    // their unperturbed gradient (epsilon is exactly zero).
    ParameterVector at = add_scaled(params, pert.epsilon, 1.0);
    ParameterVector grad = task_gradient(cfg, at, Xc, yc, loss);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += grad[i];
  }
  double inv = 1.0 / static_cast<double>(chunks.size());
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] *= inv;
  res.mean_perturb_norm /= static_cast<double>(chunks.size());
  res.gradient = std::move(acc);
  return res;
}

ParameterVector perturb_objective_gradient(const model::ModelConfig& cfg,
                                           const ParameterVector& params,
                                           const Tensor& X,
                                           std::span<const std::int32_t> y,
                                           const PerturbationSpec& spec,
                                           const LossSpec& loss) {
  if (spec.kind == Kind::kObf) {
    diff::Graph g;
    auto fwd = model::forward_into(g, cfg, params, X);
    std::vector<double> yhat =
        target_likelihoods(g, fwd.logits, y, loss.sigmoid_head());
    std::vector<double> alpha(yhat.size());
    for (std::size_t i = 0; i < yhat.size(); ++i)
      alpha[i] = objectives::dynamic_alpha(yhat[i], spec.obf.gamma,
                                           spec.obf.lambda);
    diff::NodeId l =
        loss.sigmoid_head()
            ? objectives::obf_objective_sigmoid(g, fwd.logits, y, alpha)
            : objectives::obf_objective(g, fwd.logits, y, alpha);
    return graph_gradient(g, l, fwd.leaves, params);
  }
  return task_gradient(cfg, params, X, y, loss);
}

}  // namespace pfsam::perturb
