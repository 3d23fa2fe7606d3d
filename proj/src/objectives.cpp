#include "pfsam/objectives.hpp"

#include <cmath>

namespace pfsam::objectives {

namespace {

using diff::Graph;
using diff::NodeId;
using diff::Tensor;

// Node pushes may reallocate graph storage, so extents are captured by value
// up front and tensor references are never held across graph calls.
struct Extents {
  std::size_t rows;
  std::size_t cols;
};

Extents checked_extents(const Graph& g, NodeId logits,
                        std::span<const std::int32_t> labels) {
  const Tensor& z = g.value(logits);
  if (labels.size() != z.rows)
    throw UsageError("loss: one label per logits row required");
  for (std::int32_t y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= z.cols)
      throw UsageError("loss: label out of range");
  return {z.rows, z.cols};
}

void check_alpha(std::size_t rows, std::span<const double> alpha) {
  if (alpha.size() != rows)
    throw UsageError("obf: one alpha per sample required");
  for (double a : alpha)
    if (!(a >= 0.0 && a <= 1.0)) throw UsageError("obf: alpha out of [0,1]");
}

std::vector<std::int32_t> label_vec(std::span<const std::int32_t> labels) {
  return {labels.begin(), labels.end()};
}

Tensor onehot(std::size_t rows, std::size_t cols,
              std::span<const std::int32_t> labels) {
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    t.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  return t;
}

// log softmax(logits), max-shifted.
NodeId log_probs(Graph& g, NodeId logits) {
  const std::size_t cols = g.value(logits).cols;
  NodeId lse = g.logsumexp(logits);
  return g.sub(logits, g.repeat_cols(lse, cols));
}

}  // namespace

void LossSpec::validate() const {
  if (kind == LossKind::kCeLabelSmooth &&
      !(label_smooth_eps >= 0.0 && label_smooth_eps < 1.0))
    throw UsageError("loss: label smoothing epsilon must be in [0,1)");
}

void OBFParams::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0))
    throw UsageError("obf: gamma must be in [0,1]");
  if (!(lambda >= 0.0 && lambda < 1.0))
    throw UsageError("obf: lambda must be in [0,1)");
}

diff::NodeId ce_loss(Graph& g, NodeId logits,
                     std::span<const std::int32_t> labels) {
  Extents z = checked_extents(g, logits, labels);
  NodeId picked = g.gather(log_probs(g, logits), label_vec(labels));
  return g.scale(g.sum_all(picked), -1.0 / static_cast<double>(z.rows));
}

diff::NodeId sigmoid_ce_loss(Graph& g, NodeId logits,
                             std::span<const std::int32_t> labels) {
  Extents z = checked_extents(g, logits, labels);
  // softplus(z) - t*z is the stable form of BCE(sigmoid(z), t).
  NodeId targets = g.constant(onehot(z.rows, z.cols, labels));
  NodeId per = g.sub(g.softplus(logits), g.mul(targets, logits));
  return g.scale(g.sum_all(per), 1.0 / static_cast<double>(z.rows * z.cols));
}

diff::NodeId ce_label_smooth(Graph& g, NodeId logits,
                             std::span<const std::int32_t> labels, double eps) {
  Extents z = checked_extents(g, logits, labels);
  if (!(eps >= 0.0 && eps <= 1.0))
    throw UsageError("loss: label smoothing epsilon must be in [0,1]");
  Tensor q = onehot(z.rows, z.cols, labels);
  double off = eps / static_cast<double>(z.cols);
  for (double& x : q.v) x = (1.0 - eps) * x + off;
  NodeId weighted = g.mul(g.constant(std::move(q)), log_probs(g, logits));
  return g.scale(g.sum_all(weighted), -1.0 / static_cast<double>(z.rows));
}

diff::NodeId uniform_ce(Graph& g, NodeId logits) {
  const std::size_t rows = g.value(logits).rows;
  const std::size_t cols = g.value(logits).cols;
  return g.scale(g.sum_all(log_probs(g, logits)),
                 -1.0 / static_cast<double>(rows * cols));
}

diff::NodeId obf_objective(Graph& g, NodeId logits,
                           std::span<const std::int32_t> labels,
                           std::span<const double> alpha) {
  Extents z = checked_extents(g, logits, labels);
  check_alpha(z.rows, alpha);
  NodeId logp = log_probs(g, logits);
  // CE(y, yhat) and CE(U, yhat) per sample, as n x 1 columns.
  NodeId ce_per = g.scale(g.gather(logp, label_vec(labels)), -1.0);
  NodeId uni_per = g.scale(g.row_sum(logp), -1.0 / static_cast<double>(z.cols));
  Tensor one_minus(z.rows, 1);
  for (std::size_t i = 0; i < z.rows; ++i) one_minus.at(i, 0) = 1.0 - alpha[i];
  NodeId per = g.sub(g.mul(g.constant(std::move(one_minus)), ce_per), uni_per);
  return g.scale(g.sum_all(per), 1.0 / static_cast<double>(z.rows));
}

diff::NodeId obf_objective_sigmoid(Graph& g, NodeId logits,
                                   std::span<const std::int32_t> labels,
                                   std::span<const double> alpha) {
  Extents z = checked_extents(g, logits, labels);
  check_alpha(z.rows, alpha);
  NodeId uni_per = g.scale(g.row_sum(logits), 1.0 / static_cast<double>(z.cols));
  NodeId sp_per = g.row_sum(g.softplus(logits));
  NodeId zy = g.gather(logits, label_vec(labels));
  Tensor a(z.rows, 1);
  Tensor one_minus(z.rows, 1);
  for (std::size_t i = 0; i < z.rows; ++i) {
    a.at(i, 0) = alpha[i];
    one_minus.at(i, 0) = 1.0 - alpha[i];
  }
  NodeId per = g.sub(g.sub(uni_per, g.mul(g.constant(std::move(a)), sp_per)),
                     g.mul(g.constant(std::move(one_minus)), zy));
  return g.scale(g.sum_all(per), 1.0 / static_cast<double>(z.rows));
}

diff::NodeId task_loss(Graph& g, NodeId logits,
                       std::span<const std::int32_t> labels,
                       const LossSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case LossKind::kCe:
      return ce_loss(g, logits, labels);
    case LossKind::kSigmoidCe:
      return sigmoid_ce_loss(g, logits, labels);
    case LossKind::kCeLabelSmooth:
      return ce_label_smooth(g, logits, labels, spec.label_smooth_eps);
  }
  throw UsageError("loss: unknown kind");
}

double dynamic_alpha(double yhat_y, double gamma, double lambda) {
  if (!(yhat_y > 0.0)) throw UsageError("dynamic_alpha: yhat_y must be positive");
  if (!(gamma >= 0.0 && gamma <= 1.0))
    throw UsageError("dynamic_alpha: gamma must be in [0,1]");
  if (!(lambda >= 0.0 && lambda < 1.0))
    throw UsageError("dynamic_alpha: lambda must be in [0,1)");
  double raw = (1.0 - lambda / yhat_y) / (1.0 - lambda);
  return gamma * std::max(raw, 0.0);
}

}  // namespace pfsam::objectives
