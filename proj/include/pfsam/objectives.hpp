#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pfsam/graph.hpp"

namespace pfsam::objectives {

enum class LossKind { kCe, kSigmoidCe, kCeLabelSmooth };

struct LossSpec {
  LossKind kind = LossKind::kCe;
  double label_smooth_eps = 0.0;  // only read for kCeLabelSmooth

  void validate() const;
  bool sigmoid_head() const { return kind == LossKind::kSigmoidCe; }
};

struct OBFParams {
  double gamma = 0.0;   // forgetting strength ceiling, in [0, 1]
  double lambda = 0.0;  // target-likelihood activation threshold, in [0, 1)

  void validate() const;
};

// All losses reduce by the mean over the batch (and over classes for the
// sigmoid variant), so learning rates and rho are batch-size insensitive.
// Each builder appends nodes to the graph and returns the scalar loss node.

// Mean of -log softmax(logits)[i, y_i]. Logit gradient per row is
// (softmax - onehot) / n.
diff::NodeId ce_loss(diff::Graph& g, diff::NodeId logits,
                     std::span<const std::int32_t> labels);

// Mean over batch and classes of the binary cross-entropy between
// sigmoid(logits) and onehot targets. Per-logit gradient is
// (sigmoid(z) - onehot) / (n C).
diff::NodeId sigmoid_ce_loss(diff::Graph& g, diff::NodeId logits,
                             std::span<const std::int32_t> labels);

// Cross-entropy against (1-eps) * onehot + eps / C.
diff::NodeId ce_label_smooth(diff::Graph& g, diff::NodeId logits,
                             std::span<const std::int32_t> labels, double eps);

// Cross-entropy between the uniform target 1/C and softmax(logits); the
// logit gradient per row is (softmax - 1/C) / n.
diff::NodeId uniform_ce(diff::Graph& g, diff::NodeId logits);

// Output-bias-forgetting objective, softmax head: per sample
// (1-alpha) * CE(y, yhat) - CE(U, yhat), averaged over the batch. alpha is
// supplied per sample and enters as a constant (no gradient flows through
// it). Logit gradient per row: (u - alpha*yhat - (1-alpha)*onehot) / n.
diff::NodeId obf_objective(diff::Graph& g, diff::NodeId logits,
                           std::span<const std::int32_t> labels,
                           std::span<const double> alpha);

// Sigmoid-head analogue: expectations over yhat are replaced by sums of the
// per-class sigmoid likelihoods and the uniform term by sum_i z_i / C.
// Per-logit gradient: (1/C - alpha*sigmoid(z) - (1-alpha)*onehot) / n.
diff::NodeId obf_objective_sigmoid(diff::Graph& g, diff::NodeId logits,
                                   std::span<const std::int32_t> labels,
                                   std::span<const double> alpha);

// Dispatches on the loss spec.
diff::NodeId task_loss(diff::Graph& g, diff::NodeId logits,
                       std::span<const std::int32_t> labels,
                       const LossSpec& spec);

// Per-sample forgetting strength: gamma * max((1 - lambda/yhat_y)/(1 - lambda), 0).
// Zero while yhat_y <= lambda, rising linearly to gamma at yhat_y = 1.
double dynamic_alpha(double yhat_y, double gamma, double lambda);

}  // namespace pfsam::objectives
