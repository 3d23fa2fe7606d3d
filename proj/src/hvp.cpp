#include "pfsam/hvp.hpp"

namespace pfsam::diff {

namespace {

// Copies per-leaf tensors into the flat layout of `like`.
ParameterVector flatten_leaf_values(const Graph& g,
                                    const std::vector<NodeId>& nodes,
                                    const ParameterVector& like) {
  ParameterVector out = ParameterVector::zeros_like(like);
  std::size_t offset = 0;
  for (NodeId id : nodes) {
    const Tensor& t = g.value(id);
    if (offset + t.size() > out.size())
      throw UsageError("leaf sizes exceed the parameter vector");
    for (std::size_t i = 0; i < t.size(); ++i) out[offset + i] = t.v[i];
    offset += t.size();
  }
  if (offset != out.size())
    throw UsageError("leaf sizes do not cover the parameter vector");
  return out;
}

}  // namespace

ParameterVector gradient(const LossBuilder& builder, const ParameterVector& at) {
  Graph g;
  BuiltLoss built = builder(g);
  auto grads = g.backward(built.loss);
  std::vector<NodeId> grad_nodes;
  grad_nodes.reserve(grads.size());
  for (auto& [leaf, grad] : grads) grad_nodes.push_back(grad);
  return flatten_leaf_values(g, grad_nodes, at);
}

ParameterVector hvp(const LossBuilder& builder, const ParameterVector& at,
                    const ParameterVector& v) {
  if (v.size() != at.size()) throw UsageError("hvp: dimension mismatch");
  Graph g;
  BuiltLoss built = builder(g);
  auto grads = g.backward(built.loss);

  // s = <grad, v>, assembled per leaf so the second sweep sees it as a
  // differentiable function of the parameters.
  NodeId s = -1;
  std::size_t offset = 0;
  for (auto& [leaf, grad] : grads) {
    const Tensor& shape = g.value(leaf);
    Tensor chunk(shape.rows, shape.cols);
    if (offset + chunk.size() > v.size())
      throw UsageError("hvp: leaf sizes exceed the parameter vector");
    for (std::size_t i = 0; i < chunk.size(); ++i) chunk.v[i] = v[offset + i];
    offset += chunk.size();
    NodeId term = g.sum_all(g.mul(grad, g.constant(std::move(chunk))));
    s = s < 0 ? term : g.add(s, term);
  }
  if (offset != v.size())
    throw UsageError("hvp: leaf sizes do not cover the parameter vector");

  auto second = g.backward(s);
  std::vector<NodeId> hv_nodes;
  hv_nodes.reserve(second.size());
  for (auto& [leaf, grad] : second) hv_nodes.push_back(grad);
  return flatten_leaf_values(g, hv_nodes, at);
}

}  // namespace pfsam::diff
