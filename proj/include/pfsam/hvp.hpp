#pragma once

#include <functional>
#include <vector>

#include "pfsam/graph.hpp"
#include "pfsam/params.hpp"

namespace pfsam::diff {

// A loss builder constructs a scalar loss on a fresh graph and reports the
// parameter leaves it created, in the segment order of the parameter vector
// the builder closed over.
struct BuiltLoss {
  NodeId loss = -1;
  std::vector<NodeId> leaves;
};
using LossBuilder = std::function<BuiltLoss(Graph&)>;

// Gradient of the built loss, flattened into the layout of `at`.
ParameterVector gradient(const LossBuilder& builder, const ParameterVector& at);

// Exact Hessian-vector product by nested reverse mode: differentiate
// <grad(L), v> with respect to the parameters. Not a finite-difference
// approximation.
ParameterVector hvp(const LossBuilder& builder, const ParameterVector& at,
                    const ParameterVector& v);

}  // namespace pfsam::diff
