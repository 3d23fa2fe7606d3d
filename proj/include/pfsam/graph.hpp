#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "pfsam/tensor.hpp"

namespace pfsam::diff {

using NodeId = std::int32_t;

enum class Op : std::uint8_t {
  kConstant,
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,
  kMatMul,
  kTranspose,
  kRelu,
  kSigmoid,
  kExp,
  kLog,
  kSoftplus,
  kSoftmaxRow,
  kLogSumExpRow,
  kRowSum,
  kColSum,
  kSumAll,
  kRepeatCols,
  kRepeatRows,
  kGatherCols,
  kScatterCols,
};

const char* op_name(Op op);

struct Node {
  Op op;
  NodeId a = -1;
  NodeId b = -1;
  double scalar = 0.0;             // kScale factor
  std::vector<std::int32_t> index; // kGatherCols / kScatterCols column per row
  Tensor value;
};

// Append-only record of primitive applications. Forward values are computed
// eagerly at append time with a fixed reduction order, so evaluation is
// bit-deterministic for identical inputs. backward() extends the graph with
// gradient nodes built from the same primitive set, which makes gradients
// themselves differentiable (exact Hessian-vector products by nesting).
//
// A graph is confined to one thread; independent graphs may run concurrently.
class Graph {
 public:
  NodeId constant(Tensor t);
  NodeId leaf(Tensor t);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId div(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);

  NodeId relu(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId softplus(NodeId a);

  NodeId softmax(NodeId a);     // rowwise, max-shifted
  NodeId logsumexp(NodeId a);   // rowwise, max-shifted; [n x m] -> [n x 1]
  NodeId row_sum(NodeId a);     // [n x m] -> [n x 1]
  NodeId row_mean(NodeId a);
  NodeId col_sum(NodeId a);     // [n x m] -> [1 x m]
  NodeId sum_all(NodeId a);     // [n x m] -> [1 x 1]
  NodeId mean_all(NodeId a);

  NodeId repeat_cols(NodeId a, std::size_t cols);  // [n x 1] -> [n x cols]
  NodeId repeat_rows(NodeId a, std::size_t rows);  // [1 x m] -> [rows x m]

  // Row i of the result is a[i, idx[i]] (resp. scattered back).
  NodeId gather(NodeId a, std::vector<std::int32_t> idx);
  NodeId scatter(NodeId a, std::vector<std::int32_t> idx, std::size_t cols);

  const Tensor& value(NodeId id) const;
  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<NodeId>& leaves() const { return leaves_; }

  // Reverse-mode sweep from a scalar output. Returns one (leaf, gradient)
  // pair per leaf in creation order; leaves the output does not reach get an
  // exact-zero gradient. May be called repeatedly (each call appends nodes).
  std::vector<std::pair<NodeId, NodeId>> backward(NodeId output);

 private:
  NodeId push(Node n);
  void check_finite(const Node& n, NodeId id) const;
  const Tensor& val(NodeId id) const { return nodes_[id].value; }

  std::vector<Node> nodes_;
  std::vector<NodeId> leaves_;
};

}  // namespace pfsam::diff
