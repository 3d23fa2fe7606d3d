#include "pfsam/graph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pfsam::diff {

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  if (x > 30.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kScale: return "scale";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kRelu: return "relu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSoftplus: return "softplus";
    case Op::kSoftmaxRow: return "softmax";
    case Op::kLogSumExpRow: return "logsumexp";
    case Op::kRowSum: return "row_sum";
    case Op::kColSum: return "col_sum";
    case Op::kSumAll: return "sum_all";
    case Op::kRepeatCols: return "repeat_cols";
    case Op::kRepeatRows: return "repeat_rows";
    case Op::kGatherCols: return "gather";
    case Op::kScatterCols: return "scatter";
  }
  return "?";
}

void Graph::check_finite(const Node& n, NodeId id) const {
  for (double x : n.value.v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value in node ") +
                         std::to_string(id) + " (" + op_name(n.op) + ")");
    }
  }
}

NodeId Graph::push(Node n) {
  NodeId id = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(std::move(n));
  check_finite(nodes_.back(), id);
  return id;
}

NodeId Graph::constant(Tensor t) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(t);
  return push(std::move(n));
}

NodeId Graph::leaf(Tensor t) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(t);
  NodeId id = push(std::move(n));
  leaves_.push_back(id);
  return id;
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) throw StructuralError("add: shape mismatch");
  Node n{Op::kAdd, a, b, 0.0, {}, Tensor(ta.rows, ta.cols)};
  for (std::size_t i = 0; i < ta.size(); ++i) n.value.v[i] = ta.v[i] + tb.v[i];
  return push(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) throw StructuralError("sub: shape mismatch");
  Node n{Op::kSub, a, b, 0.0, {}, Tensor(ta.rows, ta.cols)};
  for (std::size_t i = 0; i < ta.size(); ++i) n.value.v[i] = ta.v[i] - tb.v[i];
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) throw StructuralError("mul: shape mismatch");
  Node n{Op::kMul, a, b, 0.0, {}, Tensor(ta.rows, ta.cols)};
  for (std::size_t i = 0; i < ta.size(); ++i) n.value.v[i] = ta.v[i] * tb.v[i];
  return push(std::move(n));
}

NodeId Graph::div(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (!ta.same_shape(tb)) throw StructuralError("div: shape mismatch");
  Node n{Op::kDiv, a, b, 0.0, {}, Tensor(ta.rows, ta.cols)};
  for (std::size_t i = 0; i < ta.size(); ++i) n.value.v[i] = ta.v[i] / tb.v[i];
  return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double c) {
  const Tensor& ta = val(a);
  Node n{Op::kScale, a, -1, c, {}, Tensor(ta.rows, ta.cols)};
  for (std::size_t i = 0; i < ta.size(); ++i) n.value.v[i] = c * ta.v[i];
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  if (ta.cols != tb.rows) throw StructuralError("matmul: inner extents differ");
  Node n{Op::kMatMul, a, b, 0.0, {}, Tensor(ta.rows, tb.cols)};
  for (std::size_t i = 0; i < ta.rows; ++i) {
    for (std::size_t k = 0; k < ta.cols; ++k) {
      double aik = ta.at(i, k);
      if (aik == 0.0) continue;
      const double* brow = &tb.v[k * tb.cols];
      double* out = &n.value.v[i * tb.cols];
      for (std::size_t j = 0; j < tb.cols; ++j) out[j] += aik * brow[j];
    }
  }
  return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
  const Tensor& ta = val(a);
  Node n{Op::kTranspose, a, -1, 0.0, {}, Tensor(ta.cols, ta.rows)};
  for (std::size_t i = 0; i < ta.rows; ++i)
    for (std::size_t j = 0; j < ta.cols; ++j) n.value.at(j, i) = ta.at(i, j);
  return push(std::move(n));
}

NodeId Graph::relu(NodeId a) {
  const Tensor& ta = val(a);
  Node n{Op::kRelu, a, -1, 0.0, {}, Tensor(ta.rows, ta.cols)};
  for (std::size_t i = 0; i < ta.size(); ++i)
    n.value.v[i] = ta.v[i] > 0.0 ? ta.v[i] : 0.0;
  return push(std::move(n));
}

NodeId Graph::sigmoid(NodeId a) {
  const Tensor& ta = val(a);
  Node n{Op::kSigmoid, a, -1, 0.0, {}, Tensor(ta.rows, ta.cols)};
  for (std::size_t i = 0; i < ta.size(); ++i)
    n.value.v[i] = stable_sigmoid(ta.v[i]);
  return push(std::move(n));
}

NodeId Graph::exp(NodeId a) {
  const Tensor& ta = val(a);
  Node n{Op::kExp, a, -1, 0.0, {}, Tensor(ta.rows, ta.cols)};
  for (std::size_t i = 0; i < ta.size(); ++i) n.value.v[i] = std::exp(ta.v[i]);
  return push(std::move(n));
}

NodeId Graph::log(NodeId a) {
  const Tensor& ta = val(a);
  Node n{Op::kLog, a, -1, 0.0, {}, Tensor(ta.rows, ta.cols)};
  for (std::size_t i = 0; i < ta.size(); ++i) n.value.v[i] = std::log(ta.v[i]);
  return push(std::move(n));
}

NodeId Graph::softplus(NodeId a) {
  const Tensor& ta = val(a);
  Node n{Op::kSoftplus, a, -1, 0.0, {}, Tensor(ta.rows, ta.cols)};
  for (std::size_t i = 0; i < ta.size(); ++i)
    n.value.v[i] = stable_softplus(ta.v[i]);
  return push(std::move(n));
}

NodeId Graph::softmax(NodeId a) {
  const Tensor& ta = val(a);
  if (ta.cols == 0) throw StructuralError("softmax: empty rows");
  Node n{Op::kSoftmaxRow, a, -1, 0.0, {}, Tensor(ta.rows, ta.cols)};
  for (std::size_t i = 0; i < ta.rows; ++i) {
    double m = ta.at(i, 0);
    for (std::size_t j = 1; j < ta.cols; ++j) m = std::max(m, ta.at(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < ta.cols; ++j) {
      double e = std::exp(ta.at(i, j) - m);
      n.value.at(i, j) = e;
      denom += e;
    }
    for (std::size_t j = 0; j < ta.cols; ++j) n.value.at(i, j) /= denom;
  }
  return push(std::move(n));
}

NodeId Graph::logsumexp(NodeId a) {
  const Tensor& ta = val(a);
  if (ta.cols == 0) throw StructuralError("logsumexp: empty rows");
  Node n{Op::kLogSumExpRow, a, -1, 0.0, {}, Tensor(ta.rows, 1)};
  for (std::size_t i = 0; i < ta.rows; ++i) {
    double m = ta.at(i, 0);
    for (std::size_t j = 1; j < ta.cols; ++j) m = std::max(m, ta.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < ta.cols; ++j) s += std::exp(ta.at(i, j) - m);
    n.value.at(i, 0) = m + std::log(s);
  }
  return push(std::move(n));
}

NodeId Graph::row_sum(NodeId a) {
  const Tensor& ta = val(a);
  Node n{Op::kRowSum, a, -1, 0.0, {}, Tensor(ta.rows, 1)};
  for (std::size_t i = 0; i < ta.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < ta.cols; ++j) s += ta.at(i, j);
    n.value.at(i, 0) = s;
  }
  return push(std::move(n));
}

NodeId Graph::row_mean(NodeId a) {
  const std::size_t cols = val(a).cols;  // copied: row_sum may reallocate
  if (cols == 0) throw StructuralError("row_mean: empty rows");
  NodeId s = row_sum(a);
  return scale(s, 1.0 / static_cast<double>(cols));
}

NodeId Graph::col_sum(NodeId a) {
  const Tensor& ta = val(a);
  Node n{Op::kColSum, a, -1, 0.0, {}, Tensor(1, ta.cols)};
  for (std::size_t i = 0; i < ta.rows; ++i)
    for (std::size_t j = 0; j < ta.cols; ++j) n.value.at(0, j) += ta.at(i, j);
  return push(std::move(n));
}

NodeId Graph::sum_all(NodeId a) {
  const Tensor& ta = val(a);
  Node n{Op::kSumAll, a, -1, 0.0, {}, Tensor(1, 1)};
  double s = 0.0;
  for (double x : ta.v) s += x;
  n.value.at(0, 0) = s;
  return push(std::move(n));
}

NodeId Graph::mean_all(NodeId a) {
  const std::size_t count = val(a).size();  // copied: sum_all may reallocate
  if (count == 0) throw StructuralError("mean_all: empty tensor");
  NodeId s = sum_all(a);
  return scale(s, 1.0 / static_cast<double>(count));
}

NodeId Graph::repeat_cols(NodeId a, std::size_t cols) {
  const Tensor& ta = val(a);
  if (ta.cols != 1) throw StructuralError("repeat_cols: input must be n x 1");
  Node n{Op::kRepeatCols, a, -1, 0.0, {}, Tensor(ta.rows, cols)};
  for (std::size_t i = 0; i < ta.rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) n.value.at(i, j) = ta.at(i, 0);
  return push(std::move(n));
}

NodeId Graph::repeat_rows(NodeId a, std::size_t rows) {
  const Tensor& ta = val(a);
  if (ta.rows != 1) throw StructuralError("repeat_rows: input must be 1 x m");
  Node n{Op::kRepeatRows, a, -1, 0.0, {}, Tensor(rows, ta.cols)};
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < ta.cols; ++j) n.value.at(i, j) = ta.at(0, j);
  return push(std::move(n));
}

NodeId Graph::gather(NodeId a, std::vector<std::int32_t> idx) {
  const Tensor& ta = val(a);
  if (idx.size() != ta.rows)
    throw StructuralError("gather: one index per row required");
  for (std::int32_t j : idx)
    if (j < 0 || static_cast<std::size_t>(j) >= ta.cols)
      throw UsageError("gather: column index out of range");
  Node n{Op::kGatherCols, a, -1, 0.0, std::move(idx), Tensor(ta.rows, 1)};
  for (std::size_t i = 0; i < ta.rows; ++i)
    n.value.at(i, 0) = ta.at(i, static_cast<std::size_t>(n.index[i]));
  return push(std::move(n));
}

NodeId Graph::scatter(NodeId a, std::vector<std::int32_t> idx,
                      std::size_t cols) {
  const Tensor& ta = val(a);
  if (ta.cols != 1) throw StructuralError("scatter: input must be n x 1");
  if (idx.size() != ta.rows)
    throw StructuralError("scatter: one index per row required");
  for (std::int32_t j : idx)
    if (j < 0 || static_cast<std::size_t>(j) >= cols)
      throw UsageError("scatter: column index out of range");
  Node n{Op::kScatterCols, a, -1, 0.0, std::move(idx), Tensor(ta.rows, cols)};
  for (std::size_t i = 0; i < ta.rows; ++i)
    n.value.at(i, static_cast<std::size_t>(n.index[i])) = ta.at(i, 0);
  return push(std::move(n));
}

const Tensor& Graph::value(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
    throw UsageError("value: unknown node id");
  return nodes_[id].value;
}

std::vector<std::pair<NodeId, NodeId>> Graph::backward(NodeId output) {
  if (output < 0 || static_cast<std::size_t>(output) >= nodes_.size())
    throw UsageError("backward: unknown node id");
  if (!val(output).is_scalar())
    throw UsageError("backward: output node must be scalar");

  const std::size_t n0 = static_cast<std::size_t>(output) + 1;

  // Ancestors of the output; everything else keeps a zero adjoint.
  std::vector<char> reach(n0, 0);
  {
    std::vector<NodeId> stack{output};
    reach[output] = 1;
    while (!stack.empty()) {
      const Node& n = nodes_[stack.back()];
      stack.pop_back();
      for (NodeId in : {n.a, n.b}) {
        if (in >= 0 && !reach[in]) {
          reach[in] = 1;
          stack.push_back(in);
        }
      }
    }
  }

  std::vector<NodeId> adj(n0, -1);
  adj[output] = constant(Tensor::full(1, 1, 1.0));

  auto accumulate = [&](NodeId target, NodeId contrib) {
    adj[target] = adj[target] < 0 ? contrib : add(adj[target], contrib);
  };

  // Append order is a topological order, so a reverse index scan visits every
  // node after all of its consumers.
  for (NodeId i = output; i >= 0; --i) {
    if (!reach[i] || adj[i] < 0) continue;
    const Op op = nodes_[i].op;
    const NodeId a = nodes_[i].a;
    const NodeId b = nodes_[i].b;
    const NodeId g = adj[i];
    switch (op) {
      case Op::kConstant:
      case Op::kLeaf:
        break;
      case Op::kAdd:
        accumulate(a, g);
        accumulate(b, g);
        break;
      case Op::kSub:
        accumulate(a, g);
        accumulate(b, scale(g, -1.0));
        break;
      case Op::kMul:
        accumulate(a, mul(g, b));
        accumulate(b, mul(g, a));
        break;
      case Op::kDiv:
        // d(a/b) = g/b for a, -g*(a/b)/b for b.
        accumulate(a, div(g, b));
        accumulate(b, scale(mul(g, div(i, b)), -1.0));
        break;
      case Op::kScale:
        accumulate(a, scale(g, nodes_[i].scalar));
        break;
      case Op::kMatMul:
        accumulate(a, matmul(g, transpose(b)));
        accumulate(b, matmul(transpose(a), g));
        break;
      case Op::kTranspose:
        accumulate(a, transpose(g));
        break;
      case Op::kRelu: {
        // Subgradient at exactly 0 is defined as 0; the mask enters as a
        // constant, so second derivatives through relu are zero a.e.
        const Tensor& ta = val(a);
        Tensor mask(ta.rows, ta.cols);
        for (std::size_t k = 0; k < ta.size(); ++k)
          mask.v[k] = ta.v[k] > 0.0 ? 1.0 : 0.0;
        accumulate(a, mul(g, constant(std::move(mask))));
        break;
      }
      case Op::kSigmoid: {
        NodeId ones = constant(Tensor::full(val(i).rows, val(i).cols, 1.0));
        accumulate(a, mul(g, mul(i, sub(ones, i))));
        break;
      }
      case Op::kExp:
        accumulate(a, mul(g, i));
        break;
      case Op::kLog:
        accumulate(a, div(g, a));
        break;
      case Op::kSoftplus:
        accumulate(a, mul(g, sigmoid(a)));
        break;
      case Op::kSoftmaxRow: {
        NodeId t = mul(g, i);
        NodeId s = repeat_cols(row_sum(t), val(i).cols);
        accumulate(a, mul(i, sub(g, s)));
        break;
      }
      case Op::kLogSumExpRow:
        accumulate(a, mul(repeat_cols(g, val(a).cols), softmax(a)));
        break;
      case Op::kRowSum:
        accumulate(a, repeat_cols(g, val(a).cols));
        break;
      case Op::kColSum:
        accumulate(a, repeat_rows(g, val(a).rows));
        break;
      case Op::kSumAll:
        accumulate(a, repeat_rows(repeat_cols(g, val(a).cols), val(a).rows));
        break;
      case Op::kRepeatCols:
        accumulate(a, row_sum(g));
        break;
      case Op::kRepeatRows:
        accumulate(a, col_sum(g));
        break;
      case Op::kGatherCols:
        accumulate(a, scatter(g, nodes_[i].index, val(a).cols));
        break;
      case Op::kScatterCols:
        accumulate(a, gather(g, nodes_[i].index));
        break;
    }
  }

  std::vector<std::pair<NodeId, NodeId>> grads;
  grads.reserve(leaves_.size());
  for (NodeId leaf : leaves_) {
    NodeId g = (static_cast<std::size_t>(leaf) < n0) ? adj[leaf] : -1;
    if (g < 0) g = constant(Tensor::zeros(val(leaf).rows, val(leaf).cols));
    grads.emplace_back(leaf, g);
  }
  return grads;
}

}  // namespace pfsam::diff
