#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "oracles.hpp"
#include "pfsam/graph.hpp"
#include "pfsam/hvp.hpp"
#include "pfsam/model.hpp"
#include "pfsam/objectives.hpp"

using namespace pfsam;
using diff::Graph;
using diff::NodeId;
using diff::Tensor;

TEST_CASE("softmax of equal logits is uniform") {
  Graph g;
  NodeId x = g.constant(Tensor::row({0.0, 0.0}));
  const Tensor& y = g.value(g.softmax(x));
  CHECK(y.at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y.at(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("logsumexp shifts by the max and does not overflow") {
  Graph g;
  NodeId x = g.constant(Tensor::row({1000.0, 1000.0}));
  double v = g.value(g.logsumexp(x)).at(0, 0);
  CHECK(v == doctest::Approx(1000.0 + std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("matmul against identity") {
  Graph g;
  NodeId eye = g.constant(Tensor(2, 2, {1.0, 0.0, 0.0, 1.0}));
  NodeId a = g.constant(Tensor(2, 3, {1, 2, 3, 4, 5, 6}));
  const Tensor& out = g.value(g.matmul(eye, a));
  for (std::size_t i = 0; i < 6; ++i) CHECK(out.v[i] == g.value(a).v[i]);
}

TEST_CASE("shape mismatch raises a structural error") {
  Graph g;
  NodeId a = g.constant(Tensor(2, 2));
  NodeId b = g.constant(Tensor(2, 3));
  CHECK_THROWS_AS(g.add(a, b), StructuralError);
  CHECK_THROWS_AS(g.matmul(b, b), StructuralError);
}

TEST_CASE("non-finite output raises a numeric error naming the node") {
  Graph g;
  NodeId big = g.constant(Tensor::row({1000.0}));
  CHECK_THROWS_WITH_AS(g.exp(big), doctest::Contains("exp"), NumericError);
  NodeId zero = g.constant(Tensor::row({0.0}));
  CHECK_THROWS_AS(g.log(zero), NumericError);
}

TEST_CASE("backward of x squared") {
  Graph g;
  NodeId x = g.leaf(Tensor::row({3.0}));
  NodeId y = g.sum_all(g.mul(x, x));
  auto grads = g.backward(y);
  REQUIRE(grads.size() == 1);
  CHECK(g.value(grads[0].second).at(0, 0) == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("backward requires a scalar output") {
  Graph g;
  NodeId x = g.leaf(Tensor::row({1.0, 2.0}));
  CHECK_THROWS_AS(g.backward(x), UsageError);
}

TEST_CASE("unreached leaf gets an exact zero gradient") {
  Graph g;
  NodeId x = g.leaf(Tensor::row({3.0}));
  NodeId unused = g.leaf(Tensor::row({1.0, 2.0}));
  (void)unused;
  NodeId y = g.sum_all(g.mul(x, x));
  auto grads = g.backward(y);
  REQUIRE(grads.size() == 2);
  const Tensor& gz = g.value(grads[1].second);
  CHECK(gz.rows == 1);
  CHECK(gz.cols == 2);
  CHECK(gz.v[0] == 0.0);
  CHECK(gz.v[1] == 0.0);
}

TEST_CASE("relu derivative at exactly zero is zero") {
  Graph g;
  NodeId x = g.leaf(Tensor::row({0.0, -1.0, 2.0}));
  NodeId y = g.sum_all(g.relu(x));
  auto grads = g.backward(y);
  const Tensor& gx = g.value(grads[0].second);
  CHECK(gx.v[0] == 0.0);
  CHECK(gx.v[1] == 0.0);
  CHECK(gx.v[2] == 1.0);
}

TEST_CASE("evaluation is bit-deterministic across runs") {
  auto build = [] {
    Graph g;
    std::mt19937_64 rng(7);
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor a(5, 7), b(7, 3);
    for (double& x : a.v) x = normal(rng);
    for (double& x : b.v) x = normal(rng);
    NodeId out = g.mean_all(
        g.softmax(g.matmul(g.constant(a), g.constant(b))));
    return g.value(out).at(0, 0);
  };
  double first = build();
  for (int i = 0; i < 3; ++i) {
    double again = build();
    CHECK(std::memcmp(&first, &again, sizeof(double)) == 0);
  }
}

namespace {

// Per-primitive gradient check: project the output against a random constant
// so the scalarized loss has a nondegenerate gradient even for outputs with
// built-in constraints (softmax rows summing to one).
void check_primitive_gradient(
    const std::function<NodeId(Graph&, NodeId)>& apply, double lo, double hi,
    std::size_t rows = 2, std::size_t cols = 3) {
  std::mt19937_64 rng(1234);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::uniform_real_distribution<double> proj(0.5, 1.5);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x0(rows, cols);
    for (double& v : x0.v) v = dist(rng);
    ParameterVector at(std::vector<double>(x0.v), {{"x", 0, x0.size()}});

    Tensor projection;
    {
      Graph g;
      const Tensor& out = g.value(apply(g, g.constant(x0)));
      projection = Tensor(out.rows, out.cols);
    }
    for (double& v : projection.v) v = proj(rng);

    auto scalarize = [&](Graph& g, NodeId out) {
      return g.mean_all(g.mul(out, g.constant(projection)));
    };
    auto value_at = [&](const ParameterVector& p) {
      Graph g;
      NodeId x = g.constant(Tensor(rows, cols, p.values()));
      return g.value(scalarize(g, apply(g, x))).at(0, 0);
    };

    Graph g;
    NodeId x = g.leaf(x0);
    NodeId y = scalarize(g, apply(g, x));
    auto grads = g.backward(y);
    ParameterVector ad(std::vector<double>(g.value(grads[0].second).v),
                       {{"x", 0, x0.size()}});
    ParameterVector fd = oracles::fd_gradient(value_at, at);
    CHECK(oracles::rel_error(ad, fd) < 1e-6);
  }
}

}  // namespace

TEST_CASE("finite-difference check per primitive") {
  check_primitive_gradient([](Graph& g, NodeId x) { return g.relu(x); }, -2.0,
                           2.0);
  check_primitive_gradient([](Graph& g, NodeId x) { return g.sigmoid(x); },
                           -3.0, 3.0);
  check_primitive_gradient([](Graph& g, NodeId x) { return g.exp(x); }, -2.0,
                           2.0);
  check_primitive_gradient([](Graph& g, NodeId x) { return g.log(x); }, 0.5,
                           3.0);
  check_primitive_gradient([](Graph& g, NodeId x) { return g.softplus(x); },
                           -3.0, 3.0);
  check_primitive_gradient([](Graph& g, NodeId x) { return g.softmax(x); },
                           -2.0, 2.0);
  check_primitive_gradient([](Graph& g, NodeId x) { return g.logsumexp(x); },
                           -2.0, 2.0);
  check_primitive_gradient([](Graph& g, NodeId x) { return g.row_sum(x); },
                           -2.0, 2.0);
  check_primitive_gradient([](Graph& g, NodeId x) { return g.col_sum(x); },
                           -2.0, 2.0);
  check_primitive_gradient([](Graph& g, NodeId x) { return g.transpose(x); },
                           -2.0, 2.0);
  check_primitive_gradient(
      [](Graph& g, NodeId x) { return g.mul(x, g.sigmoid(x)); }, -2.0, 2.0);
  check_primitive_gradient(
      [](Graph& g, NodeId x) {
        return g.div(x, g.add(g.mul(x, x),
                              g.constant(Tensor::full(2, 3, 1.0))));
      },
      -2.0, 2.0);
  check_primitive_gradient(
      [](Graph& g, NodeId x) { return g.gather(x, {2, 0}); }, -2.0, 2.0);
  check_primitive_gradient(
      [](Graph& g, NodeId x) {
        return g.matmul(x, g.transpose(x));
      },
      -2.0, 2.0);
  check_primitive_gradient(
      [](Graph& g, NodeId x) { return g.repeat_cols(g.row_sum(x), 4); }, -2.0,
      2.0);
  check_primitive_gradient(
      [](Graph& g, NodeId x) { return g.repeat_rows(g.col_sum(x), 5); }, -2.0,
      2.0);
  check_primitive_gradient(
      [](Graph& g, NodeId x) {
        return g.scatter(g.gather(x, {1, 2}), {0, 1}, 5);
      },
      -2.0, 2.0);
}

namespace {

// Builder for L = 0.5 * theta^T A theta over a flat leaf.
diff::LossBuilder quadratic_builder(const std::vector<std::vector<double>>& A,
                                    const ParameterVector& theta) {
  return [&A, &theta](Graph& g) {
    const std::size_t d = theta.size();
    Tensor a(d, d);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) a.at(i, j) = A[i][j];
    NodeId th = g.leaf(Tensor(1, d, theta.values()));
    NodeId q = g.matmul(th, g.constant(a));
    NodeId loss = g.scale(g.sum_all(g.mul(q, th)), 0.5);
    return diff::BuiltLoss{loss, {th}};
  };
}

ParameterVector flat(std::vector<double> v) {
  std::size_t n = v.size();
  return ParameterVector(std::move(v), {{"theta", 0, n}});
}

}  // namespace

TEST_CASE("hvp on a diagonal quadratic is the analytic product") {
  std::vector<std::vector<double>> A = {{3.0, 0.0}, {0.0, 1.0}};
  ParameterVector theta = flat({0.7, -0.4});
  ParameterVector v = flat({1.0, 0.0});
  ParameterVector hv = diff::hvp(quadratic_builder(A, theta), theta, v);
  CHECK(hv[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(hv[1] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("hvp is linear in v") {
  std::vector<std::vector<double>> A = {{2.0, 1.0}, {0.5, -1.0}};
  ParameterVector theta = flat({0.3, 0.9});
  ParameterVector v = flat({0.2, -0.7});
  auto builder = quadratic_builder(A, theta);
  ParameterVector hv = diff::hvp(builder, theta, v);
  ParameterVector va = flat({0.2 * 3.5, -0.7 * 3.5});
  ParameterVector hva = diff::hvp(builder, theta, va);
  for (std::size_t i = 0; i < 2; ++i)
    CHECK(hva[i] == doctest::Approx(3.5 * hv[i]).epsilon(1e-12));
}

TEST_CASE("hvp dimension mismatch is a usage error") {
  std::vector<std::vector<double>> A = {{1.0}};
  ParameterVector theta = flat({1.0});
  ParameterVector v = flat({1.0, 2.0});
  CHECK_THROWS_AS(diff::hvp(quadratic_builder(A, theta), theta, v), UsageError);
}

namespace {

diff::LossBuilder mlp_ce_builder(const pfsam::model::ModelConfig& cfg,
                                 const ParameterVector& params,
                                 const Tensor& X,
                                 const std::vector<std::int32_t>& y) {
  return [&](Graph& g) {
    auto fwd = pfsam::model::forward_into(g, cfg, params, X);
    NodeId loss = pfsam::objectives::ce_loss(g, fwd.logits, y);
    return diff::BuiltLoss{loss, fwd.leaves};
  };
}

}  // namespace

TEST_CASE("hessian of a random MLP + CE loss is symmetric: <u,Hv> == <v,Hu>") {
  std::mt19937_64 rng(515);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    pfsam::model::ModelConfig cfg;
    cfg.input_dim = 3;
    cfg.hidden_dims = {5 + trial};
    cfg.num_classes = 3;
    cfg.activation = trial % 2 ? pfsam::model::Activation::kSigmoid
                               : pfsam::model::Activation::kRelu;
    ParameterVector params = pfsam::model::init_params(cfg, rng());
    Tensor X(4, 3);
    for (double& x : X.v) x = normal(rng);
    std::vector<std::int32_t> y = {0, 2, 1, 1};
    auto builder = mlp_ce_builder(cfg, params, X, y);

    ParameterVector u = ParameterVector::zeros_like(params);
    ParameterVector v = ParameterVector::zeros_like(params);
    for (std::size_t i = 0; i < params.size(); ++i) {
      u[i] = normal(rng);
      v[i] = normal(rng);
    }
    ParameterVector hu = diff::hvp(builder, params, u);
    ParameterVector hv = diff::hvp(builder, params, v);
    double uhv = dot(u, hv);
    double vhu = dot(v, hu);
    CHECK(std::abs(uhv - vhu) <=
          1e-9 * std::max({std::abs(uhv), std::abs(vhu), 1e-3}));
  }
}

TEST_CASE("hvp on an MLP matches finite differences of the gradient") {
  std::mt19937_64 rng(517);
  std::normal_distribution<double> normal(0.0, 1.0);
  pfsam::model::ModelConfig cfg;
  cfg.input_dim = 3;
  cfg.hidden_dims = {6};
  cfg.num_classes = 2;
  cfg.activation = pfsam::model::Activation::kSigmoid;  // smooth everywhere
  ParameterVector params = pfsam::model::init_params(cfg, 99);
  Tensor X(5, 3);
  for (double& x : X.v) x = normal(rng);
  std::vector<std::int32_t> y = {0, 1, 1, 0, 1};
  auto builder = mlp_ce_builder(cfg, params, X, y);

  ParameterVector v = ParameterVector::zeros_like(params);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = normal(rng);

  ParameterVector hv = diff::hvp(builder, params, v);

  // (grad(theta + h v) - grad(theta - h v)) / (2h)
  const double h = 1e-5;
  ParameterVector plus = add_scaled(params, v, h);
  ParameterVector minus = add_scaled(params, v, -h);
  ParameterVector gp = diff::gradient(mlp_ce_builder(cfg, plus, X, y), plus);
  ParameterVector gm = diff::gradient(mlp_ce_builder(cfg, minus, X, y), minus);
  ParameterVector fd = ParameterVector::zeros_like(params);
  for (std::size_t i = 0; i < fd.size(); ++i)
    fd[i] = (gp[i] - gm[i]) / (2.0 * h);
  CHECK(oracles::rel_error(hv, fd) < 1e-6);
}

TEST_CASE("hvp on random quadratics equals the symmetrized matrix product") {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    std::size_t d = 3 + trial;
    std::vector<std::vector<double>> A(d, std::vector<double>(d));
    for (auto& row : A)
      for (double& x : row) x = normal(rng);
    std::vector<double> tv(d), vv(d);
    for (double& x : tv) x = normal(rng);
    for (double& x : vv) x = normal(rng);
    ParameterVector theta = flat(tv);
    ParameterVector v = flat(vv);
    ParameterVector hv = diff::hvp(quadratic_builder(A, theta), theta, v);
    for (std::size_t i = 0; i < d; ++i) {
      double expect = 0.0;
      for (std::size_t j = 0; j < d; ++j)
        expect += 0.5 * (A[i][j] + A[j][i]) * v[j];
      CHECK(hv[i] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}
