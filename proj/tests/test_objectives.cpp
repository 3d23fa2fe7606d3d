#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "pfsam/model.hpp"
#include "pfsam/objectives.hpp"

using namespace pfsam;
using diff::Graph;
using diff::NodeId;
using diff::Tensor;
namespace obj = pfsam::objectives;

namespace {

// Gradient of a loss with respect to raw logits fed in as a leaf.
template <typename BuildLoss>
Tensor logit_gradient(const Tensor& logits, BuildLoss&& build) {
  Graph g;
  NodeId z = g.leaf(logits);
  NodeId loss = build(g, z);
  auto grads = g.backward(loss);
  return g.value(grads[0].second);
}

template <typename BuildLoss>
double loss_value(const Tensor& logits, BuildLoss&& build) {
  Graph g;
  NodeId z = g.constant(logits);
  return g.value(build(g, z)).at(0, 0);
}

const std::vector<std::int32_t> kY0 = {0};

}  // namespace

TEST_CASE("ce at zero logits: loss ln2, gradient (-0.5, 0.5)") {
  Tensor z = Tensor::row({0.0, 0.0});
  double v = loss_value(z, [&](Graph& g, NodeId n) {
    return obj::ce_loss(g, n, kY0);
  });
  CHECK(v == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  Tensor grad = logit_gradient(z, [&](Graph& g, NodeId n) {
    return obj::ce_loss(g, n, kY0);
  });
  CHECK(grad.at(0, 0) == doctest::Approx(-0.5).epsilon(1e-14));
  CHECK(grad.at(0, 1) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("ce gradient vanishes as the target likelihood saturates") {
  Tensor z = Tensor::row({30.0, 0.0});
  Tensor grad = logit_gradient(z, [&](Graph& g, NodeId n) {
    return obj::ce_loss(g, n, kY0);
  });
  CHECK(std::abs(grad.at(0, 0)) < 1e-12);
  CHECK(std::abs(grad.at(0, 1)) < 1e-12);
}

TEST_CASE("ce rejects out-of-range labels") {
  Graph g;
  NodeId z = g.constant(Tensor::row({0.0, 0.0}));
  std::vector<std::int32_t> bad = {2};
  CHECK_THROWS_AS(obj::ce_loss(g, z, bad), UsageError);
}

TEST_CASE("sigmoid ce at zero logits, C=2, y=0") {
  Tensor z = Tensor::row({0.0, 0.0});
  Tensor grad = logit_gradient(z, [&](Graph& g, NodeId n) {
    return obj::sigmoid_ce_loss(g, n, kY0);
  });
  // per-logit (sigma(z) - onehot) / (n C)
  CHECK(grad.at(0, 0) == doctest::Approx((0.5 - 1.0) / 2.0).epsilon(1e-14));
  CHECK(grad.at(0, 1) == doctest::Approx((0.5 - 0.0) / 2.0).epsilon(1e-14));
}

TEST_CASE("sigmoid ce gradient vanishes at saturation") {
  Tensor z = Tensor::row({40.0, -40.0});
  Tensor grad = logit_gradient(z, [&](Graph& g, NodeId n) {
    return obj::sigmoid_ce_loss(g, n, kY0);
  });
  CHECK(std::abs(grad.at(0, 0)) < 1e-12);
  CHECK(std::abs(grad.at(0, 1)) < 1e-12);
}

TEST_CASE("label smoothing at eps=0 equals ce exactly") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal(0.0, 2.0);
  Tensor z(4, 5);
  for (double& x : z.v) x = normal(rng);
  std::vector<std::int32_t> y = {0, 3, 4, 1};
  double a = loss_value(z, [&](Graph& g, NodeId n) {
    return obj::ce_loss(g, n, y);
  });
  double b = loss_value(z, [&](Graph& g, NodeId n) {
    return obj::ce_label_smooth(g, n, y, 0.0);
  });
  CHECK(a == b);
}

TEST_CASE("label smoothing at eps=1 equals uniform ce exactly") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> normal(0.0, 2.0);
  Tensor z(3, 4);
  for (double& x : z.v) x = normal(rng);
  std::vector<std::int32_t> y = {0, 1, 2};
  double a = loss_value(z, [&](Graph& g, NodeId n) {
    return obj::ce_label_smooth(g, n, y, 1.0);
  });
  double b = loss_value(z, [&](Graph& g, NodeId n) {
    return obj::uniform_ce(g, n);
  });
  CHECK(a == doctest::Approx(b).epsilon(1e-14));
}

TEST_CASE("label smoothing C=2 eps=0.1 at symmetric logits gives ln2") {
  Tensor z = Tensor::row({0.0, 0.0});
  double v = loss_value(z, [&](Graph& g, NodeId n) {
    return obj::ce_label_smooth(g, n, kY0, 0.1);
  });
  CHECK(v == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("uniform ce: value ln C at uniform, zero gradient at equal logits") {
  Tensor z = Tensor::row({0.7, 0.7, 0.7});
  double v = loss_value(z, [&](Graph& g, NodeId n) {
    return obj::uniform_ce(g, n);
  });
  CHECK(v == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  Tensor grad = logit_gradient(z, [&](Graph& g, NodeId n) {
    return obj::uniform_ce(g, n);
  });
  for (double x : grad.v) CHECK(std::abs(x) < 1e-15);
}

TEST_CASE("uniform ce gradient is yhat minus uniform") {
  // yhat = (0.75, 0.25) from logits (ln 3, 0)
  Tensor z = Tensor::row({std::log(3.0), 0.0});
  Tensor grad = logit_gradient(z, [&](Graph& g, NodeId n) {
    return obj::uniform_ce(g, n);
  });
  CHECK(grad.at(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(grad.at(0, 1) == doctest::Approx(-0.25).epsilon(1e-12));
}

TEST_CASE("obf at alpha=1 is the negated uniform-ce gradient") {
  Tensor z = Tensor::row({std::log(3.0), 0.0});
  std::vector<double> alpha = {1.0};
  Tensor obf = logit_gradient(z, [&](Graph& g, NodeId n) {
    return obj::obf_objective(g, n, kY0, alpha);
  });
  Tensor uni = logit_gradient(z, [&](Graph& g, NodeId n) {
    return obj::uniform_ce(g, n);
  });
  CHECK(obf.at(0, 0) == doctest::Approx(-uni.at(0, 0)).epsilon(1e-12));
  CHECK(obf.at(0, 1) == doctest::Approx(-uni.at(0, 1)).epsilon(1e-12));
  CHECK(std::abs(obf.at(0, 0) + uni.at(0, 0)) < 1e-12);
  CHECK(std::abs(obf.at(0, 1) + uni.at(0, 1)) < 1e-12);
}

TEST_CASE("obf at alpha=0 ignores non-target likelihoods") {
  std::vector<double> alpha = {0.0};
  Tensor z1 = Tensor::row({0.4, 1.0, -2.0});
  Tensor z2 = Tensor::row({0.4, -1.5, 3.0});  // non-target logits changed
  auto build = [&](Graph& g, NodeId n) {
    return obj::obf_objective(g, n, kY0, alpha);
  };
  Tensor g1 = logit_gradient(z1, build);
  Tensor g2 = logit_gradient(z2, build);
  for (std::size_t c = 0; c < 3; ++c)
    CHECK(g1.at(0, c) == doctest::Approx(g2.at(0, c)).epsilon(1e-15));
  // u - e_y exactly: (1/3 - 1, 1/3, 1/3)
  CHECK(g1.at(0, 0) == doctest::Approx(1.0 / 3.0 - 1.0).epsilon(1e-14));
  CHECK(g1.at(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("obf alpha=0 C=2 gradient is (-0.5, 0.5) regardless of yhat") {
  std::vector<double> alpha = {0.0};
  Tensor z = Tensor::row({2.3, -0.7});
  Tensor grad = logit_gradient(z, [&](Graph& g, NodeId n) {
    return obj::obf_objective(g, n, kY0, alpha);
  });
  CHECK(grad.at(0, 0) == doctest::Approx(-0.5).epsilon(1e-14));
  CHECK(grad.at(0, 1) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("obf gradient is affine in alpha") {
  Tensor z = Tensor::row({0.9, -0.3, 0.1});
  auto grad_at = [&](double a) {
    std::vector<double> alpha = {a};
    return logit_gradient(z, [&](Graph& g, NodeId n) {
      return obj::obf_objective(g, n, kY0, alpha);
    });
  };
  Tensor g0 = grad_at(0.0);
  Tensor g1 = grad_at(1.0);
  Tensor gm = grad_at(0.37);
  for (std::size_t c = 0; c < 3; ++c) {
    double expect = g0.at(0, c) + 0.37 * (g1.at(0, c) - g0.at(0, c));
    CHECK(gm.at(0, c) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("obf rejects alpha outside [0,1]") {
  Graph g;
  NodeId z = g.constant(Tensor::row({0.0, 0.0}));
  std::vector<double> bad = {1.5};
  CHECK_THROWS_AS(obj::obf_objective(g, z, kY0, bad), UsageError);
}

TEST_CASE("obf sigmoid analogue gradient matches its closed form") {
  Tensor z = Tensor::row({0.8, -0.4, 0.2});
  std::vector<double> alpha = {0.6};
  Tensor grad = logit_gradient(z, [&](Graph& g, NodeId n) {
    return obj::obf_objective_sigmoid(g, n, kY0, alpha);
  });
  auto sigma = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  for (std::size_t c = 0; c < 3; ++c) {
    double expect = 1.0 / 3.0 - 0.6 * sigma(z.at(0, c)) -
                    (c == 0 ? 1.0 - 0.6 : 0.0);
    CHECK(grad.at(0, c) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("dynamic alpha boundary and interior values") {
  CHECK(obj::dynamic_alpha(0.5, 1.0, 0.5) == 0.0);
  CHECK(obj::dynamic_alpha(1.0, 0.8, 0.5) == 0.8);
  CHECK(obj::dynamic_alpha(0.75, 1.0, 0.5) ==
        doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(std::abs(obj::dynamic_alpha(0.75, 1.0, 0.5) - 2.0 / 3.0) < 1e-12);
  // below the threshold stays zero
  CHECK(obj::dynamic_alpha(0.2, 1.0, 0.5) == 0.0);
  CHECK(obj::dynamic_alpha(1e-9, 1.0, 0.5) == 0.0);
}

TEST_CASE("dynamic alpha is monotone and continuous on (0,1]") {
  double prev = -1.0;
  for (int i = 1; i <= 1000; ++i) {
    double yhat = static_cast<double>(i) / 1000.0;
    double a = obj::dynamic_alpha(yhat, 0.7, 0.3);
    CHECK(a >= prev);
    prev = a;
  }
  // continuity near the threshold
  double below = obj::dynamic_alpha(0.3 - 1e-12, 0.7, 0.3);
  double above = obj::dynamic_alpha(0.3 + 1e-12, 0.7, 0.3);
  CHECK(std::abs(below - above) < 1e-9);
}

TEST_CASE("dynamic alpha rejects non-positive likelihoods") {
  CHECK_THROWS_AS(obj::dynamic_alpha(0.0, 1.0, 0.5), UsageError);
  CHECK_THROWS_AS(obj::dynamic_alpha(-0.1, 1.0, 0.5), UsageError);
}

TEST_CASE("loss builders survive graph storage reallocation") {
  // Build on a graph whose node vector has already grown (and will grow
  // again mid-builder), so stale extents would produce wrong shapes.
  Graph g;
  for (int i = 0; i < 300; ++i) g.constant(Tensor::row({1.0, 2.0}));
  Tensor z(3, 4, {0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8, -0.9, 1.0, 1.1, -1.2});
  NodeId zn = g.leaf(z);
  std::vector<std::int32_t> y = {0, 2, 3};
  std::vector<double> alpha = {0.3, 0.7, 1.0};
  for (NodeId loss :
       {obj::ce_loss(g, zn, y), obj::sigmoid_ce_loss(g, zn, y),
        obj::ce_label_smooth(g, zn, y, 0.1), obj::uniform_ce(g, zn),
        obj::obf_objective(g, zn, y, alpha),
        obj::obf_objective_sigmoid(g, zn, y, alpha)}) {
    CHECK(g.value(loss).is_scalar());
    CHECK(std::isfinite(g.value(loss).at(0, 0)));
    auto grads = g.backward(loss);
    CHECK(g.value(grads.back().second).rows == 3);
    CHECK(g.value(grads.back().second).cols == 4);
  }
}

TEST_CASE("all loss gradients match finite differences through a model") {
  model::ModelConfig cfg;
  cfg.input_dim = 4;
  cfg.hidden_dims = {6};
  cfg.num_classes = 3;
  ParameterVector params = model::init_params(cfg, 21);
  std::mt19937_64 rng(22);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor X(5, 4);
  for (double& x : X.v) x = normal(rng);
  std::vector<std::int32_t> y = {0, 2, 1, 1, 0};

  std::vector<obj::LossSpec> specs = {
      {obj::LossKind::kCe, 0.0},
      {obj::LossKind::kSigmoidCe, 0.0},
      {obj::LossKind::kCeLabelSmooth, 0.1},
  };
  for (const auto& spec : specs) {
    auto value_at = [&](const ParameterVector& p) {
      Graph g;
      auto fwd = model::forward_into(g, cfg, p, X);
      return g.value(obj::task_loss(g, fwd.logits, y, spec)).at(0, 0);
    };
    Graph g;
    auto fwd = model::forward_into(g, cfg, params, X);
    NodeId loss = obj::task_loss(g, fwd.logits, y, spec);
    auto grads = g.backward(loss);
    ParameterVector ad = ParameterVector::zeros_like(params);
    std::size_t off = 0;
    for (auto& [leaf, gn] : grads) {
      const Tensor& t = g.value(gn);
      for (std::size_t i = 0; i < t.size(); ++i) ad[off + i] = t.v[i];
      off += t.size();
    }
    ParameterVector fd = oracles::fd_gradient(value_at, params);
    CHECK(oracles::rel_error(ad, fd) < 1e-6);
  }
}
