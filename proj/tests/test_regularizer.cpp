#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dwgl/network.hpp"
#include "dwgl/regularizer.hpp"
#include "support/oracles.hpp"

using namespace dwgl;

namespace {

NetworkGraph small_net(std::uint64_t seed = 1) {
  NetworkConfig cfg;
  cfg.stages = {{4, 1}, {6, 1}};
  cfg.height = cfg.width = 6;
  cfg.classes = 3;
  return build(cfg, seed);
}

// Penalty of a double copy of the parameters, straight from the definition.
double penalty_oracle(const NetworkGraph& net, const std::map<std::string, std::vector<double>>& params,
                      const RegularizerConfig& cfg) {
  double total = 0.0;
  for (const auto& l : net.layers) {
    if (l.kind != LayerKind::conv || !l.regularized) continue;
    const auto& w = params.at(l.weight_name());
    const auto& b = params.at(l.bias_name());
    const std::size_t per = w.size() / l.filters;
    std::vector<double> f(l.filters, 1.0);
    if (cfg.directed) {
      const auto o = oracle::coefficients(l.filters, cfg.steepness);
      for (std::size_t k = 0; k < l.filters; ++k) f[k] = static_cast<double>(o[k]) * (cfg.rescale ? l.filters : 1.0);
    }
    for (std::size_t k = 0; k < l.filters; ++k) {
      double ss = b[k] * b[k];
      for (std::size_t j = 0; j < per; ++j) ss += w[k * per + j] * w[k * per + j];
      total += f[k] * std::sqrt(ss);
    }
  }
  return cfg.lambda_g * total;
}

}  // namespace

TEST(Coefficients, MatchDirectEvaluation) {
  for (std::size_t K : {1u, 2u, 3u, 5u, 8u, 16u, 64u, 512u, 2048u}) {
    const auto f = directed_coefficients(K, 9.22);
    const auto o = oracle::coefficients(K);
    for (std::size_t k = 0; k < K; ++k) {
      EXPECT_TRUE(oracle::close(f[k], static_cast<double>(o[k]), 1e-12, 0.0)) << "K=" << K << " k=" << k + 1;
    }
  }
}

TEST(Coefficients, FiveFiltersRatioAndSum) {
  const auto f = directed_coefficients(5, 9.22);
  EXPECT_NEAR(f[4] / f[0], std::exp(9.22 * 4.0 / 5.0), 1e-9 * std::exp(7.376));
  EXPECT_NEAR(f[4] / f[0], 1598.0, 1.0);
  EXPECT_NEAR(std::accumulate(f.begin(), f.end(), 0.0), 1.0, 1e-12);
}

TEST(Coefficients, LargeLayersApproachTheSameSpan) {
  for (std::size_t K : {64u, 512u, 2048u}) {
    const auto f = directed_coefficients(K, 9.22);
    const double span = std::exp(9.22 * static_cast<double>(K - 1) / static_cast<double>(K));
    EXPECT_NEAR(f.back() / f.front(), span, 1e-9 * span) << K;
    EXPECT_NEAR(f.back() / f.front(), std::exp(9.22), 0.15 * std::exp(9.22)) << K;
  }
}

TEST(Coefficients, SingleFilterIsOne) { EXPECT_DOUBLE_EQ(directed_coefficients(1, 9.22)[0], 1.0); }

TEST(Coefficients, HugeKStaysFinite) {
  const auto f = directed_coefficients(1 << 16, 9.22);
  for (double v : f) ASSERT_TRUE(std::isfinite(v) && v > 0.0);
  EXPECT_NEAR(std::accumulate(f.begin(), f.end(), 0.0), 1.0, 1e-9);
}

TEST(Coefficients, DecreasingMirrors) {
  const auto up = directed_coefficients(7, 9.22);
  const auto down = directed_coefficients(7, 9.22, Direction::decreasing);
  for (std::size_t k = 0; k < 7; ++k) EXPECT_DOUBLE_EQ(up[k], down[6 - k]);
}

TEST(Coefficients, OutOfRangeIndexIsAnError) {
  EXPECT_THROW(coeff(0, 4, 9.22), Error);
  EXPECT_THROW(coeff(5, 4, 9.22), Error);
  EXPECT_THROW(directed_coefficients(0, 9.22), Error);
  EXPECT_THROW(directed_coefficients(4, 0.0), Error);
}

TEST(Coefficients, PlainAndRescaled) {
  RegularizerConfig cfg;
  cfg.directed = false;
  for (double v : coefficients(6, cfg)) EXPECT_EQ(v, 1.0);
  cfg.directed = true;
  cfg.rescale = true;
  const auto f = coefficients(6, cfg);
  EXPECT_NEAR(std::accumulate(f.begin(), f.end(), 0.0), 6.0, 1e-12);
}

TEST(GroupNorm, IncludesBias) {
  const std::vector<float> w = {3.0f, 0.0f};
  EXPECT_DOUBLE_EQ(group_norm<float>(w, 4.0f), 5.0);
  const std::vector<float> zero = {0.0f, 0.0f};
  EXPECT_DOUBLE_EQ(group_norm<float>(zero, 0.0f), 0.0);
}

TEST(Penalty, TwoUnitFiltersSumToOne) {
  // K=2, both norms 1: directed penalty is f(1)+f(2) = 1, plain is 2.
  GraphBuilder b(1, 3, 3, 2);
  auto x = b.conv("c", "input", 2, 1, 1, 0);
  x = b.avgpool("p", x);
  x = b.linear("fc", x, 2);
  b.loss("loss", x);
  NetworkGraph net = b.finish(1);
  net.layer("c").regularized = true;
  net.params.at("c.weight") = Tensor(Shape{2, 1, 1, 1}, std::vector<float>{1.0f, -1.0f});
  net.params.at("c.bias") = Tensor(Shape{2});
  RegularizerConfig cfg;
  EXPECT_NEAR(group_penalty(net, cfg), 1.0, 1e-12);
  cfg.directed = false;
  EXPECT_NEAR(group_penalty(net, cfg), 2.0, 1e-12);
}

TEST(Penalty, MatchesOracleOnBuiltNetwork) {
  const NetworkGraph net = small_net(3);
  std::map<std::string, std::vector<double>> params;
  for (const auto& [n, p] : net.params) params[n] = std::vector<double>(p.values().begin(), p.values().end());
  for (bool directed : {true, false}) {
    RegularizerConfig cfg;
    cfg.lambda_g = 0.3;
    cfg.directed = directed;
    EXPECT_NEAR(cfg.lambda_g * group_penalty(net, cfg), penalty_oracle(net, params, cfg), 1e-9);
  }
}

TEST(Penalty, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const NetworkGraph net = small_net(seed);
    RegularizerConfig cfg;
    cfg.lambda_g = 0.7;
    cfg.directed = seed % 2 == 0;
    cfg.rescale = seed == 4;
    const auto grads = penalty_gradient(net, cfg);
    std::map<std::string, std::vector<double>> params;
    for (const auto& [n, p] : net.params) params[n] = std::vector<double>(p.values().begin(), p.values().end());
    for (const auto& [name, g] : grads) {
      for (std::size_t j = 0; j < g.size(); j += 3) {
        auto f = [&, name = name](const std::vector<double>& x) {
          auto p2 = params;
          p2.at(name) = x;
          return penalty_oracle(net, p2, cfg);
        };
        const double fd = oracle::central_difference(f, params.at(name), j);
        EXPECT_TRUE(oracle::close(g[j], fd, 1e-3, 1e-5)) << name << "[" << j << "] " << g[j] << " vs " << fd;
      }
    }
  }
}

TEST(Penalty, ZeroFilterHasZeroSubgradient) {
  NetworkGraph net = small_net();
  const auto* c = net.convs().front();
  Tensor& w = net.params.at(c->weight_name());
  const std::size_t per = w.size() / c->filters;
  for (std::size_t j = 0; j < per; ++j) w[j] = 0.0f;
  net.params.at(c->bias_name())[0] = 0.0f;
  RegularizerConfig cfg;
  cfg.lambda_g = 1.0;
  const auto g = penalty_gradient(net, cfg);
  for (std::size_t j = 0; j < per; ++j) EXPECT_EQ(g.at(c->weight_name())[j], 0.0f);
}

TEST(Penalty, UnregularizedLayersGetNoGroupGradient) {
  NetworkGraph net = small_net();
  for (auto& l : net.layers) l.regularized = false;
  RegularizerConfig cfg;
  cfg.lambda_g = 1.0;
  EXPECT_TRUE(penalty_gradient(net, cfg).empty());
  EXPECT_EQ(group_penalty(net, cfg), 0.0);
}

TEST(Penalty, CoupledL2AddsLambdaW) {
  const NetworkGraph net = small_net();
  RegularizerConfig cfg;
  cfg.lambda = 0.01;
  cfg.l2 = L2Mode::coupled;
  const auto g = penalty_gradient(net, cfg);
  const Tensor& w = net.params.at("fc.weight");
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_FLOAT_EQ(g.at("fc.weight")[i], 0.01f * w[i]);
}

TEST(Objective, SumsTheThreeTerms) {
  const NetworkGraph net = small_net();
  RegularizerConfig cfg;
  cfg.lambda = 0.002;
  cfg.lambda_g = 0.05;
  EXPECT_NEAR(total_objective(1.5, net, cfg), 1.5 + 0.002 * l2_term(net) + 0.05 * group_penalty(net, cfg), 1e-12);
  double ss = 0.0;
  for (const auto& [n, p] : net.params) {
    for (float v : p.values()) ss += static_cast<double>(v) * v;
  }
  EXPECT_NEAR(l2_term(net), 0.5 * ss, 1e-9);
}

TEST(Proximal, ShrinksNormsByThresholdAndClampsAtZero) {
  NetworkGraph net = small_net(2);
  RegularizerConfig cfg;
  cfg.lambda_g = 1.0;
  const auto* c = net.convs().front();
  const auto before = filter_norms(net, *c);
  const auto f = coefficients(c->filters, cfg);
  const double lr = 0.5;
  proximal_step(net, cfg, lr);
  const auto after = filter_norms(net, *net.convs().front());
  for (std::size_t k = 0; k < before.size(); ++k) {
    EXPECT_NEAR(after[k], std::max(0.0, before[k] - lr * f[k]), 1e-5);
  }
  // A threshold above every norm zeroes the layer exactly.
  proximal_step(net, cfg, 1e6);
  for (double n : filter_norms(net, *net.convs().front())) EXPECT_EQ(n, 0.0);
}

TEST(Config, ValidateRejectsNegativeValues) {
  RegularizerConfig cfg;
  cfg.lambda_g = -1.0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.steepness = 0.0;
  EXPECT_THROW(cfg.validate(), Error);
}
