#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "dwgl/autodiff.hpp"
#include "dwgl/network.hpp"
#include "dwgl/optim.hpp"
#include "dwgl/rng.hpp"
#include "support/oracles.hpp"

using namespace dwgl;
using T64 = BasicTensor<double>;

namespace {

T64 random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  T64 t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

// Builds a scalar from `inputs` on a fresh tape; checks every input gradient
// against central differences.
using Builder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

void expect_gradients_match(const std::vector<T64>& inputs, const Builder& build) {
  Tape<double> tape;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.parameter("p" + std::to_string(i), inputs[i]));
  const Var loss = build(tape, vars);
  tape.backward(loss);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& g = tape.grad(vars[i]);
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      auto f = [&](const std::vector<double>& x) {
        std::vector<T64> in = inputs;
        in[i] = T64(inputs[i].shape(), x);
        Tape<double> t;
        std::vector<Var> v;
        for (const auto& tensor : in) v.push_back(t.constant(tensor));
        return t.value(build(t, v))[0];
      };
      const double fd = oracle::central_difference(f, inputs[i].values(), j);
      EXPECT_TRUE(oracle::close(g[j], fd, 1e-3, 1e-5)) << "input " << i << " entry " << j << ": " << g[j] << " vs " << fd;
    }
  }
}

}  // namespace

TEST(Tensor, RejectsZeroExtentAndLengthMismatch) {
  EXPECT_THROW(Tensor(Shape{2, 0}), Error);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<float>(3)), Error);
  const Tensor t(Shape{2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.at(1, 2), 1.5f);
}

TEST(Tensor, ScalarIsASingleElementVector) {
  const Tensor s = Tensor::scalar(2.0f);
  EXPECT_EQ(s.shape(), (Shape{1}));
  EXPECT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0], 2.0f);
}

TEST(Tape, BackwardTwiceIsAnError) {
  Tape<double> tape;
  const Var x = tape.parameter("x", T64::scalar(2.0));
  const Var y = mul(tape, x, x);
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), Error);
}

TEST(Tape, GradBeforeBackwardIsAnError) {
  Tape<double> tape;
  const Var x = tape.parameter("x", T64::scalar(2.0));
  EXPECT_THROW((void)tape.grad(x), Error);
}

TEST(Tape, NonScalarLossIsAnError) {
  Tape<double> tape;
  const Var x = tape.parameter("x", T64(Shape{2}, 1.0));
  EXPECT_THROW(tape.backward(x), Error);
}

TEST(Tape, SquareHasGradientTwoX) {
  Tape<double> tape;
  const Var x = tape.parameter("x", T64::scalar(3.0));
  tape.backward(mul(tape, x, x));
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 6.0);
}

TEST(Tape, FanOutAccumulates) {
  // y = x + x + x has dy/dx = 3.
  Tape<double> tape;
  const Var x = tape.parameter("x", T64::scalar(1.25));
  const Var y = eltwise_add(tape, eltwise_add(tape, x, x), x);
  tape.backward(y);
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 3.0);
}

TEST(Tape, VisitsInReverseRecordingOrder) {
  Tape<double> tape;
  const Var x = tape.parameter("x", T64::scalar(0.5));
  const Var a = scale(tape, x, 2.0);
  const Var b = mul(tape, a, x);
  const Var c = sum(tape, b);
  tape.backward(c);
  const std::vector<std::size_t> expected = {c.id, b.id, a.id};
  EXPECT_EQ(tape.visit_order(), expected);
}

TEST(Tape, UnreachableParameterHasZeroGradient) {
  Tape<double> tape;
  const Var x = tape.parameter("x", T64::scalar(1.0));
  const Var unused = tape.parameter("unused", T64(Shape{3}, 4.0));
  tape.backward(mul(tape, x, x));
  for (double g : tape.grad(unused).values()) EXPECT_EQ(g, 0.0);
  EXPECT_EQ(tape.parameter_grads().size(), 2u);
}

TEST(Conv2d, ShapeMismatchNamesTheDimension) {
  Tape<float> tape;
  const Var x = tape.constant(Tensor(Shape{1, 3, 5, 5}));
  const Var w = tape.constant(Tensor(Shape{4, 2, 3, 3}));
  const Var b = tape.constant(Tensor(Shape{4}));
  try {
    conv2d(tape, x, w, b, 1, 1);
    FAIL() << "expected a shape error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::shape);
    EXPECT_NE(std::string(e.what()).find("dim 1"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, MatchesDirectLoopOracle) {
  Rng rng(11);
  const T64 x = random_tensor({2, 3, 6, 5}, rng);
  const T64 w = random_tensor({4, 3, 3, 3}, rng);
  const T64 b = random_tensor({4}, rng);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      Tape<double> tape;
      const T64& y = tape.value(conv2d(tape, tape.constant(x), tape.constant(w), tape.constant(b), stride, pad));
      const std::size_t oh = (6 + 2 * pad - 3) / stride + 1, ow = (5 + 2 * pad - 3) / stride + 1;
      ASSERT_EQ(y.shape(), (Shape{2, 4, oh, ow}));
      for (std::size_t n = 0; n < 2; ++n) {
        for (std::size_t f = 0; f < 4; ++f) {
          for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
              double s = b[f];
              for (std::size_t c = 0; c < 3; ++c) {
                for (std::size_t ky = 0; ky < 3; ++ky) {
                  for (std::size_t kx = 0; kx < 3; ++kx) {
                    const long yy = static_cast<long>(i * stride + ky) - static_cast<long>(pad);
                    const long xx = static_cast<long>(j * stride + kx) - static_cast<long>(pad);
                    if (yy < 0 || xx < 0 || yy >= 6 || xx >= 5) continue;
                    s += w.at(f, c, ky, kx) * x.at(n, c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                  }
                }
              }
              EXPECT_NEAR(y.at(n, f, i, j), s, 1e-12);
            }
          }
        }
      }
    }
  }
}

TEST(Gradients, Conv2dAllStridesAndPads) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(seed);
    const std::vector<T64> in = {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng),
                                 random_tensor({3}, rng), random_tensor({2, 3, 3, 3}, rng)};
    const std::size_t stride = 1 + seed % 2, pad = seed / 2;
    expect_gradients_match(in, [&](Tape<double>& t, const std::vector<Var>& v) {
      const Var y = conv2d(t, v[0], v[1], v[2], stride, pad);
      // Weight the output with a fixed random tensor of the right shape.
      const auto& ys = t.value(y).shape();
      Rng r2(100 + seed);
      const Var m = t.constant(random_tensor(ys, r2));
      return sum(t, mul(t, y, m));
    });
  }
}

TEST(Gradients, ReluAwayFromKink) {
  Rng rng(5);
  T64 x = random_tensor({4, 6}, rng);
  for (auto& v : x.values()) v += v > 0 ? 0.1 : -0.1;
  const T64 m = random_tensor({4, 6}, rng);
  expect_gradients_match({x}, [&](Tape<double>& t, const std::vector<Var>& v) {
    return sum(t, mul(t, relu(t, v[0]), t.constant(m)));
  });
}

TEST(Gradients, ReluAtZeroUsesZeroSubgradient) {
  Tape<double> tape;
  const Var x = tape.parameter("x", T64(Shape{1}, 0.0));
  tape.backward(sum(tape, relu(tape, x)));
  EXPECT_EQ(tape.grad(x)[0], 0.0);
}

TEST(Gradients, EltwiseAvgpoolLinearSoftmax) {
  Rng rng(9);
  const std::vector<T64> in = {random_tensor({3, 4, 2, 2}, rng), random_tensor({3, 4, 2, 2}, rng),
                               random_tensor({4, 5}, rng), random_tensor({5}, rng)};
  const std::vector<int> labels = {0, 4, 2};
  expect_gradients_match(in, [&](Tape<double>& t, const std::vector<Var>& v) {
    const Var pooled = avgpool_global(t, eltwise_add(t, v[0], v[1]));
    return softmax_xent(t, linear(t, pooled, v[2], v[3]), labels);
  });
}

TEST(Gradients, ScaleAndMul) {
  Rng rng(3);
  const std::vector<T64> in = {random_tensor({7}, rng), random_tensor({7}, rng)};
  expect_gradients_match(in, [](Tape<double>& t, const std::vector<Var>& v) {
    return sum(t, scale(t, mul(t, v[0], v[1]), -1.7));
  });
}

// Runs `net`'s layer list on a double tape with parameters taken from `params`.
double network_loss(const NetworkGraph& net, const std::map<std::string, T64>& params, const T64& images,
                    const std::vector<int>& labels) {
  Tape<double> t;
  std::map<std::string, Var> out;
  Var logits;
  for (const auto& l : net.layers) {
    switch (l.kind) {
      case LayerKind::input: out[l.id] = t.constant(images); break;
      case LayerKind::conv:
        out[l.id] = conv2d(t, out.at(l.inputs[0]), t.constant(params.at(l.weight_name())),
                           t.constant(params.at(l.bias_name())), l.stride, l.pad);
        break;
      case LayerKind::relu: out[l.id] = relu(t, out.at(l.inputs[0])); break;
      case LayerKind::eltwise: out[l.id] = eltwise_add(t, out.at(l.inputs[0]), out.at(l.inputs[1])); break;
      case LayerKind::avgpool: out[l.id] = avgpool_global(t, out.at(l.inputs[0])); break;
      case LayerKind::linear:
        out[l.id] = linear(t, out.at(l.inputs[0]), t.constant(params.at(l.weight_name())),
                           t.constant(params.at(l.bias_name())));
        break;
      case LayerKind::loss: logits = out.at(l.inputs[0]); break;
    }
  }
  return t.value(softmax_xent(t, logits, labels))[0];
}

TEST(Gradients, WholeNetworkInDouble) {
  NetworkConfig cfg;
  cfg.stages = {{2, 1}, {3, 1}};
  cfg.height = cfg.width = 6;
  cfg.classes = 3;
  const NetworkGraph net = build(cfg, 4);
  Rng rng(8);
  const T64 images = random_tensor({2, 3, 6, 6}, rng);
  const std::vector<int> labels = {1, 2};
  Tape<double> tape;
  tape.backward(softmax_xent(tape, forward(tape, net, images), labels));
  const auto grads = tape.parameter_grads();
  std::map<std::string, T64> params;
  for (const auto& [name, p] : net.params) params.emplace(name, p.cast<double>());
  for (const auto& [name, p] : params) {
    // A handful of entries per tensor keeps this fast.
    for (std::size_t j = 0; j < p.size(); j += std::max<std::size_t>(1, p.size() / 5)) {
      auto f = [&, name = name](const std::vector<double>& x) {
        auto perturbed = params;
        perturbed.at(name) = T64(p.shape(), x);
        return network_loss(net, perturbed, images, labels);
      };
      const double fd = oracle::central_difference(f, p.values(), j);
      EXPECT_TRUE(oracle::close(grads.at(name)[j], fd, 1e-3, 1e-5)) << name << "[" << j << "]";
    }
  }
}

TEST(SoftmaxXent, BadLabelIsARangeError) {
  Tape<float> tape;
  const Var logits = tape.constant(Tensor(Shape{2, 3}));
  EXPECT_THROW(softmax_xent(tape, logits, {0, 3}), Error);
}

TEST(SoftmaxXent, UniformLogitsGiveLogClasses) {
  Tape<double> tape;
  const Var logits = tape.constant(T64(Shape{4, 10}, 0.3));
  EXPECT_NEAR(tape.value(softmax_xent(tape, logits, {0, 1, 2, 3}))[0], std::log(10.0), 1e-12);
}

TEST(Optim, SgdStepWithDecoupledDecay) {
  ParameterMap p;
  p.emplace("w", Tensor(Shape{2}, std::vector<float>{1.0f, -2.0f}));
  GradientMap<float> g;
  g.emplace("w", Tensor(Shape{2}, std::vector<float>{0.5f, 0.5f}));
  sgd_step(p, g, 0.1f, 0.01f);
  EXPECT_FLOAT_EQ(p.at("w")[0], 1.0f - 0.1f * (0.5f + 0.01f));
  EXPECT_FLOAT_EQ(p.at("w")[1], -2.0f - 0.1f * (0.5f - 0.02f));
  EXPECT_THROW(sgd_step(p, g, 0.0f, 0.0f), Error);
}
