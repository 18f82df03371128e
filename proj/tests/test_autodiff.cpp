#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "derex/autodiff.hpp"
#include "derex/layers.hpp"
#include "derex/stats.hpp"

using namespace derex;
using namespace derex::ad;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.data) x = scale * normal01(rng);
  return t;
}

Var sum_of_squares(const Var& v) { return sum(square(v)); }

// Loss that mixes outputs nonlinearly so every parameter matters.
Var probe_loss(const Var& out) {
  Tensor w(out->value.shape);
  for (std::size_t i = 0; i < w.numel(); ++i) w.data[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
  return add(sum(mul(out, constant(w))), scale(sum_of_squares(out), 0.5));
}

}  // namespace

TEST(Forward, LinearIdentityPassesInputThrough) {
  Model m{"m", {LayerSpec::linear(3, 3)}};
  ParamStore p;
  Tensor eye({3, 3}, 0.0);
  for (int i = 0; i < 3; ++i) eye(i, i) = 1.0;
  p.set("m.0.weight", eye);
  p.set("m.0.bias", Tensor({3}, 0.0));
  Tensor x({2, 3}, std::vector<double>{1, -2, 3, 0.5, 7, -9});
  EXPECT_EQ(forward(m, p, x, Mode::train), x);
}

TEST(Forward, BatchnormStandardizesFeatures) {
  Model m{"bn", {LayerSpec::batchnorm(2)}};
  ParamStore p;
  Rng rng(3);
  init_params(m, p, rng);
  // Per-feature mean 5, variance 4 (population).
  Tensor x({4, 2}, std::vector<double>{3, 7, 7, 3, 3, 7, 7, 3});
  Tensor y = forward(m, p, x, Mode::train);
  for (std::size_t f = 0; f < 2; ++f) {
    double mu = 0, var = 0;
    for (std::size_t i = 0; i < 4; ++i) mu += y(i, f) / 4;
    for (std::size_t i = 0; i < 4; ++i) var += (y(i, f) - mu) * (y(i, f) - mu) / 4;
    EXPECT_NEAR(mu, 0.0, 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-5);
  }
  // Running statistics moved 1% toward the batch statistics.
  EXPECT_NEAR(p.get("bn.0.running_mean").data[0], 0.05, 1e-12);
  EXPECT_NEAR(p.get("bn.0.running_var").data[0], 0.99 + 0.04, 1e-12);
}

TEST(Forward, BatchnormInvariantOnRandomBatches) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Model m{"bn", {LayerSpec::batchnorm(5)}};
    ParamStore p;
    init_params(m, p, rng);
    Tensor x = random_tensor({32, 5}, rng, 3.0);
    for (double& v : x.data) v += 2.0;
    Tensor y = forward(m, p, x, Mode::train);
    for (std::size_t f = 0; f < 5; ++f) {
      double mu = 0, var = 0;
      for (std::size_t i = 0; i < 32; ++i) mu += y(i, f) / 32;
      for (std::size_t i = 0; i < 32; ++i) var += (y(i, f) - mu) * (y(i, f) - mu) / 32;
      EXPECT_LE(std::abs(mu), 1e-6);
      EXPECT_NEAR(var, 1.0, 1e-5);
    }
  }
}

TEST(Forward, UncenteredBatchnormNormalizesSecondMoment) {
  Model m{"bn", {LayerSpec::batchnorm(1, false, false)}};
  ParamStore p;
  Rng rng(0);
  init_params(m, p, rng);
  Tensor x({3, 1}, std::vector<double>{1, 2, 3});
  Tensor y = forward(m, p, x, Mode::train);
  const double rms = std::sqrt((1.0 + 4.0 + 9.0) / 3.0 + kBatchNormEps);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(y.data[i], x.data[i] / rms, 1e-15);
}

TEST(Forward, TwoLayerTanhMatchesHandRolledPass) {
  Model m{"net", {LayerSpec::linear(4, 6), LayerSpec::tanh(), LayerSpec::linear(6, 2)}};
  ParamStore p;
  Rng rng(42);
  init_params(m, p, rng);
  Tensor x = random_tensor({5, 4}, rng);
  Tensor y = forward(m, p, x, Mode::eval);

  const Tensor &w1 = p.get("net.0.weight"), &b1 = p.get("net.0.bias");
  const Tensor &w2 = p.get("net.2.weight"), &b2 = p.get("net.2.bias");
  for (std::size_t n = 0; n < 5; ++n) {
    double hidden[6];
    for (std::size_t j = 0; j < 6; ++j) {
      double s = b1.data[j];
      for (std::size_t i = 0; i < 4; ++i) s += x(n, i) * w1(i, j);
      hidden[j] = std::tanh(s);
    }
    for (std::size_t k = 0; k < 2; ++k) {
      double s = b2.data[k];
      for (std::size_t j = 0; j < 6; ++j) s += hidden[j] * w2(j, k);
      EXPECT_NEAR(y(n, k), s, 1e-14);
    }
  }
}

TEST(Forward, ShapeMismatchNamesLayer) {
  Model m{"m", {LayerSpec::linear(3, 2), LayerSpec::linear(4, 1)}};
  ParamStore p;
  Rng rng(0);
  init_params(m, p, rng);
  try {
    forward(m, p, Tensor({2, 3}, 1.0), Mode::train);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1 (linear)"), std::string::npos) << e.what();
  }
}

TEST(Forward, NonFiniteActivationNamesLayer) {
  Model m{"m", {LayerSpec::linear(1, 1), LayerSpec::relu()}};
  ParamStore p;
  p.set("m.0.weight", Tensor({1, 1}, 1e308));
  p.set("m.0.bias", Tensor({1}, 0.0));
  try {
    forward(m, p, Tensor({1, 1}, 1e10), Mode::train);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos) << e.what();
  }
}

TEST(Forward, EvalModeIsBatchIndependent) {
  Model m{"m", {LayerSpec::linear(3, 4), LayerSpec::batchnorm(4), LayerSpec::relu(), LayerSpec::linear(4, 2)}};
  ParamStore p;
  Rng rng(9);
  init_params(m, p, rng);
  // Make the running statistics non-trivial first.
  for (int i = 0; i < 5; ++i) forward(m, p, random_tensor({8, 3}, rng), Mode::train);
  Tensor big = random_tensor({6, 3}, rng);
  Tensor full = forward(m, p, big, Mode::eval);
  Tensor again = forward(m, p, big, Mode::eval);
  EXPECT_EQ(full, again);
  for (std::size_t n = 0; n < 6; ++n) {
    Tensor single({1, 3}, std::vector<double>(big.data.begin() + 3 * n, big.data.begin() + 3 * n + 3));
    Tensor y = forward(m, p, single, Mode::eval);
    EXPECT_EQ(y.data[0], full(n, 0));
    EXPECT_EQ(y.data[1], full(n, 1));
  }
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  Model m{"m", {LayerSpec::linear(3, 4), LayerSpec::tanh(), LayerSpec::linear(4, 2)}};
  ParamStore p;
  Rng rng(1);
  init_params(m, p, rng);
  ForwardCache cache;
  Tensor y = forward(m, p, random_tensor({5, 3}, rng), Mode::train, &cache);
  ParamStore g = backward(cache, Tensor(y.shape, 0.0));
  EXPECT_EQ(g.size(), 4u);
  for (const auto& [name, t] : g.items())
    for (double v : t.data) EXPECT_EQ(v, 0.0) << name;
}

TEST(Backward, MissingCacheFails) {
  ForwardCache cache;
  EXPECT_THROW(backward(cache, Tensor({1}, 1.0)), Error);
}

TEST(Backward, LinearGradientMatchesFiniteDifferences) {
  Model m{"m", {LayerSpec::linear(3, 2)}};
  ParamStore p;
  Rng rng(5);
  init_params(m, p, rng);
  Tensor x = random_tensor({4, 3}, rng);
  Tensor up = random_tensor({4, 2}, rng);
  ForwardCache cache;
  forward(m, p, x, Mode::train, &cache);
  ParamStore g = backward(cache, up);
  const double h = 1e-5;
  for (const std::string& name : p.trainable_names()) {
    for (std::size_t k = 0; k < p.get(name).numel(); ++k) {
      ParamStore q = p;
      q.get(name).data[k] += h;
      Tensor yp = forward(m, q, x, Mode::train);
      q.get(name).data[k] -= 2 * h;
      Tensor ym = forward(m, q, x, Mode::train);
      double num = 0;
      for (std::size_t i = 0; i < up.numel(); ++i) num += up.data[i] * (yp.data[i] - ym.data[i]) / (2 * h);
      const double ana = g.get(name).data[k];
      EXPECT_LE(std::abs(ana - num) / std::max(1.0, std::abs(ana)), 1e-4) << name << "[" << k << "]";
    }
  }
}

TEST(StopGradient, ValuePassesThrough) {
  Var x = leaf(Tensor({3}, std::vector<double>{1.5, -2, 0}));
  EXPECT_EQ(stop_gradient(x)->value, x->value);
}

TEST(StopGradient, MonomialDerivative) {
  // d/dt [f(t) * sg(f(t))] with f(t) = t^3 is sg(f) * f'(t) = t^3 * 3 t^2.
  for (double t : {-1.3, 0.4, 2.0}) {
    Var th = leaf(Tensor::scalar(t));
    Var f = mul(th, mul(th, th));
    Var l = sum(mul(f, stop_gradient(f)));
    backward(l);
    EXPECT_NEAR(th->grad.data[0], t * t * t * 3 * t * t, 1e-12);
  }
}

TEST(StopGradient, BlocksFlow) {
  Var th = leaf(Tensor::scalar(1.7));
  Var l = sum(stop_gradient(square(th)));
  backward(l);
  EXPECT_EQ(th->grad.numel(), 0u);  // never reached
  EXPECT_FALSE(l->requires_grad);
}

TEST(GradCheck, QuadraticLossOnLinearModel) {
  Model m{"m", {LayerSpec::linear(4, 3)}};
  ParamStore p;
  Rng rng(11);
  init_params(m, p, rng);
  Tensor x = random_tensor({6, 4}, rng);
  EXPECT_LE(grad_check(m, p, sum_of_squares, x, 1e-5), 1e-6);
}

TEST(GradCheck, ConstantLossHasZeroError) {
  Model m{"m", {LayerSpec::linear(2, 2)}};
  ParamStore p;
  Rng rng(0);
  init_params(m, p, rng);
  auto constant_loss = [](const Var& out) { return sum(scale(out, 0.0)); };
  EXPECT_EQ(grad_check(m, p, constant_loss, Tensor({3, 2}, 1.0), 1e-5), 0.0);
}

TEST(GradCheck, ReluKinkWithinStepIsNotReported) {
  // Pre-activation 3e-6 sits inside the +-1e-5 probe on the bias.
  Model m{"m", {LayerSpec::linear(1, 1), LayerSpec::relu()}};
  ParamStore p;
  Rng rng(0);
  init_params(m, p, rng);
  p.set("m.0.weight", Tensor({1, 1}, 0.0));
  p.set("m.0.bias", Tensor({1}, 3e-6));
  const Tensor x({1, 1}, 1.0);
  auto identity_sum = [](const Var& out) { return sum(out); };
  EXPECT_LE(grad_check(m, p, identity_sum, x, 1e-5), 1e-9);
}

TEST(GradCheck, WrongGradientIsStillReported) {
  // Stop-gradient halves the analytic derivative of y^2 while the loss value
  // is unchanged, so finite differences disagree by a factor of two.
  Model m{"m", {LayerSpec::linear(3, 2)}};
  ParamStore p;
  Rng rng(5);
  init_params(m, p, rng);
  const Tensor x = random_tensor({4, 3}, rng);
  auto half = [](const Var& y) { return sum(mul(y, stop_gradient(y))); };
  EXPECT_GT(grad_check(m, p, half, x, 1e-5), 0.1);
}

TEST(GradCheck, StopGradientLossMatchesDetachedDerivative) {
  // L = sum(y * sg(y)), y = x W + b. Detached derivative: dL/dW = x^T y.
  Model m{"m", {LayerSpec::linear(3, 2)}};
  ParamStore p;
  Rng rng(17);
  init_params(m, p, rng);
  Tensor x = random_tensor({5, 3}, rng);
  Binding b(p);
  Var y = apply(m, b, constant(x), Mode::train);
  backward(sum(mul(y, stop_gradient(y))));
  ParamStore g = b.gradients();
  const Tensor& gw = g.get("m.0.weight");
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double expect = 0;
      for (std::size_t n = 0; n < 5; ++n) expect += x(n, i) * y->value(n, j);
      EXPECT_NEAR(gw(i, j), expect, 1e-12);
    }
  // Full derivative is twice the detached one.
  Binding b2(p);
  Var y2 = apply(m, b2, constant(x), Mode::train);
  backward(sum(mul(y2, y2)));
  EXPECT_NEAR(b2.gradients().get("m.0.weight")(0, 0), 2 * gw(0, 0), 1e-12);
}

struct Combo {
  const char* label;
  Model model;
  Shape input;
};

TEST(GradCheck, EveryLayerComboOnTenSeeds) {
  std::vector<Combo> combos = {
      {"mlp_tanh", {"a", {LayerSpec::linear(5, 8), LayerSpec::tanh(), LayerSpec::linear(8, 3)}}, {7, 5}},
      {"mlp_relu_bn",
       {"b", {LayerSpec::linear(5, 8), LayerSpec::relu(), LayerSpec::linear(8, 4), LayerSpec::batchnorm(4)}},
       {9, 5}},
      {"bn_uncentered_frozen", {"c", {LayerSpec::linear(4, 3), LayerSpec::batchnorm(3, false, false)}}, {6, 4}},
      {"bn_centered_frozen", {"c2", {LayerSpec::linear(4, 3), LayerSpec::batchnorm(3, true, false)}}, {6, 4}},
      {"conv",
       {"d",
        {LayerSpec::conv2d(3, 2, 3, 2), LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::linear(2 * 3 * 3, 3)}},
       {2, 3, 8, 8}},
      {"rnn", {"e", {LayerSpec::rnn(3, 4), LayerSpec::linear(4, 2)}}, {3, 5, 3}},
  };
  for (const Combo& c : combos) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      ParamStore p;
      init_params(c.model, p, rng);
      Tensor x = random_tensor(c.input, rng);
      const double err = grad_check(c.model, p, probe_loss, x, 1e-5);
      EXPECT_LE(err, 1e-4) << c.label << " seed " << seed;
    }
  }
}

TEST(Ops, MatmulTransposedMatchesExplicitTranspose) {
  Rng rng(4);
  Tensor a = random_tensor({5, 3}, rng), b = random_tensor({5, 2}, rng);
  Var a1 = leaf(a), b1 = leaf(b), a2 = leaf(a), b2 = leaf(b);
  Var c1 = matmul_tn(a1, b1);
  Var c2 = matmul(transpose(a2), b2);
  for (std::size_t i = 0; i < c1->value.numel(); ++i) EXPECT_NEAR(c1->value.data[i], c2->value.data[i], 1e-14);
  backward(probe_loss(c1));
  backward(probe_loss(c2));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a1->grad.data[i], a2->grad.data[i], 1e-13);
  for (std::size_t i = 0; i < b.numel(); ++i) EXPECT_NEAR(b1->grad.data[i], b2->grad.data[i], 1e-13);
}

TEST(Ops, GatherAndConcatGradients) {
  ParamStore p;
  Rng rng(8);
  p.set("t", random_tensor({4, 3}, rng));
  auto loss = [](Binding& b) {
    Var t = b.param("t");
    Var g = gather_rows(t, {2, 0, 2});
    return probe_loss(concat_rows({g, t}));
  };
  EXPECT_LE(grad_check(loss, p), 1e-6);
}

TEST(Ops, ConcatColsLayoutAndGradients) {
  Var a = constant(Tensor({2, 1}, std::vector<double>{1, 2}));
  Var b = constant(Tensor({2, 2}, std::vector<double>{3, 4, 5, 6}));
  EXPECT_EQ(concat_cols({a, b})->value.data, (std::vector<double>{1, 3, 4, 2, 5, 6}));
  EXPECT_THROW(concat_cols({a, constant(Tensor({3, 1}))}), ShapeError);

  ParamStore p;
  Rng rng(9);
  p.set("u", random_tensor({3, 2}, rng));
  p.set("v", random_tensor({3, 4}, rng));
  auto loss = [](Binding& bd) { return probe_loss(concat_cols({bd.param("u"), bd.param("v"), bd.param("u")})); };
  EXPECT_LE(grad_check(loss, p), 1e-6);
}

TEST(Sgd, MomentumStepByHand) {
  ParamStore p, g;
  p.set("w", Tensor({2}, std::vector<double>{1.0, -1.0}));
  g.set("w", Tensor({2}, std::vector<double>{0.5, 2.0}));
  Sgd opt{0.1, 0.9};
  opt.step(p, g);
  EXPECT_NEAR(p.get("w").data[0], 1.0 - 0.1 * 0.5, 1e-15);
  opt.step(p, g);
  // velocity = 0.9 * 0.5 + 0.5 = 0.95
  EXPECT_NEAR(p.get("w").data[0], 0.95 - 0.1 * 0.95, 1e-15);
  EXPECT_NEAR(p.get("w").data[1], -1.0 - 0.1 * 2.0 - 0.1 * 3.8, 1e-15);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Model m{"enc", {LayerSpec::conv2d(3, 4, 3, 2), LayerSpec::flatten(), LayerSpec::linear(36, 5),
                  LayerSpec::batchnorm(5)}};
  ParamStore p;
  p.seed = 1234;
  Rng rng(p.seed);
  init_params(m, p, rng);
  p.get("enc.3.running_var").data[2] = 1.0 / 3.0;
  std::stringstream ss;
  save_params(ss, p);
  ParamStore q = load_params(ss);
  EXPECT_EQ(q.seed, 1234u);
  ASSERT_EQ(q.names(), p.names());
  for (const std::string& n : p.names()) EXPECT_EQ(q.get(n), p.get(n)) << n;
}

TEST(Checkpoint, RejectsGarbage) {
  std::stringstream ss("not a checkpoint");
  EXPECT_THROW(load_params(ss), Error);
}
