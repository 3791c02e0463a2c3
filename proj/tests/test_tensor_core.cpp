#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "mscnn/layers.hpp"
#include "mscnn/optimizer.hpp"
#include "oracles.hpp"

using namespace mscnn;

namespace {

ConvLayer<double> identity_1x1() { return {Tensor<double>({1, 1, 1, 1}, 1.0), Tensor<double>({1}, 0.0), 0}; }

double weighted_sum(const Tensor<double>& t, const Tensor<double>& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * r[i];
  return s;
}

}  // namespace

TEST(Tensor, RejectsZeroExtentAndLengthMismatch) {
  EXPECT_THROW(Tensor<float>({2, 0, 3}), ShapeError);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
}

TEST(Conv2dForward, IdentityKernelReproducesInput) {
  std::mt19937_64 rng(1);
  auto in = oracle::random_tensor<double>({1, 6, 7}, rng);
  EXPECT_EQ(conv2d_forward(in, identity_1x1()), in);
}

TEST(Conv2dForward, AllOnesKernelCountsNeighbours) {
  Tensor<double> in({1, 4, 4}, 1.0);
  ConvLayer<double> l{Tensor<double>({1, 1, 3, 3}, 1.0), Tensor<double>({1}, 0.0), 1};
  auto out = conv2d_forward(in, l);
  EXPECT_EQ(out, oracle::conv_loops(in, l));
  EXPECT_EQ(out.at(0, 0, 0), 4.0);
  EXPECT_EQ(out.at(0, 3, 3), 4.0);
  EXPECT_EQ(out.at(0, 0, 1), 6.0);
  EXPECT_EQ(out.at(0, 2, 0), 6.0);
  EXPECT_EQ(out.at(0, 1, 1), 9.0);
  EXPECT_EQ(out.at(0, 2, 2), 9.0);
}

TEST(Conv2dForward, ZeroInputYieldsBias) {
  std::mt19937_64 rng(2);
  auto l = oracle::random_conv<double>(3, 2, 5, 2, rng);
  auto out = conv2d_forward(Tensor<double>({2, 8, 8}), l);
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) EXPECT_EQ(out.at(o, y, x), l.bias[o]);
}

TEST(Conv2dForward, MatchesLoopOracleOnRandomLayers) {
  std::mt19937_64 rng(3);
  for (std::size_t k : {1u, 3u, 5u, 7u, 9u}) {
    auto l = oracle::random_conv<double>(4, 3, k, (k - 1) / 2, rng);
    auto in = oracle::random_tensor<double>({3, 11, 13}, rng);
    auto got = conv2d_forward(in, l);
    auto want = oracle::conv_loops(in, l);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12) << "k=" << k;
  }
}

TEST(Conv2dForward, UnpaddedOutputShrinks) {
  std::mt19937_64 rng(4);
  auto l = oracle::random_conv<double>(2, 1, 3, 0, rng);
  auto in = oracle::random_tensor<double>({1, 6, 5}, rng);
  auto got = conv2d_forward(in, l);
  EXPECT_EQ(got.shape(), (Shape{2, 4, 3}));
  auto want = oracle::conv_loops(in, l);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Conv2dForward, TablePaddingPreservesExtents) {
  std::mt19937_64 rng(5);
  const std::size_t kernels[] = {9, 7, 5, 3};
  const std::size_t pads[] = {4, 3, 2, 1};
  for (int i = 0; i < 4; ++i) {
    auto l = oracle::random_conv<float>(2, 2, kernels[i], pads[i], rng);
    auto out = conv2d_forward(oracle::random_tensor<float>({2, 12, 20}, rng), l);
    EXPECT_EQ(out.shape(), (Shape{2, 12, 20}));
  }
}

TEST(Conv2dForward, RejectsChannelMismatch) {
  std::mt19937_64 rng(6);
  auto l = oracle::random_conv<float>(2, 3, 3, 1, rng);
  EXPECT_THROW(conv2d_forward(Tensor<float>({2, 4, 4}), l), ShapeError);
  EXPECT_THROW(conv2d_forward(Tensor<float>({4, 4}), l), ShapeError);
}

TEST(Conv2dBackward, ZeroGradOutGivesZeroGradients) {
  std::mt19937_64 rng(7);
  auto l = oracle::random_conv<double>(3, 2, 3, 1, rng);
  auto in = oracle::random_tensor<double>({2, 5, 5}, rng);
  auto g = conv2d_backward(in, l, Tensor<double>({3, 5, 5}));
  for (double v : g.grad_input.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.grad_weights.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.grad_bias.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2dBackward, IdentityKernelPassesGradientThrough) {
  std::mt19937_64 rng(8);
  auto in = oracle::random_tensor<double>({1, 4, 6}, rng);
  auto go = oracle::random_tensor<double>({1, 4, 6}, rng);
  EXPECT_EQ(conv2d_backward(in, identity_1x1(), go).grad_input, go);
}

TEST(Conv2dBackward, RejectsMismatchedGradOut) {
  std::mt19937_64 rng(9);
  auto l = oracle::random_conv<double>(3, 2, 3, 1, rng);
  EXPECT_THROW(conv2d_backward(Tensor<double>({2, 5, 5}), l, Tensor<double>({3, 4, 5})), ShapeError);
}

// Scalar objective L = <conv(x), R>, so dL/d(out) = R.
TEST(Conv2dBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  for (std::size_t k : {1u, 3u, 5u}) {
    auto l = oracle::random_conv<double>(3, 2, k, (k - 1) / 2, rng);
    auto in = oracle::random_tensor<double>({2, 5, 5}, rng);
    auto r = oracle::random_tensor<double>({3, 5, 5}, rng);
    auto g = conv2d_backward(in, l, r);
    auto f = [&] { return weighted_sum(oracle::conv_loops(in, l), r); };
    auto check = [&](const Tensor<double>& analytic, const std::vector<double>& numeric, const char* what) {
      for (std::size_t i = 0; i < numeric.size(); ++i)
        EXPECT_LT(oracle::rel_error(analytic[i], numeric[i]), 1e-4) << what << " k=" << k << " i=" << i;
    };
    check(g.grad_input, oracle::central_differences(in, f), "input");
    check(g.grad_weights, oracle::central_differences(l.weights, f), "weights");
    check(g.grad_bias, oracle::central_differences(l.bias, f), "bias");
  }
}

TEST(MultiConv, FusedBranchesMatchSeparateConvolutions) {
  std::mt19937_64 rng(11);
  std::vector<ConvLayer<double>> ls;
  for (std::size_t k : {9u, 7u, 5u, 3u}) ls.push_back(oracle::random_conv<double>(2, 3, k, (k - 1) / 2, rng));
  std::vector<const ConvLayer<double>*> ptrs;
  for (auto& l : ls) ptrs.push_back(&l);
  auto in = oracle::random_tensor<double>({3, 8, 12}, rng);
  auto fused = detail::multi_conv_forward<double>(in, ptrs);
  ASSERT_EQ(fused.shape(), (Shape{8, 8, 12}));
  for (std::size_t b = 0; b < 4; ++b) {
    auto want = oracle::conv_loops(in, ls[b]);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(fused[b * want.size() + i], want[i], 1e-12);
  }

  auto r = oracle::random_tensor<double>({8, 8, 12}, rng);
  auto g = detail::multi_conv_backward<double>(in, ptrs, r);
  auto f = [&] {
    double s = 0.0;
    for (std::size_t b = 0; b < 4; ++b) {
      auto o = oracle::conv_loops(in, ls[b]);
      for (std::size_t i = 0; i < o.size(); ++i) s += o[i] * r[b * o.size() + i];
    }
    return s;
  };
  auto num_in = oracle::central_differences(in, f);
  for (std::size_t i = 0; i < num_in.size(); ++i) EXPECT_LT(oracle::rel_error(g.grad_input[i], num_in[i]), 1e-4);
  for (std::size_t b = 0; b < 4; ++b) {
    auto num_w = oracle::central_differences(ls[b].weights, f);
    for (std::size_t i = 0; i < num_w.size(); ++i)
      EXPECT_LT(oracle::rel_error(g.grad_weights[b][i], num_w[i]), 1e-4) << "branch " << b;
    auto num_b = oracle::central_differences(ls[b].bias, f);
    for (std::size_t i = 0; i < num_b.size(); ++i) EXPECT_LT(oracle::rel_error(g.grad_bias[b][i], num_b[i]), 1e-4);
  }
}

TEST(Relu, ForwardAndBackward) {
  Tensor<double> in({3}, std::vector<double>{-1, 0, 2});
  EXPECT_EQ(relu_forward(in).values()[0], 0.0);
  EXPECT_EQ(relu_forward(in), (Tensor<double>({3}, std::vector<double>{0, 0, 2})));
  Tensor<double> pos({3}, std::vector<double>{0.5, 1, 7});
  EXPECT_EQ(relu_forward(pos), pos);
  auto g = relu_backward(Tensor<double>({2}, std::vector<double>{-1, 2}), Tensor<double>({2}, std::vector<double>{5, 7}));
  EXPECT_EQ(g, (Tensor<double>({2}, std::vector<double>{0, 7})));
}

TEST(MaxPool, SingleWindow) {
  Tensor<double> in({1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  auto r = maxpool2x2_forward(in);
  EXPECT_EQ(r.output.size(), 1u);
  EXPECT_EQ(r.output[0], 4.0);
  auto g = maxpool2x2_backward<double>(in.shape(), r.argmax, Tensor<double>({1, 1, 1}, 1.0));
  EXPECT_EQ(g, (Tensor<double>({1, 2, 2}, std::vector<double>{0, 0, 0, 1})));
}

TEST(MaxPool, ConstantInputHalvesResolution) {
  auto r = maxpool2x2_forward(Tensor<float>({2, 6, 8}, 3.5f));
  EXPECT_EQ(r.output, Tensor<float>({2, 3, 4}, 3.5f));
}

TEST(MaxPool, TiesGoToFirstElementInScanOrder) {
  auto r = maxpool2x2_forward(Tensor<float>({1, 2, 2}, 1.0f));
  auto g = maxpool2x2_backward<float>(Shape{1, 2, 2}, r.argmax, Tensor<float>({1, 1, 1}, 1.0f));
  EXPECT_EQ(g, (Tensor<float>({1, 2, 2}, std::vector<float>{1, 0, 0, 0})));
}

TEST(MaxPool, MatchesBruteForceAndConservesGradientMass) {
  std::mt19937_64 rng(12);
  auto in = oracle::random_tensor<double>({3, 8, 8}, rng);
  auto r = maxpool2x2_forward(in);
  EXPECT_EQ(r.output, oracle::maxpool_loops(in));
  auto go = oracle::random_tensor<double>({3, 4, 4}, rng);
  auto gi = maxpool2x2_backward<double>(in.shape(), r.argmax, go);
  EXPECT_NEAR(gi.sum(), go.sum(), 1e-12);
  auto f = [&] { return weighted_sum(oracle::maxpool_loops(in), go); };
  auto num = oracle::central_differences(in, f);
  for (std::size_t i = 0; i < num.size(); ++i) EXPECT_LT(oracle::rel_error(gi[i], num[i]), 1e-4);
}

TEST(MaxPool, RejectsOddExtents) {
  EXPECT_THROW(maxpool2x2_forward(Tensor<float>({1, 3, 4})), ShapeError);
  EXPECT_THROW(maxpool2x2_forward(Tensor<float>({1, 4, 5})), ShapeError);
}

TEST(Concat, SinglePartIsIdentity) {
  std::mt19937_64 rng(13);
  std::vector<Tensor<float>> parts{oracle::random_tensor<float>({3, 4, 5}, rng)};
  EXPECT_EQ(concat_channels<float>(parts), parts[0]);
}

TEST(Concat, FourPartsOccupyConsecutiveChannelRanges) {
  std::vector<Tensor<float>> parts;
  for (int k = 0; k < 4; ++k) parts.emplace_back(Shape{16, 3, 3}, static_cast<float>(k));
  auto cat = concat_channels<float>(parts);
  ASSERT_EQ(cat.shape(), (Shape{64, 3, 3}));
  for (std::size_t c = 0; c < 64; ++c) EXPECT_EQ(cat.at(c, 1, 2), static_cast<float>(c / 16));
}

TEST(Concat, SliceIsExactInverse) {
  std::mt19937_64 rng(14);
  std::vector<Tensor<float>> parts{oracle::random_tensor<float>({2, 5, 3}, rng),
                                   oracle::random_tensor<float>({1, 5, 3}, rng),
                                   oracle::random_tensor<float>({4, 5, 3}, rng)};
  const std::size_t counts[] = {2, 1, 4};
  EXPECT_EQ(slice_channels(concat_channels<float>(parts), counts), parts);
}

TEST(Concat, RejectsSpatialMismatch) {
  std::vector<Tensor<float>> parts{Tensor<float>({1, 4, 4}), Tensor<float>({1, 4, 5})};
  EXPECT_THROW(concat_channels<float>(parts), ShapeError);
  EXPECT_THROW(concat_channels<float>(std::span<const Tensor<float>>{}), ShapeError);
}

TEST(Layers, Deterministic) {
  std::mt19937_64 rng(15);
  auto l = oracle::random_conv<float>(8, 4, 5, 2, rng);
  auto in = oracle::random_tensor<float>({4, 16, 16}, rng);
  auto go = oracle::random_tensor<float>({8, 16, 16}, rng);
  EXPECT_EQ(conv2d_forward(in, l), conv2d_forward(in, l));
  auto a = conv2d_backward(in, l, go), b = conv2d_backward(in, l, go);
  EXPECT_EQ(a.grad_input, b.grad_input);
  EXPECT_EQ(a.grad_weights, b.grad_weights);
}

namespace {

struct OneParam {
  Tensor<double> p, g;
  std::vector<Tensor<double>*> params;
  std::vector<Tensor<double>> grads;
  OneParam(double pv, double gv) : p({1}, pv), g({1}, gv) {
    params = {&p};
    grads = {g};
  }
};

}  // namespace

TEST(Sgd, WeightDecayOnlyStep) {
  OneParam s(1.0, 0.0);
  OptimizerState<double> st(s.params, 0.1, 0.0, 0.0005);
  sgd_step<double>(s.params, s.grads, st);
  EXPECT_NEAR(s.p[0], 0.99995, 1e-15);
}

TEST(Sgd, PlainGradientDescent) {
  OneParam s(2.0, 3.0);
  OptimizerState<double> st(s.params, 0.25, 0.0, 0.0);
  sgd_step<double>(s.params, s.grads, st);
  EXPECT_EQ(s.p[0], 2.0 - 0.25 * 3.0);
}

TEST(Sgd, ZeroLearningRateFromRestLeavesParams) {
  OneParam s(1.5, 4.0);
  OptimizerState<double> st(s.params, 0.0, 0.9, 0.0005);
  for (int i = 0; i < 3; ++i) sgd_step<double>(s.params, s.grads, st);
  EXPECT_EQ(s.p[0], 1.5);
  EXPECT_EQ(st.velocity[0][0], 0.0);
}

TEST(Sgd, ZeroLearningRateDecaysVelocityByMomentum) {
  OneParam s(1.5, 4.0);
  OptimizerState<double> st(s.params, 0.0, 0.9, 0.0005);
  st.velocity[0][0] = 1.0;
  sgd_step<double>(s.params, s.grads, st);
  EXPECT_DOUBLE_EQ(st.velocity[0][0], 0.9);
  EXPECT_DOUBLE_EQ(s.p[0], 2.4);
}

TEST(Sgd, MomentumAccumulatesCoupledDecay) {
  OneParam s(1.0, 2.0);
  OptimizerState<double> st(s.params, 0.1, 0.9, 0.5);
  sgd_step<double>(s.params, s.grads, st);
  // g' = 2 + 0.5 = 2.5, v = -0.25, p = 0.75
  EXPECT_DOUBLE_EQ(s.p[0], 0.75);
  sgd_step<double>(s.params, s.grads, st);
  // g' = 2 + 0.375, v = 0.9 * -0.25 - 0.2375
  EXPECT_DOUBLE_EQ(st.velocity[0][0], -0.225 - 0.2375);
  EXPECT_DOUBLE_EQ(s.p[0], 0.75 - 0.4625);
}

TEST(Sgd, RejectsNonFiniteGradientWithoutMutation) {
  OneParam s(1.0, std::numeric_limits<double>::quiet_NaN());
  OptimizerState<double> st(s.params, 0.1, 0.9, 0.0);
  const std::string names[] = {"conv1.weight"};
  try {
    sgd_step<double>(s.params, s.grads, st, names);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("conv1.weight"), std::string::npos);
  }
  EXPECT_EQ(s.p[0], 1.0);
}

TEST(Sgd, RejectsShapeMismatchAndBadHyperparameters) {
  OneParam s(1.0, 1.0);
  OptimizerState<double> st(s.params, 0.1, 0.9, 0.0);
  std::vector<Tensor<double>> bad{Tensor<double>({2})};
  EXPECT_THROW(sgd_step<double>(s.params, bad, st), ShapeError);
  EXPECT_THROW(OptimizerState<double>(s.params, -1.0, 0.9, 0.0), std::invalid_argument);
  EXPECT_THROW(OptimizerState<double>(s.params, 0.1, 1.0, 0.0), std::invalid_argument);
}
