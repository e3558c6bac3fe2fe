// Copyright 2026 The SMF Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <set>

#include "oracles.hpp"
#include "smf/gradcheck.hpp"
#include "smf/nn.hpp"
#include "smf/tensor.hpp"

namespace smf::ad {
namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Values kept away from zero so relu/abs/smooth-l1 kinks are not straddled by the FD step.
Tensor rand_away_from_zero(Shape shape, Rng& rng) {
  auto t = rand_tensor(std::move(shape), rng);
  for (double& x : t.values()) x = (x < 0 ? -1 : 1) * (0.05 + std::abs(x));
  return t;
}

// Fixed random projection so every check reduces a non-trivial scalar.
Tensor project(const Tensor& t) {
  Rng rng(t.numel() * 7919 + 1);
  auto w = rand_tensor(t.shape(), rng);
  return sum(mul(t, w));
}

void expect_grad_ok(const std::string& name, const ScalarFn& fn, std::vector<Tensor> inputs) {
  const auto r = gradcheck(name, fn, std::move(inputs));
  EXPECT_TRUE(r.ok) << name << " max rel err " << r.max_rel_error;
  EXPECT_GT(r.checked, 0u);
}

TEST(TensorOps, SoftmaxAndSmoothL1Values) {
  const auto s = softmax(Tensor::from({2}, {0, 0}), 0);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
  EXPECT_DOUBLE_EQ(smooth_l1(Tensor::scalar(0.5), 1.0).item(), 0.125);
  EXPECT_DOUBLE_EQ(smooth_l1(Tensor::scalar(-2.0), 1.0).item(), 1.5);
}

TEST(TensorOps, SoftmaxRowsSumToOne) {
  Rng rng(1);
  const auto x = rand_tensor({7, 13}, rng, -30, 30);
  for (std::size_t axis : {0u, 1u}) {
    const auto s = softmax(x, axis);
    const std::size_t outer = axis == 1 ? 7 : 13, len = axis == 1 ? 13 : 7;
    for (std::size_t o = 0; o < outer; ++o) {
      double t = 0;
      for (std::size_t k = 0; k < len; ++k) t += axis == 1 ? s[o * 13 + k] : s[k * 13 + o];
      EXPECT_NEAR(t, 1.0, 1e-12);
    }
  }
}

TEST(TensorOps, ShapeErrorsNameTheOp) {
  const auto a = Tensor::zeros({2, 3}), b = Tensor::zeros({3, 3});
  try {
    add(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
  EXPECT_THROW(matmul(a, Tensor::zeros({2, 2})), ShapeError);
  EXPECT_THROW(conv2d(Tensor::zeros({3, 4, 4}), Tensor::zeros({2, 2, 3, 3})), ShapeError);
  EXPECT_THROW(concat({a, Tensor::zeros({2, 2, 1})}, 0), ShapeError);
  EXPECT_THROW(slice(a, 1, 2, 5), ShapeError);
}

TEST(Backward, SumGivesOnesAndMseSelfGivesZero) {
  Rng rng(2);
  auto x = rand_tensor({3, 4}, rng);
  x.set_requires_grad(true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  x.zero_grad();
  backward(mse_loss(x, x));
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, ErrorsOnNonScalarAndRepeat) {
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(x), Error);
  auto loss = sum(mul(x, x));
  backward(loss);
  EXPECT_THROW(backward(loss), Error);
}

TEST(Backward, TapeVisitsEachNodeOnce) {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto y = mul(x, x);
  auto z = add(y, y);  // diamond
  auto loss = sum(add(z, y));
  const auto tape = build_tape(loss);
  EXPECT_EQ(std::set<Node*>(tape.begin(), tape.end()).size(), tape.size());
  EXPECT_EQ(tape.size(), 5u);
  backward(loss);
  // d/dx (3 x^2) = 6x
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 12.0);
}

TEST(Backward, ConstantsRecordNothing) {
  const auto a = Tensor::from({2}, {1, 2});
  const auto b = mul(a, a);
  EXPECT_FALSE(b.requires_grad());
  EXPECT_TRUE(b.node()->parents.empty());
}

TEST(Conv2d, MatchesNaiveLoopsExactly) {
  Rng rng(3);
  for (auto [stride, pad, k] : {std::tuple{1u, 1u, 3u}, {2u, 1u, 3u}, {1u, 0u, 1u}, {2u, 0u, 3u}}) {
    const auto x = rand_tensor({3, 9, 7}, rng);
    const auto w = rand_tensor({4, 3, k, k}, rng);
    std::size_t ho, wo;
    const auto ref = oracle::naive_conv2d(x.values(), 3, 9, 7, w.values(), 4, k, stride, pad, ho, wo);
    const auto out = conv2d(x, w, stride, pad);
    EXPECT_EQ(out.shape(), (Shape{4, ho, wo}));
    EXPECT_EQ(out.values(), ref);
  }
}

TEST(Deconv2d, MatchesNaiveScatter) {
  Rng rng(4);
  const auto x = rand_tensor({3, 4, 5}, rng);
  const auto w = rand_tensor({3, 2, 3, 3}, rng);
  const auto ref = oracle::naive_deconv2d(x.values(), 3, 4, 5, w.values(), 2);
  const auto out = deconv2d(x, w);
  ASSERT_EQ(out.shape(), (Shape{2, 8, 10}));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
}

TEST(BilinearUpsample, ConstantAndInterpolation) {
  const auto c = bilinear_upsample(Tensor::from({1, 2, 2}, {3, 3, 3, 3}), 4);
  for (double v : c.values()) EXPECT_DOUBLE_EQ(v, 3.0);
  // 1-D ramp [0, 1] upsampled by 2: sources -0.25->0, 0.25, 0.75, 1.25->clamp.
  const auto r = bilinear_upsample(Tensor::from({1, 1, 2}, {0, 1}), 2);
  EXPECT_EQ(r.shape(), (Shape{1, 2, 4}));
  EXPECT_DOUBLE_EQ(r[0], 0.0);
  EXPECT_DOUBLE_EQ(r[1], 0.25);
  EXPECT_DOUBLE_EQ(r[2], 0.75);
  EXPECT_DOUBLE_EQ(r[3], 1.0);
}

TEST(ScatterMax, ElementwiseMaxAndEmptyCells) {
  const auto f = Tensor::from({3, 2}, {1, 5, 4, 2, 0.5, 0.5});
  const auto m = scatter_max(f, {3, 3, 0}, 2, 2);
  EXPECT_EQ(m.shape(), (Shape{2, 2, 2}));
  EXPECT_EQ(m.values(), (std::vector<double>{0.5, 0, 0, 4, 0.5, 0, 0, 5}));
}

TEST(GradCheck, EveryPrimitive) {
  Rng rng(5);
  auto t = [&](Shape s) { return rand_tensor(std::move(s), rng); };
  auto nz = [&](Shape s) { return rand_away_from_zero(std::move(s), rng); };

  expect_grad_ok("add", [](auto& in) { return project(add(in[0], in[1])); }, {t({3, 4}), t({3, 4})});
  expect_grad_ok("sub", [](auto& in) { return project(sub(in[0], in[1])); }, {t({3, 4}), t({3, 4})});
  expect_grad_ok("mul", [](auto& in) { return project(mul(in[0], in[1])); }, {t({3, 4}), t({3, 4})});
  expect_grad_ok("scale", [](auto& in) { return project(scale(in[0], -1.7)); }, {t({5})});
  expect_grad_ok("matmul", [](auto& in) { return project(matmul(in[0], in[1])); }, {t({3, 4}), t({4, 5})});
  expect_grad_ok("transpose", [](auto& in) { return project(transpose(in[0])); }, {t({3, 4})});
  expect_grad_ok("relu", [](auto& in) { return project(relu(in[0])); }, {nz({4, 4})});
  expect_grad_ok("sigmoid", [](auto& in) { return project(sigmoid(in[0])); }, {t({4, 4})});
  expect_grad_ok("abs", [](auto& in) { return project(abs(in[0])); }, {nz({6})});
  expect_grad_ok("softmax0", [](auto& in) { return project(softmax(in[0], 0)); }, {t({3, 4})});
  expect_grad_ok("softmax1", [](auto& in) { return project(softmax(in[0], 1)); }, {t({3, 4})});
  expect_grad_ok("softmax3d", [](auto& in) { return project(softmax(in[0], 0)); }, {t({3, 2, 2})});
  expect_grad_ok("concat", [](auto& in) { return project(concat({in[0], in[1]}, 1)); }, {t({2, 3}), t({2, 2})});
  expect_grad_ok("slice", [](auto& in) { return project(slice(in[0], 1, 1, 3)); }, {t({3, 4})});
  expect_grad_ok("reshape", [](auto& in) { return project(reshape(in[0], {6, 2})); }, {t({3, 4})});
  expect_grad_ok("index_select", [](auto& in) { return project(index_select(in[0], 0, {2, 0, 2})); }, {t({3, 4})});
  expect_grad_ok("add_bias2d", [](auto& in) { return project(add_bias(in[0], in[1])); }, {t({3, 4}), t({4})});
  expect_grad_ok("add_bias3d", [](auto& in) { return project(add_bias(in[0], in[1])); }, {t({2, 3, 3}), t({2})});
  expect_grad_ok("mul_spatial", [](auto& in) { return project(mul_spatial(in[0], in[1])); },
                 {t({3, 2, 4}), t({1, 2, 4})});
  expect_grad_ok("conv2d_s1", [](auto& in) { return project(conv2d(in[0], in[1], 1, 1)); },
                 {t({2, 6, 5}), t({3, 2, 3, 3})});
  expect_grad_ok("conv2d_s2", [](auto& in) { return project(conv2d(in[0], in[1], 2, 1)); },
                 {t({2, 6, 5}), t({3, 2, 3, 3})});
  expect_grad_ok("conv2d_1x1", [](auto& in) { return project(conv2d(in[0], in[1], 1, 0)); },
                 {t({2, 4, 4}), t({3, 2, 1, 1})});
  expect_grad_ok("deconv2d", [](auto& in) { return project(deconv2d(in[0], in[1])); }, {t({2, 3, 4}), t({2, 3, 3, 3})});
  expect_grad_ok("bilinear_upsample", [](auto& in) { return project(bilinear_upsample(in[0], 4)); }, {t({2, 3, 3})});
  expect_grad_ok("channel_norm", [](auto& in) { return project(channel_norm(in[0], in[1])); },
                 {t({3, 3, 4}), rand_tensor({3}, rng, 0.5, 1.5)});
  expect_grad_ok("sum", [](auto& in) { return sum(in[0]); }, {t({3, 3})});
  expect_grad_ok("mean", [](auto& in) { return mean(in[0]); }, {t({3, 3})});
  expect_grad_ok("mse_loss", [](auto& in) { return mse_loss(in[0], in[1]); }, {t({3, 3}), t({3, 3})});
  expect_grad_ok("smooth_l1_loss", [](auto& in) { return smooth_l1_loss(in[0], in[1], 1.0); },
                 {rand_tensor({8}, rng, -3, 3), Tensor::zeros({8})});
  expect_grad_ok("scatter_max", [](auto& in) { return project(scatter_max(in[0], {0, 3, 3, 1}, 2, 2)); },
                 {t({4, 3})});
  Adjacency adj;
  adj.index = {1, 2, 0, 0};
  adj.offset = {0, 2, 3, 4, 4};
  expect_grad_ok("neighbor_mean", [adj](auto& in) { return project(neighbor_mean(in[0], adj)); }, {t({4, 3})});
  auto target = rand_tensor({2, 3, 3}, rng, 0, 0.9);
  target.values()[4] = 1.0;
  expect_grad_ok("focal_loss", [target](auto& in) { return focal_loss(in[0], target); },
                 {rand_tensor({2, 3, 3}, rng, -3, 3)});
}

TEST(ChannelNorm, ZeroMeanUnitVarianceAndZeroInput) {
  Rng rng(6);
  const auto x = rand_tensor({2, 4, 5}, rng, -3, 3);
  const auto y = channel_norm(x, Tensor::from({2}, {1.0, 2.0}));
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 20; ++i) m += y[c * 20 + i];
    m /= 20;
    for (std::size_t i = 0; i < 20; ++i) v += (y[c * 20 + i] - m) * (y[c * 20 + i] - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 20, (c + 1.0) * (c + 1.0), 1e-3);
  }
  const auto z = channel_norm(Tensor::zeros({2, 3, 3}), Tensor::from({2}, {1.0, 1.0}));
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(Optimizer, CosineScheduleEndpoints) {
  EXPECT_DOUBLE_EQ(nn::cosine_lr(0, 100, 0.1), 0.1);
  EXPECT_NEAR(nn::cosine_lr(100, 100, 0.1), 0.0, 1e-15);
  EXPECT_NEAR(nn::cosine_lr(50, 100, 0.1), 0.05, 1e-15);
}

TEST(Optimizer, MomentumStep) {
  nn::ParamStore p;
  auto& w = p.add("w", {1}, {1.0});
  nn::SgdMomentum opt(0.9);
  w.mutable_grad() = {2.0};
  opt.step(p, 0.1);  // v = 2, w = 0.8
  EXPECT_DOUBLE_EQ(w[0], 0.8);
  opt.step(p, 0.1);  // v = 0.9 * 2 + 2 = 3.8, w = 0.42
  EXPECT_NEAR(w[0], 0.42, 1e-15);
}

TEST(Checkpoint, RoundTripAndTruncation) {
  Rng rng(6);
  nn::ParamStore p;
  p.add_normal("layer.weight", {3, 2, 3, 3}, 18, rng);
  p.add_normal("layer.bias", {3}, 1, rng);
  p.add_normal("scalar", {}, 1, rng);
  const auto bytes = nn::encode_checkpoint(p);
  EXPECT_EQ(nn::encode_checkpoint(nn::decode_checkpoint(bytes)), bytes);
  EXPECT_TRUE(nn::decode_checkpoint(bytes) == p);
  for (std::size_t n = 0; n < bytes.size(); n += 3) {
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
    EXPECT_THROW(nn::decode_checkpoint(cut), ParseError);
  }
}

}  // namespace
}  // namespace smf::ad
