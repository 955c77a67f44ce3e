#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "fna/error.hpp"
#include "fna/ops.hpp"
#include "oracles.hpp"

using namespace fna;

namespace {

ConvParams make_conv(Tensor w, int stride, int padding, int groups, int dilation = 1) {
  ConvParams p;
  p.weight = std::move(w);
  p.stride = stride;
  p.padding = padding;
  p.groups = groups;
  p.dilation = dilation;
  return p;
}

BNParams make_bn(std::size_t c, std::mt19937_64& rng, bool random_affine) {
  BNParams bn;
  if (random_affine) {
    bn.gamma = oracle::random_tensor({c}, rng, true, 0.5, 1.5);
    bn.beta = oracle::random_tensor({c}, rng, true);
    bn.running_mean = oracle::random_tensor({c}, rng, false);
    bn.running_var = oracle::random_tensor({c}, rng, false, 0.5, 2.0);
  } else {
    bn.gamma = Tensor::full({c}, 1.0, true);
    bn.beta = Tensor::zeros({c}, true);
    bn.running_mean = Tensor::zeros({c});
    bn.running_var = Tensor::full({c}, 1.0);
  }
  return bn;
}

}  // namespace

TEST_CASE("conv2d all-ones center element sums the 3x3 window") {
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor out = conv2d(x, make_conv(Tensor::full({1, 1, 3, 3}, 1.0), 1, 1, 1));
  CHECK(out.shape() == Shape{1, 1, 3, 3});
  CHECK(out.at({0, 0, 1, 1}) == 9.0);
  CHECK(out.at({0, 0, 0, 0}) == 4.0);
}

TEST_CASE("conv2d with a zero kernel is zero") {
  std::mt19937_64 rng(1);
  Tensor x = oracle::random_tensor({2, 3, 5, 5}, rng);
  Tensor out = conv2d(x, make_conv(Tensor::zeros({4, 3, 3, 3}), 1, 1, 1));
  for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("grouped conv2d equals independent convs on channel slices") {
  std::mt19937_64 rng(2);
  Tensor x = oracle::random_tensor({1, 2, 4, 4}, rng);
  Tensor w = oracle::random_tensor({2, 1, 3, 3}, rng);
  Tensor grouped = conv2d(x, make_conv(w, 1, 1, 2));
  for (int g = 0; g < 2; ++g) {
    std::vector<double> xs(x.data().begin() + g * 16, x.data().begin() + (g + 1) * 16);
    std::vector<double> ws(w.data().begin() + g * 9, w.data().begin() + (g + 1) * 9);
    Tensor single = conv2d(Tensor::from({1, 1, 4, 4}, xs), make_conv(Tensor::from({1, 1, 3, 3}, ws), 1, 1, 1));
    for (int i = 0; i < 16; ++i) CHECK(grouped.data()[g * 16 + i] == doctest::Approx(single.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d matches the loop-nest oracle on random geometries") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> pick(0, 1000);
  for (int trial = 0; trial < 40; ++trial) {
    const int groups = std::array{1, 2, 4}[pick(rng) % 3];
    const int c_in = groups * (1 + pick(rng) % 3);
    const int c_out = groups * (1 + pick(rng) % 3);
    const int k = std::array{1, 3, 5}[pick(rng) % 3];
    const int stride = 1 + pick(rng) % 2;
    const int dilation = 1 + pick(rng) % 2;
    const int padding = pick(rng) % 3;
    const int h = 5 + pick(rng) % 4;
    const int w = 5 + pick(rng) % 4;
    const int n = 1 + pick(rng) % 2;
    if ((h + 2 * padding - dilation * (k - 1) - 1) < 0 || (w + 2 * padding - dilation * (k - 1) - 1) < 0) continue;
    Tensor x = oracle::random_tensor({std::size_t(n), std::size_t(c_in), std::size_t(h), std::size_t(w)}, rng);
    Tensor wt = oracle::random_tensor(
        {std::size_t(c_out), std::size_t(c_in / groups), std::size_t(k), std::size_t(k)}, rng);
    Tensor out = conv2d(x, make_conv(wt, stride, padding, groups, dilation));
    std::vector<double> xv(x.data().begin(), x.data().end());
    std::vector<double> wv(wt.data().begin(), wt.data().end());
    auto expected = oracle::conv2d_loop_nest(xv, n, c_in, h, w, wv, c_out, k, stride, padding, dilation, groups);
    REQUIRE(out.numel() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(std::abs(out.data()[i] - expected[i]) <= 1e-12);
  }
}

TEST_CASE("conv2d rejects mismatched channels with a named dimension") {
  Tensor x = Tensor::zeros({1, 3, 4, 4});
  CHECK_THROWS_WITH_AS(conv2d(x, make_conv(Tensor::zeros({2, 2, 3, 3}), 1, 1, 1)),
                       doctest::Contains("input channels"), ShapeError);
  CHECK_THROWS_AS(conv2d(x, make_conv(Tensor::zeros({2, 3, 2, 2}), 1, 1, 1)), ShapeError);
  CHECK_THROWS_AS(conv2d(x, make_conv(Tensor::zeros({2, 3, 7, 7}), 1, 0, 1)), ShapeError);
}

TEST_CASE("depthwise_conv2d scalar kernel scales each channel") {
  std::mt19937_64 rng(4);
  Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng);
  Tensor out = depthwise_conv2d(x, make_conv(Tensor::full({3, 1, 1, 1}, 2.0), 1, 0, 3));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(out.data()[i] == 2.0 * x.data()[i]);
  Tensor zero = depthwise_conv2d(x, make_conv(Tensor::zeros({3, 1, 3, 3}), 1, 1, 3));
  for (double v : zero.data()) CHECK(v == 0.0);
}

TEST_CASE("depthwise_conv2d matches grouped conv2d and the oracle") {
  std::mt19937_64 rng(5);
  Tensor x = oracle::random_tensor({1, 3, 5, 5}, rng);
  Tensor w = oracle::random_tensor({3, 1, 3, 3}, rng);
  Tensor dw = depthwise_conv2d(x, make_conv(w, 1, 1, 3));
  std::vector<double> xv(x.data().begin(), x.data().end());
  std::vector<double> wv(w.data().begin(), w.data().end());
  auto expected = oracle::conv2d_loop_nest(xv, 1, 3, 5, 5, wv, 3, 3, 1, 1, 1, 3);
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(std::abs(dw.data()[i] - expected[i]) <= 1e-12);
  CHECK_THROWS_AS(depthwise_conv2d(x, make_conv(Tensor::zeros({3, 3, 3, 3}), 1, 1, 1)), ShapeError);
}

TEST_CASE("batch_norm with identity parameters returns the input") {
  std::mt19937_64 rng(6);
  Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng);
  BNParams bn = make_bn(3, rng, false);
  bn.eps = 0.0;
  Tensor out = batch_norm(x, bn, false);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(out.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-15));
}

TEST_CASE("batch_norm identity_mode is bit-exact identity") {
  std::mt19937_64 rng(7);
  Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng);
  BNParams bn = make_bn(3, rng, true);
  bn.identity_mode = true;
  for (BNMode mode : {BNMode::kTrain, BNMode::kEval, BNMode::kFrozen}) {
    Tensor out = batch_norm(x, bn, mode);
    REQUIRE(out.numel() == x.numel());
    CHECK(std::memcmp(out.data().data(), x.data().data(), x.numel() * sizeof(double)) == 0);
  }
}

TEST_CASE("batch_norm on a constant batch in training mode returns beta") {
  std::mt19937_64 rng(8);
  BNParams bn = make_bn(2, rng, true);
  Tensor x = Tensor::full({4, 2, 3, 3}, 3.25);
  Tensor out = batch_norm(x, bn, true);
  // gamma * (c - c) / sqrt(0 + eps) + beta == beta
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t c = 0; c < 2; ++c) CHECK(out.at({b, c, 1, 2}) == bn.beta.data()[c]);
}

TEST_CASE("batch_norm training updates running statistics with momentum") {
  std::mt19937_64 rng(9);
  BNParams bn = make_bn(1, rng, false);
  Tensor x = Tensor::from({2, 1, 1, 2}, {1.0, 2.0, 3.0, 4.0});
  batch_norm(x, bn, BNMode::kTrain);
  CHECK(bn.running_mean.data()[0] == doctest::Approx(0.1 * 2.5));
  // unbiased batch variance of {1,2,3,4} is 5/3
  CHECK(bn.running_var.data()[0] == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0));
  const double rm = bn.running_mean.data()[0];
  batch_norm(x, bn, BNMode::kBatchStats);
  batch_norm(x, bn, BNMode::kEval);
  CHECK(bn.running_mean.data()[0] == rm);
}

TEST_CASE("batch_norm rejects channel mismatch and non-finite statistics") {
  std::mt19937_64 rng(10);
  BNParams bn = make_bn(3, rng, false);
  CHECK_THROWS_AS(batch_norm(Tensor::zeros({1, 2, 2, 2}), bn, true), ShapeError);
  Tensor bad = Tensor::from({1, 3, 1, 1}, {1.0, NAN, 0.0});
  CHECK_THROWS_AS(batch_norm(bad, bn, true), DivergenceError);
}

TEST_CASE("elementwise glue ops") {
  CHECK(relu6(Tensor::scalar(7.5)).item() == 6.0);
  CHECK(relu6(Tensor::scalar(-1.0)).item() == 0.0);
  CHECK(relu6(Tensor::scalar(2.5)).item() == 2.5);
  std::mt19937_64 rng(11);
  Tensor x = oracle::random_tensor({2, 3}, rng);
  Tensor y = add(x, Tensor::zeros({2, 3}));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
  CHECK_THROWS_AS(add(x, Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("softmax cross-entropy of uniform logits is ln K") {
  for (std::size_t k : {2u, 3u, 10u}) {
    Tensor logits = Tensor::full({4, k}, 0.7);
    std::vector<int> labels{0, 1, 0, 1};
    CHECK(softmax_cross_entropy(logits, labels).item() == doctest::Approx(std::log(double(k))).epsilon(1e-14));
  }
  Tensor dense = Tensor::zeros({1, 5, 2, 2});
  std::vector<int> labels{0, 1, 2, 3};
  CHECK(softmax_cross_entropy(dense, labels).item() == doctest::Approx(std::log(5.0)));
  std::vector<int> bad{0, 7, 0, 0};
  CHECK_THROWS_AS(softmax_cross_entropy(dense, bad), ShapeError);
}

TEST_CASE("backward of sum(w * x) gives x, unrelated leaf gets zero") {
  std::mt19937_64 rng(12);
  Tensor w = oracle::random_tensor({5}, rng, true);
  Tensor x = oracle::random_tensor({5}, rng);
  Tensor unused = oracle::random_tensor({5}, rng, true);
  sum(mul(w, x)).backward();
  for (std::size_t i = 0; i < 5; ++i) CHECK(w.grad()[i] == x.data()[i]);
  for (double g : unused.grad()) CHECK(g == 0.0);
  CHECK_FALSE(unused.has_grad());
  CHECK(w.has_grad());
}

TEST_CASE("backward through a non-scalar tensor is an error") {
  Tensor w = Tensor::full({3}, 1.0, true);
  CHECK_THROWS_AS(scale(w, 2.0).backward(), ShapeError);
}

TEST_CASE("gradients accumulate across backward calls") {
  Tensor w = Tensor::full({2}, 1.0, true);
  sum(scale(w, 3.0)).backward();
  sum(scale(w, 3.0)).backward();
  CHECK(w.grad()[0] == 6.0);
  w.zero_grad();
  CHECK(w.grad()[0] == 0.0);
}

TEST_CASE("conv2d gradients match central differences") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const int groups = trial % 2 == 0 ? 1 : 2;
    const int stride = 1 + trial % 2;
    const int k = trial % 3 == 0 ? 1 : 3;
    Tensor x = oracle::random_tensor({2, 4, 5, 5}, rng, true);
    Tensor w = oracle::random_tensor({4, std::size_t(4 / groups), std::size_t(k), std::size_t(k)}, rng, true);
    auto loss = [&] {
      return oracle::random_projection(conv2d(x, make_conv(w, stride, k / 2, groups)), 99 + trial);
    };
    CHECK(oracle::gradient_relative_error(x, loss) < 1e-4);
    CHECK(oracle::gradient_relative_error(w, loss) < 1e-4);
  }
}

TEST_CASE("batch_norm gradients match central differences in every mode") {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = oracle::random_tensor({3, 2, 3, 3}, rng, true);
    BNParams bn = make_bn(2, rng, true);
    const BNMode mode = trial % 2 == 0 ? BNMode::kBatchStats : BNMode::kEval;
    auto loss = [&] { return oracle::random_projection(batch_norm(x, bn, mode), 7 + trial); };
    CHECK(oracle::gradient_relative_error(x, loss) < 1e-4);
    CHECK(oracle::gradient_relative_error(bn.gamma, loss) < 1e-4);
    CHECK(oracle::gradient_relative_error(bn.beta, loss) < 1e-4);
  }
}

TEST_CASE("frozen batch_norm passes no gradient to gamma and beta") {
  std::mt19937_64 rng(15);
  Tensor x = oracle::random_tensor({2, 2, 3, 3}, rng, true);
  BNParams bn = make_bn(2, rng, true);
  oracle::random_projection(batch_norm(x, bn, BNMode::kFrozen), 3).backward();
  CHECK_FALSE(bn.gamma.has_grad());
  CHECK_FALSE(bn.beta.has_grad());
  CHECK(x.has_grad());
}

TEST_CASE("glue op gradients match central differences") {
  std::mt19937_64 rng(16);
  for (int trial = 0; trial < 20; ++trial) {
    // Shift away from the relu6 kinks so the difference quotient is smooth.
    Tensor a = oracle::random_tensor({2, 3, 3, 3}, rng, true, 0.2, 5.8);
    Tensor b = oracle::random_tensor({2, 3, 3, 3}, rng, true);
    Tensor bias = oracle::random_tensor({3}, rng, true);
    auto glue = [&] {
      Tensor h = add_channel_bias(add(relu6(a), mul(b, b)), bias);
      return oracle::random_projection(upsample_nearest(h, 2), 5 + trial);
    };
    CHECK(oracle::gradient_relative_error(a, glue) < 1e-4);
    CHECK(oracle::gradient_relative_error(b, glue) < 1e-4);
    CHECK(oracle::gradient_relative_error(bias, glue) < 1e-4);

    Tensor feat = oracle::random_tensor({2, 3, 4, 4}, rng, true);
    Tensor w = oracle::random_tensor({4, 3}, rng, true);
    Tensor wb = oracle::random_tensor({4}, rng, true);
    std::vector<int> labels{1, 3};
    auto head = [&] { return softmax_cross_entropy(linear(global_avg_pool(feat), w, wb), labels); };
    CHECK(oracle::gradient_relative_error(feat, head) < 1e-4);
    CHECK(oracle::gradient_relative_error(w, head) < 1e-4);
    CHECK(oracle::gradient_relative_error(wb, head) < 1e-4);

    Tensor dense = oracle::random_tensor({1, 3, 2, 2}, rng, true);
    std::vector<int> dense_labels{0, 2, 1, 1};
    auto dense_loss = [&] { return softmax_cross_entropy(dense, dense_labels); };
    CHECK(oracle::gradient_relative_error(dense, dense_loss) < 1e-4);

    Tensor alpha = oracle::random_tensor({3}, rng, true);
    std::vector<Tensor> branches{oracle::random_tensor({2, 2}, rng, true), oracle::random_tensor({2, 2}, rng, true),
                                 oracle::random_tensor({2, 2}, rng, true)};
    std::vector<double> costs{100.0, 250.0, 900.0};
    auto mixture = [&] {
      Tensor mixed = oracle::random_projection(weighted_sum(branches, softmax(alpha)), 11 + trial);
      return add(mixed, scale(log10(add_scalar(dot_const(softmax(alpha), costs), 50.0)), 0.3));
    };
    CHECK(oracle::gradient_relative_error(alpha, mixture) < 1e-4);
    CHECK(oracle::gradient_relative_error(branches[1], mixture) < 1e-4);
  }
}

TEST_CASE("small conv net gradients match central differences") {
  std::mt19937_64 rng(17);
  Tensor x = oracle::random_tensor({2, 2, 6, 6}, rng);
  Tensor w1 = oracle::random_tensor({4, 2, 3, 3}, rng, true, -0.5, 0.5);
  Tensor w2 = oracle::random_tensor({4, 1, 5, 5}, rng, true, -0.5, 0.5);
  Tensor w3 = oracle::random_tensor({3, 4, 1, 1}, rng, true, -0.5, 0.5);
  BNParams bn = make_bn(4, rng, true);
  std::vector<int> labels(2 * 3 * 3);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
  auto loss = [&] {
    Tensor h = conv2d(x, make_conv(w1, 2, 1, 1));
    h = batch_norm(h, bn, BNMode::kBatchStats);
    h = depthwise_conv2d(h, make_conv(w2, 1, 2, 4));
    h = conv2d(h, make_conv(w3, 1, 0, 1));
    return softmax_cross_entropy(h, labels);
  };
  CHECK(oracle::gradient_relative_error(w1, loss) < 1e-4);
  CHECK(oracle::gradient_relative_error(w2, loss) < 1e-4);
  CHECK(oracle::gradient_relative_error(w3, loss) < 1e-4);
  CHECK(oracle::gradient_relative_error(bn.gamma, loss) < 1e-4);
}

TEST_CASE("forward pass is bitwise deterministic") {
  std::mt19937_64 rng(18);
  Tensor x = oracle::random_tensor({2, 3, 6, 6}, rng);
  Tensor w = oracle::random_tensor({6, 3, 3, 3}, rng);
  BNParams bn = make_bn(6, rng, true);
  Tensor a = relu6(batch_norm(conv2d(x, make_conv(w, 1, 1, 1)), bn, BNMode::kEval));
  Tensor b = relu6(batch_norm(conv2d(x, make_conv(w, 1, 1, 1)), bn, BNMode::kEval));
  CHECK(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0);
}

TEST_CASE("batch_norm gradients match finite differences") {
  std::mt19937_64 rng(21);
  for (BNMode mode : {BNMode::kBatchStats, BNMode::kEval}) {
    Tensor x = oracle::random_tensor({3, 2, 3, 3}, rng, true);
    BNParams bn = make_bn(2, rng, true);
    auto loss = [&] { return oracle::random_projection(batch_norm(x, bn, mode), 4); };
    CHECK(oracle::gradient_relative_error(x, loss) < 1e-7);
    CHECK(oracle::gradient_relative_error(bn.gamma, loss) < 1e-7);
    CHECK(oracle::gradient_relative_error(bn.beta, loss) < 1e-7);
  }
}
