#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck_util.hpp"
#include "oracles.hpp"
#include "ratles/error.hpp"
#include "ratles/layers.hpp"

using namespace ratles;

namespace {

Conv3d random_conv(int64_t in_ch, int64_t out_ch, int64_t k, std::mt19937_64& rng) {
  Conv3d c = Conv3d::create(in_ch, out_ch, k, rng);
  std::normal_distribution<double> dist(0.0, 0.5);
  for (double& v : c.bias.values()) v = dist(rng);
  return c;
}

}  // namespace

TEST_CASE("conv3d: identity kernel reproduces the input") {
  std::mt19937_64 rng(1);
  Conv3d c = Conv3d::create(1, 1, 3, rng);
  for (double& v : c.weight.values()) v = 0.0;
  c.weight.values()[13] = 1.0;  // center tap
  Tensor x = gradcheck::random_tensor({1, 1, 4, 5, 6}, rng);
  Tensor y = conv3d(x, c);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("conv3d: 1x1x1 kernel with weight 2 doubles the input") {
  std::mt19937_64 rng(2);
  Conv3d c = Conv3d::create(1, 1, 1, rng);
  c.weight.values()[0] = 2.0;
  Tensor x = gradcheck::random_tensor({1, 1, 3, 3, 3}, rng);
  Tensor y = conv3d(x, c);
  for (int64_t i = 0; i < x.size(); ++i)
    CHECK(y.values()[i] == doctest::Approx(2.0 * x.values()[i]).epsilon(1e-15));
}

TEST_CASE("conv3d: matches the naive nested-loop reference") {
  std::mt19937_64 rng(3);

  SUBCASE("the 1x2x4x4x4 -> 3 channel case") {
    Conv3d c = random_conv(2, 3, 3, rng);
    Tensor x = gradcheck::random_tensor({1, 2, 4, 4, 4}, rng);
    Tensor got = conv3d(x, c);
    Tensor want = oracles::conv3d_reference(x, c.weight, c.bias);
    for (int64_t i = 0; i < got.size(); ++i)
      CHECK(std::fabs(got.values()[i] - want.values()[i]) < 1e-12);
  }

  SUBCASE("random small cases, both kernel sizes") {
    std::uniform_int_distribution<int64_t> dim(1, 5), chan(1, 4), batch(1, 2);
    for (int trial = 0; trial < 25; ++trial) {
      const int64_t k = trial % 2 ? 1 : 3;
      Conv3d c = random_conv(chan(rng), chan(rng), k, rng);
      Tensor x = gradcheck::random_tensor({batch(rng), c.in_channels(), dim(rng), dim(rng), dim(rng)},
                                          rng);
      Tensor got = conv3d(x, c);
      Tensor want = oracles::conv3d_reference(x, c.weight, c.bias);
      for (int64_t i = 0; i < got.size(); ++i)
        CHECK(std::fabs(got.values()[i] - want.values()[i]) < 1e-12);
    }
  }
}

TEST_CASE("conv3d: channel mismatch throws") {
  std::mt19937_64 rng(4);
  Conv3d c = Conv3d::create(2, 3, 3, rng);
  Tensor x({1, 1, 2, 2, 2});
  CHECK_THROWS_AS(conv3d(x, c), ContractViolation);
}

TEST_CASE("conv3d: gradients match finite differences") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t k = trial % 2 ? 1 : 3;
    Conv3d c = random_conv(2, 2, k, rng);
    Tensor x = gradcheck::random_tensor({1, 2, 2, 3, 2}, rng);
    x.set_requires_grad(true);
    Tensor weights = gradcheck::random_tensor({1, 2, 2, 3, 2}, rng);
    backward(sum(mul(conv3d(x, c), weights)));
    auto forward = [&] { return sum(mul(conv3d(x, c), weights)).item(); };
    CHECK(gradcheck::max_rel_err(x, gradcheck::all_entries(x), forward) < gradcheck::kRelTol);
    CHECK(gradcheck::max_rel_err(c.weight, gradcheck::all_entries(c.weight), forward) <
          gradcheck::kRelTol);
    CHECK(gradcheck::max_rel_err(c.bias, gradcheck::all_entries(c.bias), forward) <
          gradcheck::kRelTol);
  }
}

TEST_CASE("batchnorm: train mode normalizes per channel") {
  std::mt19937_64 rng(6);
  BatchNorm3d bn = BatchNorm3d::create(3);
  Tensor x = gradcheck::random_tensor({2, 3, 2, 4, 4}, rng, 100.0);
  Tensor y = batchnorm(x, bn);

  const int64_t plane = 2 * 4 * 4;
  for (int64_t c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t i = 0; i < plane; ++i) mean += y.values()[(n * 3 + c) * plane + i];
    mean /= 2 * plane;
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t i = 0; i < plane; ++i) {
        const double d = y.values()[(n * 3 + c) * plane + i] - mean;
        var += d * d;
      }
    var /= 2 * plane;
    CHECK(std::fabs(mean) < 1e-10);
    CHECK(std::fabs(var - 1.0) < 1e-8);
  }
}

TEST_CASE("batchnorm: constant channel degenerates to beta") {
  BatchNorm3d bn = BatchNorm3d::create(1);
  bn.beta.values()[0] = 0.7;
  Tensor x = Tensor::full({1, 1, 2, 2, 2}, 42.0);
  Tensor y = batchnorm(x, bn);
  for (double v : y.values()) CHECK(v == 0.7);
}

TEST_CASE("batchnorm: eval mode applies the stored affine map") {
  BatchNorm3d bn = BatchNorm3d::create(2);
  bn.training = false;
  bn.running_mean = {1.0, -2.0};
  bn.running_var = {4.0, 0.25};
  bn.gamma.values()[0] = 2.0;
  bn.gamma.values()[1] = 0.5;
  bn.beta.values()[0] = 1.0;
  bn.beta.values()[1] = -1.0;

  std::mt19937_64 rng(7);
  Tensor x = gradcheck::random_tensor({1, 2, 2, 2, 2}, rng);
  Tensor y = batchnorm(x, bn);
  const int64_t plane = 8;
  for (int64_t c = 0; c < 2; ++c) {
    const double is = 1.0 / std::sqrt(bn.running_var[c] + bn.epsilon);
    const double g = bn.gamma.values()[c], b = bn.beta.values()[c];
    for (int64_t i = 0; i < plane; ++i) {
      const double want = (x.values()[c * plane + i] - bn.running_mean[c]) * is * g + b;
      CHECK(y.values()[c * plane + i] == doctest::Approx(want).epsilon(1e-15));
    }
  }
}

TEST_CASE("batchnorm: eval before any training uses mean 0, var 1") {
  BatchNorm3d bn = BatchNorm3d::create(1);
  bn.training = false;
  Tensor x({1, 1, 1, 1, 2}, {3.0, -3.0});
  Tensor y = batchnorm(x, bn);
  const double is = 1.0 / std::sqrt(1.0 + bn.epsilon);
  CHECK(y.values()[0] == doctest::Approx(3.0 * is).epsilon(1e-15));
  CHECK(y.values()[1] == doctest::Approx(-3.0 * is).epsilon(1e-15));
}

TEST_CASE("batchnorm: running stats move only in train mode") {
  std::mt19937_64 rng(8);
  BatchNorm3d bn = BatchNorm3d::create(1);
  Tensor x = gradcheck::random_tensor({1, 1, 2, 2, 2}, rng, 5.0);
  (void)batchnorm(x, bn);
  const double after_train_mean = bn.running_mean[0];
  CHECK(after_train_mean != 0.0);

  bn.training = false;
  (void)batchnorm(x, bn);
  CHECK(bn.running_mean[0] == after_train_mean);
}

TEST_CASE("batchnorm: gradients match finite differences in both modes") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    BatchNorm3d bn = BatchNorm3d::create(2);
    bn.training = trial % 2 == 0;
    bn.running_mean = {0.3, -0.2};
    bn.running_var = {1.5, 0.8};
    std::normal_distribution<double> dist(0.0, 0.5);
    for (double& v : bn.gamma.values()) v = 1.0 + dist(rng);
    for (double& v : bn.beta.values()) v = dist(rng);

    Tensor x = gradcheck::random_tensor({1, 2, 2, 2, 3}, rng);
    x.set_requires_grad(true);
    Tensor weights = gradcheck::random_tensor({1, 2, 2, 2, 3}, rng);
    backward(sum(mul(batchnorm(x, bn), weights)));
    auto forward = [&] { return sum(mul(batchnorm(x, bn), weights)).item(); };
    CHECK(gradcheck::max_rel_err(x, gradcheck::all_entries(x), forward) < gradcheck::kRelTol);
    CHECK(gradcheck::max_rel_err(bn.gamma, gradcheck::all_entries(bn.gamma), forward) <
          gradcheck::kRelTol);
    CHECK(gradcheck::max_rel_err(bn.beta, gradcheck::all_entries(bn.beta), forward) <
          gradcheck::kRelTol);
  }
}

TEST_CASE("maxpool2: reduces each 2x2x2 block to its max") {
  Tensor x({1, 1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor y = maxpool2(x);
  CHECK(y.size() == 1);
  CHECK(y.values()[0] == 8);

  Tensor c = Tensor::full({1, 1, 4, 4, 4}, 2.5);
  Tensor yc = maxpool2(c);
  CHECK(yc.shape() == std::vector<int64_t>{1, 1, 2, 2, 2});
  for (double v : yc.values()) CHECK(v == 2.5);
}

TEST_CASE("maxpool2: odd spatial dims throw") {
  Tensor x({1, 1, 3, 4, 4});
  CHECK_THROWS_AS(maxpool2(x), ContractViolation);
}

TEST_CASE("maxpool2: gradient lands only on the argmax voxel") {
  Tensor x({1, 1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  x.set_requires_grad(true);
  backward(sum(maxpool2(x)));
  for (int64_t i = 0; i < 7; ++i) CHECK(x.grad()[i] == 0.0);
  CHECK(x.grad()[7] == 1.0);

  // finite differences, with entries spaced far apart relative to the step
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> levels(16);
    for (size_t i = 0; i < levels.size(); ++i) levels[i] = 0.01 * static_cast<double>(i);
    std::shuffle(levels.begin(), levels.end(), rng);
    Tensor q({1, 1, 2, 2, 4}, levels);
    q.set_requires_grad(true);
    Tensor weights = gradcheck::random_tensor({1, 1, 1, 1, 2}, rng);
    backward(sum(mul(maxpool2(q), weights)));
    auto forward = [&] { return sum(mul(maxpool2(q), weights)).item(); };
    CHECK(gradcheck::max_rel_err(q, gradcheck::all_entries(q), forward) < gradcheck::kRelTol);
  }
}

TEST_CASE("maxpool2: first-index wins on ties") {
  Tensor x = Tensor::full({1, 1, 2, 2, 2}, 3.0);
  x.set_requires_grad(true);
  backward(sum(maxpool2(x)));
  CHECK(x.grad()[0] == 1.0);
  for (int64_t i = 1; i < 8; ++i) CHECK(x.grad()[i] == 0.0);
}

TEST_CASE("upsample_trilinear2: constants are exact") {
  Tensor x = Tensor::full({1, 1, 2, 2, 2}, 2.5);
  Tensor y = upsample_trilinear2(x);
  CHECK(y.shape() == std::vector<int64_t>{1, 1, 4, 4, 4});
  for (double v : y.values()) CHECK(v == 2.5);

  // down-then-up of a constant is the identity
  Tensor down = maxpool2(x);
  Tensor up = upsample_trilinear2(down);
  CHECK(up.shape() == x.shape());
  for (double v : up.values()) CHECK(v == 2.5);
}

TEST_CASE("upsample_trilinear2: ramp follows the align-corners=false formula") {
  Tensor x({1, 1, 1, 1, 2}, {0.0, 1.0});
  Tensor y = upsample_trilinear2(x);
  CHECK(y.shape() == std::vector<int64_t>{1, 1, 2, 2, 4});
  // sample centers at (o+0.5)/2 - 0.5, clamped: 0, 0.25, 0.75, 1
  const double want[4] = {0.0, 0.25, 0.75, 1.0};
  for (int64_t z = 0; z < 2; ++z)
    for (int64_t yy = 0; yy < 2; ++yy)
      for (int64_t o = 0; o < 4; ++o)
        CHECK(y.values()[(z * 2 + yy) * 4 + o] == doctest::Approx(want[o]).epsilon(1e-15));
}

TEST_CASE("upsample_trilinear2: gradients match finite differences") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = gradcheck::random_tensor({1, 2, 2, 3, 2}, rng);
    x.set_requires_grad(true);
    Tensor weights = gradcheck::random_tensor({1, 2, 4, 6, 4}, rng);
    backward(sum(mul(upsample_trilinear2(x), weights)));
    auto forward = [&] { return sum(mul(upsample_trilinear2(x), weights)).item(); };
    CHECK(gradcheck::max_rel_err(x, gradcheck::all_entries(x), forward) < gradcheck::kRelTol);
  }
}

TEST_CASE("bottleneck: maps channel counts and keeps spatial dims") {
  std::mt19937_64 rng(12);
  Bottleneck b = Bottleneck::create(4, 6, rng);
  Tensor x = gradcheck::random_tensor({1, 4, 4, 4, 4}, rng);
  Tensor y = b.forward(x);
  CHECK(y.shape() == std::vector<int64_t>{1, 6, 4, 4, 4});

  Bottleneck head = Bottleneck::create(4, 2, rng);
  Tensor z = head.forward(x);
  CHECK(z.dim(1) == 2);
  Tensor q = softmax_channels(z);
  CHECK(q.dim(1) == 2);
}

TEST_CASE("bottleneck: end-to-end gradient check") {
  std::mt19937_64 rng(13);
  Bottleneck b = Bottleneck::create(2, 3, rng);
  Tensor x = gradcheck::random_tensor({1, 2, 2, 2, 2}, rng);
  x.set_requires_grad(true);
  Tensor weights = gradcheck::random_tensor({1, 3, 2, 2, 2}, rng);
  backward(sum(mul(b.forward(x), weights)));
  auto forward = [&] { return sum(mul(b.forward(x), weights)).item(); };
  CHECK(gradcheck::max_rel_err(x, gradcheck::all_entries(x), forward) < gradcheck::kRelTol);
  CHECK(gradcheck::max_rel_err(b.conv.weight, gradcheck::all_entries(b.conv.weight), forward) <
        gradcheck::kRelTol);
  CHECK(gradcheck::max_rel_err(b.bn.gamma, gradcheck::all_entries(b.bn.gamma), forward) <
        gradcheck::kRelTol);
}

TEST_CASE("resnet_block: zeroed residual path is the identity") {
  std::mt19937_64 rng(14);
  ResNetBlock b = ResNetBlock::create(3, rng);
  for (double& v : b.conv1.weight.values()) v = 0.0;
  for (double& v : b.conv2.weight.values()) v = 0.0;
  Tensor x = gradcheck::random_tensor({1, 3, 4, 4, 4}, rng);
  Tensor y = b.forward(x);
  CHECK(y.shape() == x.shape());
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y.values()[i] == x.values()[i]);

  // the identity path contributes exactly 1 to every input gradient
  Tensor x2 = gradcheck::random_tensor({1, 3, 2, 2, 2}, rng);
  x2.set_requires_grad(true);
  backward(sum(b.forward(x2)));
  for (double g : x2.grad()) CHECK(g == 1.0);
}

TEST_CASE("resnet_block: output shape always equals input shape") {
  std::mt19937_64 rng(15);
  ResNetBlock b = ResNetBlock::create(2, rng);
  for (auto dims : {std::vector<int64_t>{1, 2, 2, 2, 2}, std::vector<int64_t>{2, 2, 3, 5, 4}}) {
    Tensor x = gradcheck::random_tensor(dims, rng);
    CHECK(b.forward(x).shape() == dims);
  }
}

TEST_CASE("resnet_block: gradient check") {
  std::mt19937_64 rng(16);
  ResNetBlock b = ResNetBlock::create(2, rng);
  Tensor x = gradcheck::random_tensor({1, 2, 2, 2, 2}, rng);
  x.set_requires_grad(true);
  Tensor weights = gradcheck::random_tensor({1, 2, 2, 2, 2}, rng);
  backward(sum(mul(b.forward(x), weights)));
  auto forward = [&] { return sum(mul(b.forward(x), weights)).item(); };
  CHECK(gradcheck::max_rel_err(x, gradcheck::all_entries(x), forward) < gradcheck::kRelTol);
  CHECK(gradcheck::max_rel_err(b.conv1.weight,
                               gradcheck::sample_entries(b.conv1.weight, 24, 1), forward) <
        gradcheck::kRelTol);
  CHECK(gradcheck::max_rel_err(b.bn2.gamma, gradcheck::all_entries(b.bn2.gamma), forward) <
        gradcheck::kRelTol);
}

TEST_CASE("densenet_block: shape, growth solve, and parameter matching") {
  std::mt19937_64 rng(17);
  const int64_t ch = 32;
  const int64_t growth = densenet_growth_for(ch);
  DenseNetBlock b = DenseNetBlock::create(ch, growth, rng);
  Tensor x = gradcheck::random_tensor({1, ch, 2, 2, 2}, rng);
  CHECK(b.forward(x).shape() == x.shape());

  // analytic parameter accounting matches the live tensors
  std::vector<NamedParam> params;
  b.collect_parameters("block", params);
  int64_t enumerated = 0;
  for (const auto& p : params) enumerated += p.tensor.size();
  CHECK(enumerated == densenet_block_param_count(ch, growth));

  // parameter count tracks the same-width ResNetBlock within 5%
  const double resnet = static_cast<double>(resnet_block_param_count(ch));
  CHECK(std::fabs(enumerated - resnet) / resnet < 0.05);

  const int64_t g64 = densenet_growth_for(64);
  const double resnet64 = static_cast<double>(resnet_block_param_count(64));
  CHECK(std::fabs(densenet_block_param_count(64, g64) - resnet64) / resnet64 < 0.05);
}

TEST_CASE("densenet_block: gradient check") {
  std::mt19937_64 rng(18);
  DenseNetBlock b = DenseNetBlock::create(3, 2, rng);
  Tensor x = gradcheck::random_tensor({1, 3, 2, 2, 2}, rng);
  x.set_requires_grad(true);
  Tensor weights = gradcheck::random_tensor({1, 3, 2, 2, 2}, rng);
  backward(sum(mul(b.forward(x), weights)));
  auto forward = [&] { return sum(mul(b.forward(x), weights)).item(); };
  CHECK(gradcheck::max_rel_err(x, gradcheck::all_entries(x), forward) < gradcheck::kRelTol);
  CHECK(gradcheck::max_rel_err(b.conv2.weight,
                               gradcheck::sample_entries(b.conv2.weight, 24, 2), forward) <
        gradcheck::kRelTol);
  CHECK(gradcheck::max_rel_err(b.projection.conv.weight,
                               gradcheck::all_entries(b.projection.conv.weight), forward) <
        gradcheck::kRelTol);
}

TEST_CASE("resnet_block: analytic parameter count matches enumeration") {
  std::mt19937_64 rng(19);
  for (int64_t ch : {4, 28, 32, 36, 64}) {
    ResNetBlock b = ResNetBlock::create(ch, rng);
    std::vector<NamedParam> params;
    b.collect_parameters("block", params);
    int64_t enumerated = 0;
    for (const auto& p : params) enumerated += p.tensor.size();
    CHECK(enumerated == resnet_block_param_count(ch));
  }
}
