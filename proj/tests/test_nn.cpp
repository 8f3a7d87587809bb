#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "aikd/nn.hpp"
#include "aikd/rng.hpp"

using namespace aikd;
using namespace aikd::nn;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = standard_normal(rng);
  return t;
}

double weighted_sum(const Tensor& a, const Tensor& w) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * w[i];
  return s;
}

double rel(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale < 1e-14 ? 0.0 : std::sqrt(num) / scale;
}

// Checks input and parameter gradients of f(x) = sum(w * module(x)) against central differences.
void check_module(Module& m, Tensor x, std::mt19937_64& rng, double tol = 1e-5) {
  const Tensor y = m.forward(x, Mode::kTrain);
  const Tensor w = random_tensor(y.shape, rng);
  zero_grad(m);
  const Tensor gx = m.backward(w);
  auto f = [&](const Tensor& in) { return weighted_sum(m.forward(in, Mode::kTrain), w); };
  std::vector<double> numeric(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = x[i];
    x[i] = orig + 1e-5;
    const double up = f(x);
    x[i] = orig - 1e-5;
    const double down = f(x);
    x[i] = orig;
    numeric[i] = (up - down) / 2e-5;
  }
  EXPECT_LT(rel(gx.data, numeric), tol) << "input gradient";

  for (auto& [name, p] : state_of(m).params) {
    const std::vector<double> analytic = p->grad.data;
    std::vector<double> num(p->value.numel());
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + 1e-5;
      const double up = f(x);
      p->value[i] = orig - 1e-5;
      const double down = f(x);
      p->value[i] = orig;
      num[i] = (up - down) / 2e-5;
    }
    EXPECT_LT(rel(analytic, num), tol) << "parameter " << name;
  }
}

Sequential conv_bn_relu(std::size_t in, std::size_t out, std::size_t stride, std::mt19937_64& rng) {
  Sequential s;
  s.emplace<Conv2d>(in, out, 3, stride, 1, false, rng);
  s.emplace<BatchNorm>(out);
  s.emplace<ReLU>();
  return s;
}

}  // namespace

TEST(Layers, ConvolutionGradients) {
  std::mt19937_64 rng(1);
  Conv2d strided(2, 3, 3, 2, 1, true, rng);
  check_module(strided, random_tensor({2, 2, 5, 5}, rng), rng);
  Conv2d pointwise(3, 4, 1, 1, 0, false, rng);
  check_module(pointwise, random_tensor({2, 3, 3, 3}, rng), rng);
  Conv2d wide(1, 2, 7, 2, 3, false, rng);
  check_module(wide, random_tensor({1, 1, 8, 8}, rng), rng);
}

TEST(Layers, ConvolutionMatchesDirectSum) {
  std::mt19937_64 rng(2);
  Conv2d conv(2, 3, 3, 2, 1, true, rng);
  auto st = state_of(conv);
  for (auto& [n, p] : st.params)
    for (auto& v : p->value.data) v = standard_normal(rng);
  const Tensor x = random_tensor({2, 2, 6, 5}, rng);
  const Tensor y = conv.forward(x, Mode::kEval);
  ASSERT_EQ(y.shape, (std::vector<std::size_t>{2, 3, 3, 3}));
  const Tensor& w = st.params[0].second->value;
  const Tensor& b = st.params[1].second->value;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
          double acc = b[o];
          for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t ki = 0; ki < 3; ++ki)
              for (std::size_t kj = 0; kj < 3; ++kj) {
                const long r = static_cast<long>(i * 2 + ki) - 1, q = static_cast<long>(j * 2 + kj) - 1;
                if (r < 0 || q < 0 || r >= 6 || q >= 5) continue;
                acc += w[o * 18 + c * 9 + ki * 3 + kj] * x[((n * 2 + c) * 6 + r) * 5 + q];
              }
          EXPECT_NEAR(y[((n * 3 + o) * 3 + i) * 3 + j], acc, 1e-12);
        }
}

TEST(Layers, BatchNormGradients) {
  std::mt19937_64 rng(3);
  BatchNorm bn4(3);
  auto st = state_of(bn4);
  for (auto& [n, p] : st.params)
    for (auto& v : p->value.data) v = 1.0 + 0.5 * standard_normal(rng);
  check_module(bn4, random_tensor({3, 3, 2, 2}, rng), rng);
  BatchNorm bn2(4);
  check_module(bn2, random_tensor({5, 4}, rng), rng);
}

TEST(Layers, BatchNormStatistics) {
  std::mt19937_64 rng(4);
  BatchNorm bn(2);
  const Tensor x = random_tensor({4, 2, 3, 3}, rng);
  const Tensor y = bn.forward(x, Mode::kTrain);
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0, sq = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t k = 0; k < 9; ++k) {
        const double v = y[(n * 2 + c) * 9 + k];
        mean += v;
        sq += v * v;
      }
    EXPECT_NEAR(mean / 36, 0.0, 1e-12);
    EXPECT_NEAR(sq / 36, 1.0, 1e-4);
  }
  // Running statistics move toward the batch statistics; eval output uses them.
  const auto st = state_of(bn);
  ASSERT_EQ(st.buffers.size(), 2u);
  EXPECT_NE((*st.buffers[0].second)[0], 0.0);
  const Tensor e1 = bn.forward(x, Mode::kEval);
  const Tensor e2 = bn.forward(x, Mode::kEval);
  EXPECT_EQ(e1.data, e2.data);
}

TEST(Layers, PoolingAndLinearGradients) {
  std::mt19937_64 rng(5);
  MaxPool2d mp(3, 2, 1);
  check_module(mp, random_tensor({2, 2, 6, 6}, rng), rng);
  AvgPool2d ap(2);
  check_module(ap, random_tensor({2, 2, 4, 4}, rng), rng);
  GlobalAvgPool gap;
  check_module(gap, random_tensor({2, 3, 3, 3}, rng), rng);
  Linear lin(6, 4, rng);
  check_module(lin, random_tensor({3, 6}, rng), rng);
}

TEST(Blocks, ResidualGradients) {
  std::mt19937_64 rng(6);
  Sequential main = conv_bn_relu(2, 3, 2, rng);
  main.emplace<Conv2d>(3, 3, 3, 1, 1, false, rng);
  main.emplace<BatchNorm>(3);
  Sequential shortcut;
  shortcut.emplace<Conv2d>(2, 3, 1, 2, 0, false, rng);
  shortcut.emplace<BatchNorm>(3);
  Residual block(std::move(main), std::move(shortcut), true);
  check_module(block, random_tensor({3, 2, 4, 4}, rng), rng);
}

TEST(Blocks, PreActivationGradients) {
  std::mt19937_64 rng(7);
  Sequential pre;
  pre.emplace<BatchNorm>(2);
  pre.emplace<ReLU>();
  Sequential main;
  main.emplace<Conv2d>(2, 2, 3, 1, 1, false, rng);
  PreActResidual block(std::move(pre), std::move(main), Sequential());
  check_module(block, random_tensor({3, 2, 3, 3}, rng), rng);
}

TEST(Blocks, DenseConcatGradients) {
  std::mt19937_64 rng(8);
  DenseConcat block(conv_bn_relu(2, 3, 1, rng));
  const Tensor x = random_tensor({2, 2, 3, 3}, rng);
  const Tensor y = block.forward(x, Mode::kTrain);
  EXPECT_EQ(y.shape, (std::vector<std::size_t>{2, 5, 3, 3}));
  // Leading channels pass through unchanged.
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 18; ++k) EXPECT_EQ(y[n * 45 + k], x[n * 18 + k]);
  check_module(block, x, rng);
}

TEST(Layers, ShapeErrors) {
  std::mt19937_64 rng(9);
  Conv2d conv(3, 4, 3, 1, 1, false, rng);
  EXPECT_THROW(conv.forward(Tensor({1, 2, 4, 4}), Mode::kEval), std::invalid_argument);
  EXPECT_THROW(conv.forward(Tensor({2, 3}), Mode::kEval), std::invalid_argument);
  Linear lin(4, 2, rng);
  EXPECT_THROW(lin.forward(Tensor({2, 5}), Mode::kEval), std::invalid_argument);
}
