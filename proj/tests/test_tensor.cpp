#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "oracles.hpp"
#include "test_util.hpp"
#include "txt/ops.hpp"
#include "txt/serialize.hpp"

using namespace txt;
using testing_util::random_tensor;
using testing_util::values;

TEST(Tensor, ShapeAndDataAgree) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.data().size(), 6u);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Matmul, IdentityTimesB) {
  Rng rng(1);
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor b = random_tensor({3, 3}, rng, -1, 1, false);
  EXPECT_EQ(values(matmul(eye, b)), values(b));
}

TEST(Matmul, HandCheckable) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {0, 1});
  EXPECT_EQ(values(matmul(a, b)), (std::vector<double>{2, 4}));
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
  EXPECT_LT(oracle::gradient_error([&] { return sum(matmul(a, b) * matmul(a, b)); }, {a, b}), 1e-6);
}

TEST(Matmul, RejectsMismatchedInnerExtent) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST(Matmul, CountsMultiplyAccumulates) {
  mac_counter() = 0;
  matmul(Tensor({3, 4}), Tensor({4, 5}));
  EXPECT_EQ(mac_counter(), 60u);
}

TEST(Softmax, UniformOnEqualInputs) {
  const auto p = values(softmax(Tensor({3}, {0, 0, 0}), 0));
  for (double v : p) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, SaturatesWithoutOverflow) {
  const auto p = values(softmax(Tensor({3}, {1000, 0, 0}), 0));
  EXPECT_NEAR(p[0], 1.0, 1e-12);
  EXPECT_NEAR(p[1], 0.0, 1e-12);
  EXPECT_NEAR(p[2], 0.0, 1e-12);
}

TEST(Softmax, SumsToOneAndGradientChecks) {
  Rng rng(3);
  Tensor x = random_tensor({7}, rng, -3, 3);
  const auto p = values(softmax(x, 0));
  double s = 0.0;
  for (double v : p) {
    EXPECT_GE(v, 0.0);
    s += v;
  }
  EXPECT_NEAR(s, 1.0, 1e-12);
  Tensor w = random_tensor({7}, rng, -1, 1, false);
  EXPECT_LT(oracle::gradient_error([&] { return sum(softmax(x, 0) * w); }, {x}), 1e-6);
}

TEST(Softmax, RowsOfMatrixNormalizeIndependently) {
  Rng rng(4);
  const Tensor p = softmax(random_tensor({4, 6}, rng, -5, 5, false), 1);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) s += p.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  const auto y = values(layer_norm(Tensor({1, 4}, 3.0), Tensor({4}, 1.0), Tensor({4}, 0.0)));
  for (double v : y) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, NormalizedRowIsFixed) {
  const auto y = values(layer_norm(Tensor({1, 2}, {1, -1}), Tensor({2}, 1.0), Tensor({2}, 0.0), 1e-15));
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], -1.0, 1e-12);
}

TEST(LayerNorm, MomentsAndGradient) {
  Rng rng(5);
  Tensor x = random_tensor({1, 9}, rng, -2, 2);
  Tensor g = random_tensor({9}, rng), b = random_tensor({9}, rng);
  const auto y = values(layer_norm(x, Tensor({9}, 1.0), Tensor({9}, 0.0)));
  double mu = 0.0, var = 0.0;
  for (double v : y) mu += v / 9.0;
  for (double v : y) var += (v - mu) * (v - mu) / 9.0;
  EXPECT_LT(std::abs(mu), 1e-12);
  EXPECT_NEAR(var, 1.0, 1e-4);
  Tensor w = random_tensor({1, 9}, rng, -1, 1, false);
  EXPECT_LT(oracle::gradient_error([&] { return sum(layer_norm(x, g, b) * w); }, {x, g, b}), 1e-5);
}

TEST(BilinearSample, GridPointIdentity) {
  Rng rng(6);
  Tensor map = random_tensor({3, 4, 2}, rng, -1, 1, false);
  const Tensor s = bilinear_sample(map, Tensor({1, 2}, {2, 1}));  // x = 2 (column), y = 1 (row)
  EXPECT_EQ(s.at(0, 0), map.at(1, 2, 0));
  EXPECT_EQ(s.at(0, 1), map.at(1, 2, 1));
}

TEST(BilinearSample, PatchMidpointIsMean) {
  Tensor map({2, 2, 1}, {1, 2, 3, 10});
  EXPECT_DOUBLE_EQ(bilinear_sample(map, Tensor({1, 2}, {0.5, 0.5})).item(), 4.0);
}

TEST(BilinearSample, FarOutsideIsZero) {
  Rng rng(7);
  Tensor map = random_tensor({3, 3, 4}, rng, 1, 2, false);
  for (double v : values(bilinear_sample(map, Tensor({1, 2}, {-5, -5})))) EXPECT_EQ(v, 0.0);
}

TEST(BilinearSample, GradientInMapAndPoints) {
  Rng rng(8);
  Tensor map = random_tensor({4, 5, 3}, rng);
  Tensor pts = random_tensor({6, 2}, rng, -0.7, 4.3);
  Tensor w = random_tensor({6, 3}, rng, -1, 1, false);
  EXPECT_LT(oracle::gradient_error([&] { return sum(bilinear_sample(map, pts) * w); }, {map, pts}), 1e-6);
}

TEST(Backward, SquareSum) {
  Tensor x = Tensor({2}, {1, 2});
  x.set_requires_grad(true);
  sum(x * x).backward();
  EXPECT_EQ(values(x.grad_tensor()), (std::vector<double>{2, 4}));
}

TEST(Backward, SoftmaxCrossEntropyGradientIsPMinusY) {
  Rng rng(9);
  Tensor logits = random_tensor({1, 5}, rng, -2, 2);
  cross_entropy(logits, {3}).backward();
  const auto p = values(softmax(logits.detach(), 1));
  for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(logits.grad()[j], p[j] - (j == 3 ? 1.0 : 0.0), 1e-14);
}

TEST(Backward, LeafGradsAccumulateUntilZeroed) {
  Tensor x = Tensor({1}, {3.0});
  x.set_requires_grad(true);
  sum(x * x).backward();
  sum(x * x).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
  x.zero_grad();
  sum(x * x).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, SharedSubexpressionVisitedOnce) {
  Tensor x = Tensor({1}, {2.0});
  x.set_requires_grad(true);
  Tensor y = x * x;        // 4
  sum(y * y + y).backward();  // y^2 + y, d/dx = (2y + 1) 2x = 36
  EXPECT_DOUBLE_EQ(x.grad()[0], 36.0);
}

TEST(Backward, ReplayIsBitIdentical) {
  Rng rng(10);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  auto run = [&] {
    a.zero_grad();
    b.zero_grad();
    sum(softmax(matmul(a, b), 1) * matmul(a, b)).backward();
    return std::make_pair(values(a.grad_tensor()), values(b.grad_tensor()));
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x = Tensor({1}, {2.0});
  x.set_requires_grad(true);
  NoGradGuard guard;
  Tensor y = x * x;
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
}

TEST(Ops, ElementwiseAndReductionGradients) {
  Rng rng(11);
  Tensor x = random_tensor({3, 4}, rng, 0.2, 1.5), y = random_tensor({3, 4}, rng, 0.2, 1.5);
  EXPECT_LT(oracle::gradient_error([&] { return sum(log(x) * exp(y) / (x + y)); }, {x, y}), 1e-6);
  EXPECT_LT(oracle::gradient_error([&] { return sum(mean(tanh(x), 1) * sum(sigmoid(y), 1)); }, {x, y}), 1e-6);
  EXPECT_LT(oracle::gradient_error([&] { return sum(softplus(x - y) * pow(x, 1.5)); }, {x, y}), 1e-6);
  EXPECT_LT(oracle::gradient_error([&] { return sum(concat({x, y}, 0) * concat({y, x}, 0)); }, {x, y}), 1e-6);
  EXPECT_LT(oracle::gradient_error([&] { return sum(log_softmax(x, 1) * y); }, {x, y}), 1e-6);
  EXPECT_LT(oracle::gradient_error([&] { return sum(gather_rows(x, {2, 0, 2}) * gather_rows(y, {1, 1, 0})); }, {x, y}),
            1e-6);
}

TEST(Conv2d, MatchesDirectLoopAndCountsMacs) {
  Rng rng(12);
  Tensor x = random_tensor({5, 6, 2}, rng), w = random_tensor({3, 3, 2, 4}, rng), b = random_tensor({4}, rng);
  mac_counter() = 0;
  const Tensor y = conv2d(x, w, b, 2, 1);
  ASSERT_EQ(y.shape(), (Shape{3, 3, 4}));
  EXPECT_EQ(mac_counter(), 3u * 3 * 9 * 2 * 4);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t o = 0; o < 4; ++o) {
        double acc = b[o];
        for (std::size_t ki = 0; ki < 3; ++ki)
          for (std::size_t kj = 0; kj < 3; ++kj) {
            const long r = static_cast<long>(2 * i + ki) - 1, c = static_cast<long>(2 * j + kj) - 1;
            if (r < 0 || c < 0 || r >= 5 || c >= 6) continue;
            for (std::size_t ci = 0; ci < 2; ++ci)
              acc += x.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), ci) *
                     w[((ki * 3 + kj) * 2 + ci) * 4 + o];
          }
        EXPECT_NEAR(y.at(i, j, o), acc, 1e-12);
      }
  Tensor sel = random_tensor({3, 3, 4}, rng, -1, 1, false);
  EXPECT_LT(oracle::gradient_error([&] { return sum(conv2d(x, w, b, 2, 1) * sel); }, {x, w, b}), 1e-6);
}

TEST(Serialize, LittleEndianLayout) {
  std::ostringstream out;
  write_tensor(out, Tensor({2}, {1.0, -2.5}));
  const std::string bytes = out.str();
  ASSERT_EQ(bytes.size(), 8u + 8u + 16u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 1u);  // rank
  for (int i = 1; i < 8; ++i) EXPECT_EQ(bytes[i], 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2u);  // extent
  double v;
  std::memcpy(&v, bytes.data() + 24, 8);
  EXPECT_EQ(v, -2.5);
}

TEST(Serialize, RoundTrip) {
  Rng rng(13);
  const Tensor t = random_tensor({2, 3, 4}, rng, -1, 1, false);
  std::stringstream io;
  write_tensor(io, t);
  const Tensor back = read_tensor(io);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(values(back), values(t));
}

TEST(Serialize, CheckpointRoundTripAndAssign) {
  Rng rng(14);
  NamedTensors a{{"w", random_tensor({3, 2}, rng)}, {"b", random_tensor({2}, rng)}};
  const auto path = std::filesystem::temp_directory_path() / "txt_checkpoint_test.bin";
  save_tensors(path, a);
  NamedTensors target{{"w", Tensor({3, 2})}, {"b", Tensor({2})}};
  assign_tensors(target, load_tensors(path));
  EXPECT_EQ(values(target[0].second), values(a[0].second));
  EXPECT_EQ(values(target[1].second), values(a[1].second));
  NamedTensors wrong{{"w", Tensor({2, 3})}, {"b", Tensor({2})}};
  EXPECT_ANY_THROW(assign_tensors(wrong, load_tensors(path)));
  std::filesystem::remove(path);
}
