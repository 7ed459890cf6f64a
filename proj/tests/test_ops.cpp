#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "vfd/ops.hpp"

using namespace vfd;
using vfd::testing::grad_check;
using vfd::testing::random_tensor;

namespace {

Tensor<double> mat(Shape s, std::vector<double> v) { return Tensor<double>(std::move(s), std::move(v)); }

}  // namespace

TEST(Tensor, RejectsBufferShapeDisagreement) {
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), ShapeMismatch);
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeMismatch);
}

TEST(Tensor, CopiesDoNotAlias) {
  Tensor<float> a(Shape{2}, 1.0f);
  Tensor<float> b = a;
  b[0] = 5.0f;
  EXPECT_EQ(a[0], 1.0f);
}

TEST(Matmul, IdentityAndDot) {
  Tape<double> tape;
  auto eye = tape.constant(mat({2, 2}, {1, 0, 0, 1}));
  auto b = tape.constant(mat({2, 2}, {3, 4, 5, 6}));
  EXPECT_EQ(matmul(eye, b).value(), b.value());
  auto r = tape.constant(mat({1, 2}, {1, 2}));
  auto c = tape.constant(mat({2, 1}, {3, 4}));
  EXPECT_EQ(matmul(r, c).value().item(), 11.0);
}

TEST(Matmul, ShapeMismatch) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>(Shape{2, 3}));
  auto b = tape.constant(Tensor<double>(Shape{2, 3}));
  EXPECT_THROW(matmul(a, b), ShapeMismatch);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(1);
  auto res = grad_check([](auto&, const auto& v) { return matmul(v[0], v[1]); },
                        {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
  EXPECT_LT(res.max_rel_err, 1e-6);
  auto batched = grad_check([](auto&, const auto& v) { return matmul(v[0], v[1]); },
                            {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 5}, rng)});
  EXPECT_LT(batched.max_rel_err, 1e-6);
  auto shared = grad_check([](auto&, const auto& v) { return matmul(v[0], v[1]); },
                           {random_tensor({2, 3, 4}, rng), random_tensor({4, 5}, rng)});
  EXPECT_LT(shared.max_rel_err, 1e-6);
}

TEST(Softmax, SingleElementIsExactlyOne) {
  Tape<float> tape;
  for (float x : {-1e30f, -3.5f, 0.0f, 42.0f, 1e30f}) {
    auto y = softmax(tape.constant(Tensor<float>(Shape{1}, std::vector<float>{x})));
    EXPECT_EQ(y.value()[0], 1.0f);
  }
}

TEST(Softmax, AnalyticValues) {
  Tape<double> tape;
  auto y = softmax(tape.constant(mat({2}, {0, 0})));
  EXPECT_EQ(y.value()[0], 0.5);
  EXPECT_EQ(y.value()[1], 0.5);
  auto z = softmax(tape.constant(mat({2}, {0, std::log(3.0)})));
  EXPECT_NEAR(z.value()[0], 0.25, 1e-15);
  EXPECT_NEAR(z.value()[1], 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(3);
  for (std::size_t len : {1u, 2u, 7u, 33u}) {
    Tensor<float> x(Shape{5, len});
    for (auto& v : x.data()) v = static_cast<float>(4 * rng.normal());
    Tape<float> tape;
    auto y = softmax(tape.constant(x));
    for (std::size_t r = 0; r < 5; ++r) {
      float s = 0;
      for (std::size_t j = 0; j < len; ++j) {
        EXPECT_GE(y.value()[r * len + j], 0.0f);
        s += y.value()[r * len + j];
      }
      EXPECT_NEAR(s, 1.0f, 1e-6f);
    }
  }
}

TEST(Softmax, EmptyAxis) {
  Tape<double> tape;
  auto scalar_like = tape.constant(Tensor<double>(Shape{}));
  EXPECT_THROW(softmax(scalar_like), EmptyAxis);
}

TEST(Softmax, Gradient) {
  Rng rng(4);
  auto res = grad_check([](auto&, const auto& v) { return softmax(v[0]); }, {random_tensor({3, 5}, rng)});
  EXPECT_LT(res.max_rel_err, 1e-6);
}

TEST(Conv2d, OneByOneIdentity) {
  Rng rng(5);
  Tape<double> tape;
  auto x = tape.constant(random_tensor({2, 1, 4, 5}, rng));
  auto w = tape.constant(Tensor<double>(Shape{1, 1, 1, 1}, 1.0));
  EXPECT_EQ(conv2d(x, w, 1, 0).value(), x.value());
}

TEST(Conv2d, AveragingKernelOnConstantImage) {
  Tape<double> tape;
  const double c = 0.37;
  auto x = tape.constant(Tensor<double>(Shape{1, 1, 6, 6}, c));
  auto w = tape.constant(Tensor<double>(Shape{1, 1, 3, 3}, 1.0 / 9.0));
  auto y = conv2d(x, w, 1, 1).value();
  ASSERT_EQ(y.shape(), (Shape{1, 1, 6, 6}));
  for (std::size_t i = 1; i < 5; ++i)
    for (std::size_t j = 1; j < 5; ++j) EXPECT_NEAR(y[i * 6 + j], c, 1e-15);
}

TEST(Conv2d, CrossCorrelationConvention) {
  // An asymmetric kernel picks the right neighbour without flipping.
  Tape<double> tape;
  auto x = tape.constant(mat({1, 1, 1, 3}, {1, 2, 3}));
  Tensor<double> k(Shape{1, 1, 3, 3});
  k[5] = 1.0;  // centre row, right column
  auto y = conv2d(x, tape.constant(k), 1, 1).value();
  EXPECT_EQ(y[0], 2.0);
  EXPECT_EQ(y[1], 3.0);
  EXPECT_EQ(y[2], 0.0);
}

TEST(Conv2d, ChannelMismatch) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>(Shape{1, 2, 4, 4}));
  auto w = tape.constant(Tensor<double>(Shape{3, 3, 3, 3}));
  EXPECT_THROW(conv2d(x, w, 1, 1), ShapeMismatch);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  auto res = grad_check([](auto&, const auto& v) { return conv2d(v[0], v[1], v[2], 1, 1); },
                        {random_tensor({1, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
  EXPECT_LT(res.max_rel_err, 1e-6);
  auto strided = grad_check([](auto&, const auto& v) { return conv2d(v[0], v[1], 2, 1); },
                            {random_tensor({2, 2, 6, 6}, rng), random_tensor({4, 2, 3, 3}, rng)});
  EXPECT_LT(strided.max_rel_err, 1e-6);
}

TEST(GroupNorm, ConstantInputGivesZeros) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>(Shape{2, 4, 3, 3}, 2.5));
  auto g = tape.constant(Tensor<double>(Shape{4}, 1.0));
  auto b = tape.constant(Tensor<double>(Shape{4}, 0.0));
  for (double v : group_norm(x, g, b, 2).value().data()) EXPECT_EQ(v, 0.0);
}

TEST(GroupNorm, NormalisesEachGroup) {
  Rng rng(7);
  Tape<double> tape;
  auto x = tape.constant(random_tensor({2, 6, 4, 4}, rng, 3.0));
  auto g = tape.constant(Tensor<double>(Shape{6}, 1.0));
  auto b = tape.constant(Tensor<double>(Shape{6}, 0.0));
  auto y = group_norm(x, g, b, 3, 1e-5).value();
  const std::size_t count = 2 * 16;
  for (std::size_t grp = 0; grp < 6; ++grp) {
    double mean = 0, sq = 0;
    for (std::size_t i = 0; i < count; ++i) mean += y[grp * count + i];
    mean /= count;
    for (std::size_t i = 0; i < count; ++i) sq += (y[grp * count + i] - mean) * (y[grp * count + i] - mean);
    EXPECT_NEAR(mean, 0.0, 1e-6);
    EXPECT_NEAR(sq / count, 1.0, 1e-4);
  }
}

TEST(GroupNorm, Divisibility) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>(Shape{1, 6, 2, 2}));
  auto g = tape.constant(Tensor<double>(Shape{6}, 1.0));
  EXPECT_THROW(group_norm(x, g, g, 4), DivisibilityError);
}

TEST(GroupNorm, Gradient) {
  Rng rng(8);
  auto res = grad_check([](auto&, const auto& v) { return group_norm(v[0], v[1], v[2], 2, 1e-5); },
                        {random_tensor({2, 4, 3, 3}, rng), random_tensor({4}, rng), random_tensor({4}, rng)});
  EXPECT_LT(res.max_rel_err, 1e-6);
}

TEST(Elementwise, Identities) {
  Tape<double> tape;
  EXPECT_EQ(silu(tape.constant(Tensor<double>::scalar(0.0))).value().item(), 0.0);
  Rng rng(9);
  auto x = tape.constant(random_tensor({3, 4}, rng));
  auto z = tape.constant(Tensor<double>(Shape{3, 4}));
  EXPECT_EQ(add(x, z).value(), x.value());
  auto bad = tape.constant(Tensor<double>(Shape{3}));
  EXPECT_THROW(add(x, bad), ShapeMismatch);
}

TEST(Elementwise, Gradients) {
  Rng rng(10);
  EXPECT_LT(grad_check([](auto&, const auto& v) { return silu(v[0]); }, {random_tensor({4, 3}, rng, 2)}).max_rel_err,
            1e-6);
  EXPECT_LT(grad_check([](auto&, const auto& v) { return add(v[0], v[1]); },
                       {random_tensor({2, 3, 4}, rng), random_tensor({4}, rng)})
                .max_rel_err,
            1e-6);
  EXPECT_LT(grad_check([](auto&, const auto& v) { return scale(v[0], -2.5); }, {random_tensor({5}, rng)}).max_rel_err,
            1e-6);
}

TEST(ConcatRows, StacksInOrder) {
  Tape<double> tape;
  auto a = tape.leaf(mat({1, 4}, {1, 2, 3, 4}), true);
  auto b = tape.leaf(mat({1, 4}, {5, 6, 7, 8}), true);
  EXPECT_EQ(concat_rows<double>({a}).value(), a.value());
  auto c = concat_rows<double>({a, b});
  EXPECT_EQ(c.value(), mat({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}));
  tape.backward(sum(c));
  EXPECT_EQ(tape.grad(a), Tensor<double>(Shape{1, 4}, 1.0));
  EXPECT_EQ(tape.grad(b), Tensor<double>(Shape{1, 4}, 1.0));
  auto wrong = tape.constant(Tensor<double>(Shape{1, 3}));
  EXPECT_THROW(concat_rows<double>({a, wrong}), ShapeMismatch);
}

TEST(Backward, SimpleRules) {
  Tape<double> tape;
  Rng rng(11);
  auto x = tape.leaf(random_tensor({3, 2}, rng), true);
  tape.backward(sum(x));
  EXPECT_EQ(tape.grad(x), Tensor<double>(Shape{3, 2}, 1.0));

  Tape<double> t2;
  auto y = t2.leaf(random_tensor({4}, rng), true);
  auto unused = t2.leaf(random_tensor({2}, rng), true);
  t2.backward(scale(sum(mul(y, y)), 0.5));
  EXPECT_EQ(t2.grad(y), y.value());
  EXPECT_EQ(t2.grad(unused), Tensor<double>(Shape{2}));
  EXPECT_THROW(t2.backward(y), NonScalarLoss);
}

TEST(Backward, ShapeOpsGradients) {
  Rng rng(12);
  EXPECT_LT(grad_check([](auto&, const auto& v) { return to_tokens(v[0]); }, {random_tensor({2, 3, 2, 2}, rng)})
                .max_rel_err,
            1e-6);
  EXPECT_LT(grad_check([](auto&, const auto& v) { return upsample2x(v[0]); }, {random_tensor({1, 2, 2, 3}, rng)})
                .max_rel_err,
            1e-6);
  EXPECT_LT(grad_check([](auto&, const auto& v) { return add_channel(v[0], v[1]); },
                       {random_tensor({2, 3, 2, 2}, rng), random_tensor({2, 3}, rng)})
                .max_rel_err,
            1e-6);
  EXPECT_LT(grad_check([](auto&, const auto& v) { return mean_rows(transpose(v[0])); }, {random_tensor({2, 4, 3}, rng)})
                .max_rel_err,
            1e-6);
  EXPECT_LT(grad_check([](auto&, const auto& v) { return concat<double>({v[0], v[1]}, 1); },
                       {random_tensor({2, 3, 2}, rng), random_tensor({2, 1, 2}, rng)})
                .max_rel_err,
            1e-6);
  EXPECT_LT(grad_check([](auto&, const auto& v) { return mse(v[0], v[1]); },
                       {random_tensor({7}, rng), random_tensor({7}, rng)})
                .max_rel_err,
            1e-6);
}

TEST(Backward, Deterministic) {
  Rng rng(13);
  auto x0 = random_tensor({1, 2, 5, 5}, rng);
  auto w0 = random_tensor({3, 2, 3, 3}, rng);
  auto run = [&] {
    Tape<float> tape;
    auto x = tape.leaf(x0.cast<float>(), true);
    auto w = tape.leaf(w0.cast<float>(), true);
    tape.backward(sum(silu(conv2d(x, w, 1, 1))));
    return std::pair(tape.grad(x), tape.grad(w));
  };
  EXPECT_EQ(run(), run());
}
