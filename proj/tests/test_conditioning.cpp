#include <cmath>
#include <numbers>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "vfd/conditioning.hpp"
#include "vfd/diffusion.hpp"

using namespace vfd;

namespace {

struct Fixture {
  ModelConfig cfg;
  ParamSet<double> params = init_model<double>(ModelConfig{}, 3);
  Tape<double> tape;
  Binder<double> p{tape, params, false};

  Var<double> image(std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> t(Shape{3, cfg.resolution, cfg.resolution});
    for (auto& v : t.data()) v = rng.uniform();
    return tape.constant(t);
  }
};

bool rows_equal(const Tensor<double>& a, std::size_t ra, const Tensor<double>& b, std::size_t rb) {
  const std::size_t d = a.dim(1);
  for (std::size_t j = 0; j < d; ++j)
    if (a[ra * d + j] != b[rb * d + j]) return false;
  return true;
}

}  // namespace

TEST(ParseMode, Letters) {
  EXPECT_EQ(parse_mode("a"), ContextMode::A);
  EXPECT_EQ(parse_mode("B"), ContextMode::B);
  EXPECT_EQ(parse_mode("c"), ContextMode::C);
  EXPECT_THROW(parse_mode("d"), ConfigError);
}

TEST(EncodeImage, IdenticalImagesEncodeIdentically) {
  Fixture f;
  const auto a = encode_image(f.p, f.cfg, f.image(1));
  const auto b = encode_image(f.p, f.cfg, f.image(1));
  EXPECT_EQ(a.pooled.value(), b.pooled.value());
  EXPECT_EQ(a.tokens.value(), b.tokens.value());
  EXPECT_EQ(a.tokens.shape(), (Shape{16, 64}));
  EXPECT_EQ(a.pooled.shape(), (Shape{1, 64}));
}

TEST(EncodeImage, PooledIsPoolHeadOfTokenMean) {
  Fixture f;
  const auto e = encode_image(f.p, f.cfg, f.image(2));
  const auto& tok = e.tokens.value();
  const auto& w = f.params.at("enc.pool.w");
  const auto& b = f.params.at("enc.pool.b");
  for (std::size_t j = 0; j < f.cfg.d_embed; ++j) {
    double acc = b[j];
    for (std::size_t k = 0; k < f.cfg.d_ctx; ++k) {
      double mean = 0;
      for (std::size_t r = 0; r < f.cfg.n_tok; ++r) mean += tok[r * f.cfg.d_ctx + k];
      acc += mean / static_cast<double>(f.cfg.n_tok) * w[k * f.cfg.d_embed + j];
    }
    EXPECT_NEAR(e.pooled.value()[j], acc, 1e-12);
  }
}

TEST(EncodeImage, WrongResolution) {
  Fixture f;
  auto small = f.tape.constant(Tensor<double>(Shape{3, 16, 16}));
  EXPECT_THROW(encode_image(f.p, f.cfg, small), ShapeMismatch);
}

TEST(EncodeImage, FrontAndBackCubeDiffer) {
  Fixture f;
  SceneSpec s;
  s.primitive = Primitive::Cube;
  s.face_albedo = {Rgb{0.9, 0.1, 0.1}, Rgb{0.1, 0.1, 0.9}, Rgb{0.1, 0.9, 0.1},
                   Rgb{0.9, 0.9, 0.1}, Rgb{0.5, 0.5, 0.5}, Rgb{0.5, 0.5, 0.5}};
  auto front = f.tape.constant(render_view(s, CameraPose(2, 0, 0.2), 32).image.cast<double>());
  auto back = f.tape.constant(render_view(s, CameraPose(2, std::numbers::pi, 0.2), 32).image.cast<double>());
  const auto a = encode_image(f.p, f.cfg, front).pooled.value();
  const auto b = encode_image(f.p, f.cfg, back).pooled.value();
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  EXPECT_LT(dot / std::sqrt(na * nb), 1.0);
}

TEST(LegacyContext, ShapeAndLinearity) {
  Fixture f;
  const RelPoseFeature pose{0.1, 0.2, 0.9, -0.3};
  const auto ctx = build_context_legacy(f.p, f.cfg, f.image(4), pose);
  EXPECT_EQ(ctx.tokens.shape(), (Shape{1, 64}));
  EXPECT_EQ(ctx.length(), 1u);
  EXPECT_EQ(ctx.mode, ContextMode::A);

  // Bias-free encoder convolutions plus zero biases make a zero input map to zero.
  Fixture z;
  z.params.at("enc.pool.b") = Tensor<double>(Shape{64});
  z.params.at("proj.legacy.b") = Tensor<double>(Shape{64});
  const auto zero = build_context_legacy(z.p, z.cfg, z.tape.constant(Tensor<double>(Shape{3, 32, 32})), RelPoseFeature{});
  for (double v : zero.tokens.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(LegacyContext, PoseBlockHasFullColumnRank) {
  const auto ps = init_model<double>(ModelConfig{}, 11);
  const auto& w = ps.at("proj.legacy.w");  // [(d_embed + 4), d_ctx]
  Eigen::MatrixXd block(kPoseDim, 64);
  for (std::size_t r = 0; r < kPoseDim; ++r)
    for (std::size_t c = 0; c < 64; ++c) block(r, c) = w[(64 + r) * 64 + c];
  EXPECT_EQ(Eigen::FullPivLU<Eigen::MatrixXd>(block.transpose()).rank(), static_cast<Eigen::Index>(kPoseDim));

  Fixture f;
  auto img = f.image(5);
  const auto a = build_context_legacy(f.p, f.cfg, img, RelPoseFeature{0, 0, 1, 0});
  const auto b = build_context_legacy(f.p, f.cfg, img, RelPoseFeature{0.3, 1, 0, 0.2});
  EXPECT_NE(a.tokens.value(), b.tokens.value());
}

TEST(RevampedContext, ShapeProvenanceAndPoseRow) {
  Fixture f;
  auto img = f.image(6);
  const auto a = build_context_revamped(f.p, f.cfg, img, RelPoseFeature{0, 0, 1, 0});
  const auto b = build_context_revamped(f.p, f.cfg, img, RelPoseFeature{0.3, 1, 0, 0.2});
  EXPECT_EQ(a.tokens.shape(), (Shape{17, 64}));
  ASSERT_EQ(a.provenance.size(), 1u);
  EXPECT_EQ(a.provenance[0], (ViewSpan{0, 0, 17}));
  for (std::size_t r = 0; r < 16; ++r) EXPECT_TRUE(rows_equal(a.tokens.value(), r, b.tokens.value(), r));
  EXPECT_FALSE(rows_equal(a.tokens.value(), 16, b.tokens.value(), 16));
}

TEST(MultiviewContext, SingleViewMatchesSingleViewBuilder) {
  Fixture f;
  const std::vector<ConditionView<double>> one{{f.image(7), RelPoseFeature{0.1, 0.5, 0.8, 0.0}}};
  for (ContextMode per : {ContextMode::A, ContextMode::B}) {
    const auto mv = build_context_multiview<double>(f.p, f.cfg, one, per);
    const auto single = per == ContextMode::A ? build_context_legacy(f.p, f.cfg, one[0].image, one[0].pose)
                                              : build_context_revamped(f.p, f.cfg, one[0].image, one[0].pose);
    EXPECT_EQ(mv.tokens.value(), single.tokens.value());
    EXPECT_EQ(mv.mode, ContextMode::C);
  }
}

TEST(MultiviewContext, LengthsAndPermutation) {
  Fixture f;
  std::vector<ConditionView<double>> views{{f.image(8), RelPoseFeature{0.1, 0, 1, 0}},
                                           {f.image(9), RelPoseFeature{-0.2, 1, 0, 0.1}},
                                           {f.image(10), RelPoseFeature{0.0, 0, -1, -0.1}}};
  const auto ctx = build_context_multiview<double>(f.p, f.cfg, views, ContextMode::B);
  EXPECT_EQ(ctx.length(), 51u);
  ASSERT_EQ(ctx.provenance.size(), 3u);
  EXPECT_EQ(ctx.provenance[2], (ViewSpan{2, 34, 51}));
  EXPECT_EQ(context_length(f.cfg, ContextMode::C, 3), 51u);
  EXPECT_EQ(build_context_multiview<double>(f.p, f.cfg, views, ContextMode::A).length(), 3u);

  std::vector<ConditionView<double>> perm{views[2], views[0], views[1]};
  const auto pc = build_context_multiview<double>(f.p, f.cfg, perm, ContextMode::B);
  const std::size_t src[] = {2, 0, 1};
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t r = 0; r < 17; ++r)
      EXPECT_TRUE(rows_equal(pc.tokens.value(), k * 17 + r, ctx.tokens.value(), src[k] * 17 + r));
}

TEST(MultiviewContext, EmptyViewList) {
  Fixture f;
  EXPECT_THROW(build_context_multiview<double>(f.p, f.cfg, {}, ContextMode::B), EmptyViewList);
}

TEST(NullContext, LengthsAndStability) {
  Fixture f;
  EXPECT_EQ(null_context(f.p, f.cfg, ContextMode::A).length(), 1u);
  EXPECT_EQ(null_context(f.p, f.cfg, ContextMode::B).length(), 17u);
  EXPECT_EQ(null_context(f.p, f.cfg, ContextMode::C, 2).length(), 34u);
  EXPECT_EQ(null_context(f.p, f.cfg, ContextMode::C, 2, ContextMode::A).length(), 2u);
  EXPECT_EQ(null_context(f.p, f.cfg, ContextMode::B).tokens.value(), null_context(f.p, f.cfg, ContextMode::B).tokens.value());
}

TEST(ModelConfig, Validation) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.n_tok = 15;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.resolution = 16;
  c.n_tok = 4;
  EXPECT_NO_THROW(c.validate());
  c.groups = 5;
  EXPECT_THROW(c.validate(), ConfigError);
}
