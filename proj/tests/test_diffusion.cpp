#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "model_fixtures.hpp"
#include "vfd/config.hpp"
#include "vfd/dataset.hpp"
#include "vfd/diffusion.hpp"

using namespace vfd;
using namespace vfd::testing;

// ---------------------------------------------------------------------------
// Schedule and forward process

TEST(Schedule, SingleStep) {
  const auto s = build_schedule(1, 0.3, 0.3);
  ASSERT_EQ(s.steps(), 1u);
  EXPECT_EQ(s.alpha_bar[0], 1.0 - 0.3);
}

TEST(Schedule, LinearScheduleProduct) {
  const auto s = build_schedule(200, 1e-4, 0.02);
  EXPECT_EQ(s.beta.front(), 1e-4);
  EXPECT_NEAR(s.beta.back(), 0.02, 1e-15);
  double running = 1.0;
  double log_sum = 0.0;
  for (std::size_t t = 0; t < 200; ++t) {
    EXPECT_GT(s.beta[t], 0.0);
    EXPECT_LT(s.beta[t], 1.0);
    if (t > 0) EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
    running *= 1.0 - s.beta[t];
    EXPECT_NEAR(s.alpha_bar[t], running, 1e-7);
    log_sum += std::log1p(-(1e-4 + (0.02 - 1e-4) * static_cast<double>(t) / 199.0));
  }
  // 200 steps of this range leave about 13% of the signal variance.
  EXPECT_NEAR(s.alpha_bar.back(), std::exp(log_sum), 1e-12);
  EXPECT_NEAR(s.alpha_bar.back(), 0.1322, 1e-3);
}

TEST(Schedule, DefaultScheduleEndsNearPureNoise) {
  const ScheduleConfig d;
  const auto s = build_schedule(d.steps, d.beta_start, d.beta_end);
  for (std::size_t t = 1; t < d.steps; ++t) EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
  EXPECT_LT(s.alpha_bar.back(), 0.05);
  // Product of (1 - beta) for 1e-4 -> 0.035 over 200 steps, computed separately.
  EXPECT_NEAR(s.alpha_bar.back(), 0.028673, 1e-5);
}

TEST(Schedule, BadRange) {
  EXPECT_THROW(build_schedule(10, 0.0, 0.02), BadRange);
  EXPECT_THROW(build_schedule(10, 0.03, 0.02), BadRange);
  EXPECT_THROW(build_schedule(10, 1e-4, 1.0), BadRange);
  EXPECT_THROW(build_schedule(0, 1e-4, 0.02), BadRange);
}

TEST(QSample, Identities) {
  Rng rng(1);
  const auto z0 = random_tensor({3, 4, 4}, rng);
  const auto eps = random_tensor({3, 4, 4}, rng);
  // beta so small that 1 - beta rounds to 1 in double.
  const auto flat = build_schedule(3, 1e-20, 1e-20);
  EXPECT_EQ(q_sample(z0, 2, eps, flat), z0);

  const auto s = build_schedule(200, 1e-4, 0.02);
  const auto zt = q_sample(z0, 50, Tensor<double>(Shape{3, 4, 4}), s);
  for (std::size_t i = 0; i < z0.numel(); ++i) EXPECT_EQ(zt[i], std::sqrt(s.alpha_bar_at(50)) * z0[i]);

  EXPECT_THROW(q_sample(z0, 0, eps, s), TOutOfRange);
  EXPECT_THROW(q_sample(z0, 201, eps, s), TOutOfRange);
  EXPECT_THROW(q_sample(z0, 1, Tensor<double>(Shape{3, 4}), s), ShapeMismatch);
}

TEST(QSample, MonteCarloVariance) {
  const auto s = build_schedule(200, 1e-4, 0.02);
  const Tensor<double> z0(Shape{1});
  for (std::size_t t : {1u, 20u, 100u, 200u}) {
    Rng rng(derive_seed(2, "variance", t));
    double acc = 0;
    for (int i = 0; i < 10000; ++i) {
      const Tensor<double> eps(Shape{1}, rng.normal());
      acc += std::pow(q_sample(z0, t, eps, s)[0], 2);
    }
    const double expected = 1.0 - s.alpha_bar_at(t);
    EXPECT_NEAR(acc / 10000.0, expected, 0.05 * expected) << "t=" << t;
  }
}

// ---------------------------------------------------------------------------
// Attention

namespace {

struct AttnSetup {
  Tape<double> tape;
  AttentionWeights<double> w;
  AttnSetup(std::size_t d, std::size_t dc, std::uint64_t seed) {
    Rng rng(seed);
    w = {tape.constant(random_tensor({d, d}, rng)), tape.constant(random_tensor({dc, d}, rng)),
         tape.constant(random_tensor({dc, d}, rng)), tape.constant(random_tensor({d, d}, rng)),
         tape.constant(random_tensor({d}, rng))};
  }
};

}  // namespace

TEST(CrossAttention, SingleTokenIsQueryIndependent) {
  AttnSetup a(8, 6, 3);
  Rng rng(4);
  auto ctx = a.tape.constant(random_tensor({1, 6}, rng));
  const auto r1 = cross_attention(a.tape.constant(random_tensor({10, 8}, rng)), ctx, a.w);
  const auto r2 = cross_attention(a.tape.constant(random_tensor({10, 8}, rng, 7.0)), ctx, a.w);
  EXPECT_EQ(r1.out.value(), r2.out.value());
  for (std::size_t s = 1; s < 10; ++s)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(r1.out.value()[s * 8 + j], r1.out.value()[j], 1e-12);
  for (double v : r1.weights.value().data()) EXPECT_EQ(v, 1.0);
}

TEST(CrossAttention, SaturatesOnAlignedKey) {
  Tape<double> tape;
  auto eye = tape.constant(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 0, 0, 1}));
  AttentionWeights<double> w{eye, eye, eye, eye, tape.constant(Tensor<double>(Shape{2}))};
  auto ctx = tape.constant(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 0, 0, 1}));
  auto q = tape.constant(Tensor<double>(Shape{1, 2}, std::vector<double>{100, 0}));
  const auto r = cross_attention(q, ctx, w);
  EXPECT_GT(r.weights.value()[0], 1.0 - 1e-12);
}

TEST(CrossAttention, RowsSumToOne) {
  for (std::size_t L : {1u, 2u, 5u, 17u, 51u}) {
    AttnSetup a(8, 6, 10 + L);
    Rng rng(L);
    const auto r = cross_attention(a.tape.constant(random_tensor({2, 7, 8}, rng)),
                                   a.tape.constant(random_tensor({2, L, 6}, rng)), a.w);
    const auto& wts = r.weights.value();
    for (std::size_t row = 0; row < 14; ++row) {
      double s = 0;
      for (std::size_t l = 0; l < L; ++l) s += wts[row * L + l];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(CrossAttention, MultiTokenIsQueryDependent) {
  AttnSetup a(8, 6, 5);
  Rng rng(6);
  auto ctx = a.tape.constant(random_tensor({17, 6}, rng));
  const auto r1 = cross_attention(a.tape.constant(random_tensor({4, 8}, rng)), ctx, a.w);
  const auto r2 = cross_attention(a.tape.constant(random_tensor({4, 8}, rng)), ctx, a.w);
  EXPECT_GT(max_abs_diff(r1.out.value(), r2.out.value()), 1e-3);
}

TEST(CrossAttention, ShapeMismatch) {
  AttnSetup a(8, 6, 7);
  Rng rng(8);
  EXPECT_THROW(cross_attention(a.tape.constant(random_tensor({4, 5}, rng)), a.tape.constant(random_tensor({2, 6}, rng)), a.w),
               ShapeMismatch);
  EXPECT_THROW(cross_attention(a.tape.constant(random_tensor({4, 8}, rng)), a.tape.constant(random_tensor({2, 5}, rng)), a.w),
               ShapeMismatch);
}

TEST(CrossAttention, GradCheck) {
  for (std::size_t L : {1u, 3u, 6u}) {
    Rng rng(40 + L);
    std::vector<Tensor<double>> in{random_tensor({2, 5, 4}, rng), random_tensor({2, L, 3}, rng),
                                   random_tensor({4, 4}, rng),    random_tensor({3, 4}, rng),
                                   random_tensor({3, 4}, rng),    random_tensor({4, 4}, rng),
                                   random_tensor({4}, rng)};
    Fn fn = [](Tape<double>&, const std::vector<Var<double>>& v) {
      return cross_attention(v[0], v[1], AttentionWeights<double>{v[2], v[3], v[4], v[5], v[6]}).out;
    };
    EXPECT_LT(grad_check(fn, in).max_rel_err, 1e-6) << "L=" << L;
  }
}

// ---------------------------------------------------------------------------
// Denoiser

TEST(PredictEps, ShapeForAllModes) {
  const auto c = tiny_config();
  const auto ps = live_model<double>(c, 1);
  const auto batch = random_batch(c, 1, 2, 9);
  Tape<double> tape;
  Binder<double> p(tape, ps, false);
  auto z = tape.constant(to_signed<double>(batch[0].target));
  const auto views = condition_views(tape, batch[0]);
  for (ContextMode m : {ContextMode::A, ContextMode::B, ContextMode::C}) {
    const auto ctx = build_context(p, c, m, std::span<const ConditionView<double>>(views));
    EXPECT_EQ(predict_eps(p, c, z, 17, ctx).shape(), z.shape());
  }
  EXPECT_THROW(predict_eps(p, c, tape.constant(Tensor<double>(Shape{3, 8, 8})), 1,
                           null_context(p, c, ContextMode::B)),
               ShapeMismatch);
}

TEST(PredictEps, Deterministic) {
  const auto c = tiny_config();
  const auto ps = live_model<float>(c, 2);
  auto run = [&] {
    Tape<float> tape;
    Binder<float> p(tape, ps, false);
    auto z = tape.constant(Tensor<float>(Shape{3, 16, 16}, 0.25f));
    return predict_eps(p, c, z, 5, null_context(p, c, ContextMode::B)).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(PredictEps, ModeACrossAttentionIgnoresHiddenState) {
  const auto c = tiny_config();
  const auto ps = live_model<double>(c, 3);
  const auto batch = random_batch(c, 2, 1, 10);
  auto run = [&](const Tensor<float>& zimg, double ctx_shift, AttentionProbe<double>& probe) {
    Tape<double> tape;
    Binder<double> p(tape, ps, false);
    const auto views = condition_views(tape, batch[0]);
    auto ctx = build_context(p, c, ContextMode::A, std::span<const ConditionView<double>>(views));
    if (ctx_shift != 0) ctx.tokens = add(ctx.tokens, tape.constant(Tensor<double>(Shape{c.d_ctx}, ctx_shift)));
    return predict_eps(p, c, tape.constant(to_signed<double>(zimg)), 50, ctx, &probe).value();
  };
  AttentionProbe<double> p1, p2, p3;
  const auto e1 = run(batch[0].target, 0, p1);
  const auto e2 = run(batch[1].target, 0, p2);
  const auto e3 = run(batch[0].target, 0.5, p3);
  EXPECT_GT(max_abs_diff(p1.block_input, p2.block_input), 1e-3);
  EXPECT_LE(max_abs_diff(p1.cross_output, p2.cross_output), 1e-12);
  EXPECT_GT(max_abs_diff(e1, e2), 1e-6);
  EXPECT_GT(max_abs_diff(e1, e3), 1e-6);
  for (double v : p1.cross_weights.data()) EXPECT_EQ(v, 1.0);
}

TEST(PredictEps, ZeroOutputLayerAtInit) {
  const ModelConfig c;
  const auto ps = init_model<float>(c, 4);
  Tape<float> tape;
  Binder<float> p(tape, ps, false);
  auto z = tape.constant(Tensor<float>(Shape{3, 32, 32}, 0.3f));
  for (float v : predict_eps(p, c, z, 100, null_context(p, c, ContextMode::A)).value().data()) EXPECT_EQ(v, 0.0f);
}

TEST(PredictEps, SingleWeightSliceGradientInFloat) {
  const auto c = tiny_config();
  const auto ps = live_model<float>(c, 5);
  const auto batch = random_batch(c, 2, 1, 11);
  const auto sched = build_schedule(200, 1e-4, 0.02);
  const ContextSpec spec{ContextMode::B, ContextMode::B, 1};
  const std::string name = "unet.res3.conv2.w";
  auto loss_with = [&](const ParamSet<float>& params, std::map<std::string, Tensor<float>>* grads) {
    Tape<float> tape;
    Binder<float> p(tape, params, grads != nullptr);
    Rng rng(77);
    auto loss = loss_step<float>(p, c, sched, spec, batch, 0.0, rng);
    if (grads) {
      tape.backward(loss);
      *grads = p.grads();
    }
    return static_cast<double>(loss.value().item());
  };
  std::map<std::string, Tensor<float>> grads;
  loss_with(ps, &grads);
  const auto& g = grads.at(name);
  double num = 0, den = 0;
  const float h = 1e-2f;
  for (std::size_t i = 0; i < 8; ++i) {
    auto plus = ps, minus = ps;
    plus.at(name)[i] += h;
    minus.at(name)[i] -= h;
    const double fd = (loss_with(plus, nullptr) - loss_with(minus, nullptr)) / (2.0 * h);
    num = std::max(num, std::abs(fd - g[i]));
    den = std::max(den, std::abs(fd));
  }
  EXPECT_LT(num / den, 1e-3);
}

TEST(FullLoss, GradCheckDoubleCoversEveryPath) {
  for (ContextMode m : {ContextMode::A, ContextMode::B}) {
    const auto names = grad_check_params(m);
    const auto r = full_loss_grad_check(tiny_config(0), {m, ContextMode::B, 1}, names, 12);
    EXPECT_LT(r.max_rel_err, 1e-6) << "mode " << mode_letter(m);
    for (std::size_t i = 0; i < names.size(); ++i) {
      const bool degenerate = m == ContextMode::A && (names[i] == "unet.xf.cross.wq" || names[i] == "unet.xf.cross.wk");
      if (degenerate) {
        EXPECT_EQ(r.fd_scale[i], 0.0) << names[i];
      } else {
        EXPECT_GT(r.fd_scale[i], 0.0) << names[i];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Training objective

TEST(LossStep, OracleAndZeroPredictors) {
  const auto c = tiny_config();
  const auto ps = init_model<double>(c, 6);
  const auto batch = random_batch(c, 8, 1, 12);
  const auto sched = build_schedule(200, 1e-4, 0.02);
  const ContextSpec spec{ContextMode::A, ContextMode::B, 1};

  // Oracle: recover eps from z_t, the known clean targets and t.
  EpsPredictor<double> oracle = [&](const Var<double>& z_t, std::span<const std::size_t> t, const Var<double>&) {
    Tensor<double> eps(z_t.shape());
    const std::size_t per = eps.numel() / batch.size();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const double ab = sched.alpha_bar_at(t[b]);
      const auto z0 = to_signed<double>(batch[b].target);
      for (std::size_t i = 0; i < per; ++i)
        eps[b * per + i] = (z_t.value()[b * per + i] - std::sqrt(ab) * z0[i]) / std::sqrt(1.0 - ab);
    }
    return z_t.tape().constant(eps);
  };
  EpsPredictor<double> zero = [](const Var<double>& z_t, std::span<const std::size_t>, const Var<double>&) {
    return z_t.tape().constant(Tensor<double>(z_t.shape()));
  };
  {
    Tape<double> tape;
    Binder<double> p(tape, ps, false);
    Rng rng(1);
    EXPECT_NEAR(loss_step<double>(p, c, sched, spec, batch, 0.1, rng, oracle).value().item(), 0.0, 1e-12);
  }
  {
    Tape<double> tape;
    Binder<double> p(tape, ps, false);
    Rng rng(1);
    EXPECT_NEAR(loss_step<double>(p, c, sched, spec, batch, 0.1, rng, zero).value().item(), 1.0, 0.05);
  }
  Tape<double> tape;
  Binder<double> p(tape, ps, false);
  Rng rng(1);
  EXPECT_THROW(loss_step<double>(p, c, sched, spec, batch, 1.0, rng), BadRange);
}

TEST(LossStep, InitialLossOnRenderedScenes) {
  const auto root = std::filesystem::temp_directory_path() / "vfd_test_initial_loss";
  std::filesystem::remove_all(root);
  make_dataset(root, 8, 12, 32, 3);
  const auto data = load_dataset(root);
  const ModelConfig c;
  const auto ps = init_model<float>(c, 7);
  std::vector<MultiViewSample> batch;
  for (const auto& sc : data.scenes)
    batch.push_back({{sc.images[0]}, {relative_pose(sc.poses[0], sc.poses[1])}, sc.images[1]});
  const auto sched = build_schedule(200, 1e-4, 0.02);
  Tape<float> tape;
  Binder<float> p(tape, ps, false);
  Rng rng(8);
  const double loss = loss_step<float>(p, c, sched, {ContextMode::B, ContextMode::B, 1}, batch, 0.1, rng).value().item();
  EXPECT_NEAR(loss, 1.0, 0.3);
  std::filesystem::remove_all(root);
}

TEST(LossStep, SameSeedSameLoss) {
  const auto c = tiny_config();
  const auto ps = live_model<float>(c, 8);
  const auto batch = random_batch(c, 4, 2, 13);
  const auto sched = build_schedule(200, 1e-4, 0.02);
  auto run = [&] {
    Tape<float> tape;
    Binder<float> p(tape, ps, false);
    Rng rng(5);
    return loss_step<float>(p, c, sched, {ContextMode::C, ContextMode::B, 2}, batch, 0.3, rng).value().item();
  };
  EXPECT_EQ(run(), run());
}

// ---------------------------------------------------------------------------
// Guidance and sampling

TEST(CfgCombine, ExactIdentities) {
  Rng rng(9);
  const auto c = random_tensor({3, 8, 8}, rng).cast<float>();
  const auto u = random_tensor({3, 8, 8}, rng).cast<float>();
  EXPECT_EQ(cfg_combine(c, u, 1.0), c);
  EXPECT_EQ(cfg_combine(c, u, 0.0), u);
  const auto four = cfg_combine(Tensor<float>(Shape{2, 2}, 1.0f), Tensor<float>(Shape{2, 2}, 0.0f), 4.0);
  for (float v : four.data()) EXPECT_EQ(v, 4.0f);
  EXPECT_THROW(cfg_combine(c, Tensor<float>(Shape{3, 8}), 2.0), ShapeMismatch);
}

TEST(Ddim, Timesteps) {
  const auto all = ddim_timesteps(200, 200);
  ASSERT_EQ(all.size(), 200u);
  for (std::size_t k = 0; k < 200; ++k) EXPECT_EQ(all[k], 200 - k);
  for (std::size_t n : {20u, 50u, 100u, 150u, 200u}) {
    const auto ts = ddim_timesteps(200, n);
    EXPECT_EQ(ts.size(), n);
    EXPECT_EQ(ts.front(), 200u);
    EXPECT_GE(ts.back(), 1u);
    for (std::size_t k = 1; k < n; ++k) EXPECT_LT(ts[k], ts[k - 1]);
  }
  EXPECT_THROW(ddim_timesteps(200, 0), BadSteps);
  EXPECT_THROW(ddim_timesteps(200, 201), BadSteps);
}

namespace {

struct SamplerSetup {
  ModelConfig c = tiny_config();
  ParamSet<float> ps = live_model<float>(c, 14);
  NoiseSchedule sched = build_schedule(200, 1e-4, 0.02);
  Tensor<float> cond, uncond;

  SamplerSetup() {
    const auto batch = random_batch(c, 1, 1, 15);
    Tape<float> tape;
    Binder<float> p(tape, ps, false);
    const auto views = condition_views(tape, batch[0]);
    cond = build_context(p, c, ContextMode::B, std::span<const ConditionView<float>>(views)).tokens.value();
    uncond = null_context(p, c, ContextMode::B).tokens.value();
  }

  Tensor<float> run(std::size_t steps, double scale, std::uint64_t seed, bool cond_is_null = false) const {
    const Tensor<float> cs[] = {cond_is_null ? uncond : cond};
    const Tensor<float> us[] = {uncond};
    const std::uint64_t seeds[] = {seed};
    return sample_ddim<float>(ps, c, cs, us, sched, steps, scale, seeds)[0];
  }
};

}  // namespace

TEST(Ddim, DeterministicAndClamped) {
  SamplerSetup s;
  const auto a = s.run(20, 4.0, 3);
  EXPECT_EQ(a, s.run(20, 4.0, 3));
  EXPECT_NE(a, s.run(20, 4.0, 4));
  EXPECT_EQ(a.shape(), (Shape{3, 16, 16}));
  for (float v : a.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_THROW(s.run(0, 1.0, 3), BadSteps);
  EXPECT_THROW(s.run(201, 1.0, 3), BadSteps);
}

TEST(Ddim, ScaleZeroIsUnconditional) {
  SamplerSetup s;
  EXPECT_EQ(s.run(10, 0.0, 5), s.run(10, 1.0, 5, true));
}

TEST(Ddim, BatchMatchesSingleSamples) {
  SamplerSetup s;
  const Tensor<float> cs[] = {s.cond, s.uncond};
  const Tensor<float> us[] = {s.uncond, s.uncond};
  const std::uint64_t seeds[] = {21, 22};
  const auto both = sample_ddim<float>(s.ps, s.c, cs, us, s.sched, 10, 2.0, seeds);
  EXPECT_LT(max_abs_diff(both[0], s.run(10, 2.0, 21)), 1e-5f);
  EXPECT_LT(max_abs_diff(both[1], s.run(10, 2.0, 22, true)), 1e-5f);
}
