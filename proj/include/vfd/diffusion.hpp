#pragma once

// Epsilon-prediction denoiser (small UNet with one spatial-transformer block),
// the DDPM training objective, classifier-free guidance and DDIM sampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vfd/conditioning.hpp"
#include "vfd/errors.hpp"
#include "vfd/nn.hpp"
#include "vfd/ops.hpp"
#include "vfd/rng.hpp"
#include "vfd/tensor.hpp"

namespace vfd {

// ---------------------------------------------------------------------------
// Noise schedule

struct NoiseSchedule {
  std::vector<double> beta;       // index t-1 for t in [1, T]
  std::vector<double> alpha;
  std::vector<double> alpha_bar;  // running product of alpha

  std::size_t steps() const noexcept { return beta.size(); }

  double alpha_bar_at(std::size_t t) const {
    if (t < 1 || t > steps()) throw TOutOfRange("t=" + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
    return alpha_bar[t - 1];
  }
};

// Linear beta schedule.
inline NoiseSchedule build_schedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps == 0) throw BadRange("schedule needs at least one step");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
    throw BadRange("need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  double running = 1.0;
  for (std::size_t i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    running *= 1.0 - b;
    s.alpha_bar.push_back(running);
  }
  return s;
}

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
template <typename T>
Tensor<T> q_sample(const Tensor<T>& z0, std::size_t t, const Tensor<T>& eps, const NoiseSchedule& s) {
  if (z0.shape() != eps.shape()) throw ShapeMismatch("q_sample: z0 and eps shapes differ");
  const double ab = s.alpha_bar_at(t);
  const T a = static_cast<T>(std::sqrt(ab));
  const T b = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(z0.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
struct AttentionWeights {
  Var<T> wq, wk, wv, wo, bo;  // [d, dk], [dc, dk], [dc, dk], [dk, d], [d]
};

template <typename T>
struct AttentionResult {
  Var<T> out;      // [.., S, d]
  Var<T> weights;  // [.., S, L], rows sum to one
};

// softmax(Q K^T / sqrt(d_k)) V W_o + b_o with Q from `hidden` [S,d] or [B,S,d]
// and K, V from `context` [L,dc] or [B,L,dc]. Single head.
template <typename T>
AttentionResult<T> cross_attention(const Var<T>& hidden, const Var<T>& context, const AttentionWeights<T>& w) {
  if (hidden.rank() != context.rank() || (hidden.rank() != 2 && hidden.rank() != 3))
    throw ShapeMismatch("cross_attention: hidden " + to_string(hidden.shape()) + " vs context " +
                        to_string(context.shape()));
  if (hidden.shape().back() != w.wq.dim(0)) throw ShapeMismatch("cross_attention: hidden width does not match W_q");
  if (context.shape().back() != w.wk.dim(0)) throw ShapeMismatch("cross_attention: context width does not match W_k");
  if (hidden.rank() == 3 && hidden.dim(0) != context.dim(0))
    throw ShapeMismatch("cross_attention: batch sizes differ");
  const std::size_t dk = w.wq.dim(1);
  auto q = matmul(hidden, w.wq);
  auto k = matmul(context, w.wk);
  auto v = matmul(context, w.wv);
  auto scores = scale(matmul(q, transpose(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk))));
  auto attn = softmax(scores);
  auto out = add(matmul(matmul(attn, v), w.wo), w.bo);
  return {out, attn};
}

// Captures the cross-attention sublayer of the transformer block during a
// forward pass.
template <typename T>
struct AttentionProbe {
  Tensor<T> cross_output;   // [B, S, c2]
  Tensor<T> cross_weights;  // [B, S, L]
  Tensor<T> block_input;    // [B, S, c2], hidden states the queries come from
};

// ---------------------------------------------------------------------------
// UNet

template <typename T>
void add_resblock(ParamSet<T>& ps, const std::string& n, std::size_t cin, std::size_t cout, std::size_t tdim, Rng& rng) {
  ps.add(n + ".gn1.g", Tensor<T>(Shape{cin}, T{1}));
  ps.add(n + ".gn1.b", Tensor<T>(Shape{cin}));
  ps.add(n + ".conv1.w", init_fan_in<T>({cout, cin, 3, 3}, cin * 9, rng));
  ps.add(n + ".conv1.b", Tensor<T>(Shape{cout}));
  ps.add(n + ".temb.w", init_fan_in<T>({tdim, cout}, tdim, rng));
  ps.add(n + ".temb.b", Tensor<T>(Shape{cout}));
  ps.add(n + ".gn2.g", Tensor<T>(Shape{cout}, T{1}));
  ps.add(n + ".gn2.b", Tensor<T>(Shape{cout}));
  ps.add(n + ".conv2.w", init_fan_in<T>({cout, cout, 3, 3}, cout * 9, rng));
  ps.add(n + ".conv2.b", Tensor<T>(Shape{cout}));
  if (cin != cout) {
    ps.add(n + ".skip.w", init_fan_in<T>({cout, cin, 1, 1}, cin, rng));
    ps.add(n + ".skip.b", Tensor<T>(Shape{cout}));
  }
}

template <typename T>
void add_attention(ParamSet<T>& ps, const std::string& n, std::size_t d, std::size_t dc, Rng& rng) {
  ps.add(n + ".wq", init_fan_in<T>({d, d}, d, rng));
  ps.add(n + ".wk", init_fan_in<T>({dc, d}, dc, rng));
  ps.add(n + ".wv", init_fan_in<T>({dc, d}, dc, rng));
  ps.add(n + ".wo", init_fan_in<T>({d, d}, d, rng));
  ps.add(n + ".bo", Tensor<T>(Shape{d}));
}

template <typename T>
void init_unet(ParamSet<T>& ps, const ModelConfig& c, Rng& rng) {
  ps.add("unet.temb.w1", init_fan_in<T>({c.c1, c.time_dim}, c.c1, rng));
  ps.add("unet.temb.b1", Tensor<T>(Shape{c.time_dim}));
  ps.add("unet.temb.w2", init_fan_in<T>({c.time_dim, c.time_dim}, c.time_dim, rng));
  ps.add("unet.temb.b2", Tensor<T>(Shape{c.time_dim}));
  ps.add("unet.conv_in.w", init_fan_in<T>({c.c1, 3, 3, 3}, 27, rng));
  ps.add("unet.conv_in.b", Tensor<T>(Shape{c.c1}));
  add_resblock(ps, "unet.res1", c.c1, c.c1, c.time_dim, rng);
  ps.add("unet.down.w", init_fan_in<T>({c.c2, c.c1, 3, 3}, c.c1 * 9, rng));
  ps.add("unet.down.b", Tensor<T>(Shape{c.c2}));
  add_resblock(ps, "unet.res2", c.c2, c.c2, c.time_dim, rng);
  ps.add("unet.xf.gn.g", Tensor<T>(Shape{c.c2}, T{1}));
  ps.add("unet.xf.gn.b", Tensor<T>(Shape{c.c2}));
  ps.add("unet.xf.proj_in.w", init_fan_in<T>({c.c2, c.c2}, c.c2, rng));
  ps.add("unet.xf.proj_in.b", Tensor<T>(Shape{c.c2}));
  add_attention(ps, "unet.xf.self", c.c2, c.c2, rng);
  add_attention(ps, "unet.xf.cross", c.c2, c.d_ctx, rng);
  ps.add("unet.xf.ff.w1", init_fan_in<T>({c.c2, c.ff_mult * c.c2}, c.c2, rng));
  ps.add("unet.xf.ff.b1", Tensor<T>(Shape{c.ff_mult * c.c2}));
  ps.add("unet.xf.ff.w2", init_fan_in<T>({c.ff_mult * c.c2, c.c2}, c.ff_mult * c.c2, rng));
  ps.add("unet.xf.ff.b2", Tensor<T>(Shape{c.c2}));
  ps.add("unet.xf.proj_out.w", init_fan_in<T>({c.c2, c.c2}, c.c2, rng));
  ps.add("unet.xf.proj_out.b", Tensor<T>(Shape{c.c2}));
  add_resblock(ps, "unet.res3", c.c2 + c.c1, c.c1, c.time_dim, rng);
  ps.add("unet.out.gn.g", Tensor<T>(Shape{c.c1}, T{1}));
  ps.add("unet.out.gn.b", Tensor<T>(Shape{c.c1}));
  // Zero output layer: the untrained model predicts eps = 0.
  ps.add("unet.out.conv.w", Tensor<T>(Shape{3, c.c1, 3, 3}));
  ps.add("unet.out.conv.b", Tensor<T>(Shape{3}));
}

// Every trainable tensor of the pipeline: encoder, projections, null
// contexts and the denoiser.
template <typename T>
ParamSet<T> init_model(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  ParamSet<T> ps;
  Rng rng(derive_seed(seed, "init"));
  init_conditioning(ps, c, rng);
  init_unet(ps, c, rng);
  return ps;
}

// Sinusoidal features of integer timesteps: [B, dim].
template <typename T>
Tensor<T> timestep_features(std::span<const std::size_t> t, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor<T> out(Shape{t.size(), dim});
  for (std::size_t b = 0; b < t.size(); ++b)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(t[b]) * freq;
      out[b * dim + i] = static_cast<T>(std::sin(arg));
      out[b * dim + half + i] = static_cast<T>(std::cos(arg));
    }
  return out;
}

namespace detail {

template <typename T>
Var<T> resblock(Binder<T>& p, const std::string& n, const Var<T>& x, const Var<T>& temb, std::size_t groups) {
  auto h = conv2d(silu(group_norm(x, p(n + ".gn1.g"), p(n + ".gn1.b"), groups)), p(n + ".conv1.w"), p(n + ".conv1.b"), 1, 1);
  h = add_channel(h, linear(silu(temb), p(n + ".temb.w"), p(n + ".temb.b")));
  h = conv2d(silu(group_norm(h, p(n + ".gn2.g"), p(n + ".gn2.b"), groups)), p(n + ".conv2.w"), p(n + ".conv2.b"), 1, 1);
  auto skip = p.params().contains(n + ".skip.w") ? conv2d(x, p(n + ".skip.w"), p(n + ".skip.b"), 1, 0) : x;
  return add(h, skip);
}

template <typename T>
AttentionWeights<T> attention_weights(Binder<T>& p, const std::string& n) {
  return {p(n + ".wq"), p(n + ".wk"), p(n + ".wv"), p(n + ".wo"), p(n + ".bo")};
}

// Spatial transformer: block output = input + transformer(input).
template <typename T>
Var<T> transformer(Binder<T>& p, const ModelConfig& c, const Var<T>& x, const Var<T>& ctx, AttentionProbe<T>* probe) {
  const std::size_t h = x.dim(2), w = x.dim(3);
  auto tok = to_tokens(group_norm(x, p("unet.xf.gn.g"), p("unet.xf.gn.b"), c.groups));
  tok = linear(tok, p("unet.xf.proj_in.w"), p("unet.xf.proj_in.b"));
  tok = add(tok, cross_attention(tok, tok, attention_weights(p, "unet.xf.self")).out);
  auto cross = cross_attention(tok, ctx, attention_weights(p, "unet.xf.cross"));
  if (probe) {
    probe->block_input = tok.value();
    probe->cross_output = cross.out.value();
    probe->cross_weights = cross.weights.value();
  }
  tok = add(tok, cross.out);
  auto ff = linear(silu(linear(tok, p("unet.xf.ff.w1"), p("unet.xf.ff.b1"))), p("unet.xf.ff.w2"), p("unet.xf.ff.b2"));
  tok = add(tok, ff);
  tok = linear(tok, p("unet.xf.proj_out.w"), p("unet.xf.proj_out.b"));
  return add(x, from_tokens(tok, h, w));
}

}  // namespace detail

// z_t: [B,3,H,W]; t: B timesteps in [1, T]; ctx: [B, L, d_ctx]. Returns eps-hat
// with the shape of z_t.
template <typename T>
Var<T> predict_eps(Binder<T>& p, const ModelConfig& c, const Var<T>& z_t, std::span<const std::size_t> t,
                   const Var<T>& ctx, AttentionProbe<T>* probe = nullptr) {
  const Shape& s = z_t.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != c.resolution || s[3] != c.resolution)
    throw ShapeMismatch("predict_eps: z_t must be [B,3," + std::to_string(c.resolution) + "," +
                        std::to_string(c.resolution) + "], got " + to_string(s));
  if (t.size() != s[0]) throw ShapeMismatch("predict_eps: one timestep per batch element required");
  if (ctx.rank() != 3 || ctx.dim(0) != s[0] || ctx.dim(2) != c.d_ctx)
    throw ShapeMismatch("predict_eps: context must be [B, L, d_ctx], got " + to_string(ctx.shape()));

  auto& tape = p.tape();
  auto temb = tape.constant(timestep_features<T>(t, c.c1));
  temb = linear(silu(linear(temb, p("unet.temb.w1"), p("unet.temb.b1"))), p("unet.temb.w2"), p("unet.temb.b2"));

  auto h0 = conv2d(z_t, p("unet.conv_in.w"), p("unet.conv_in.b"), 1, 1);
  auto h1 = detail::resblock(p, "unet.res1", h0, temb, c.groups);
  auto h2 = conv2d(h1, p("unet.down.w"), p("unet.down.b"), 2, 1);
  auto h3 = detail::resblock(p, "unet.res2", h2, temb, c.groups);
  auto h4 = detail::transformer(p, c, h3, ctx, probe);
  auto up = concat<T>({upsample2x(h4), h1}, 1);
  auto h5 = detail::resblock(p, "unet.res3", up, temb, c.groups);
  auto out = silu(group_norm(h5, p("unet.out.gn.g"), p("unet.out.gn.b"), c.groups));
  return conv2d(out, p("unet.out.conv.w"), p("unet.out.conv.b"), 1, 1);
}

// Single-image convenience overload: z_t [3,H,W], ctx [L, d_ctx].
template <typename T>
Var<T> predict_eps(Binder<T>& p, const ModelConfig& c, const Var<T>& z_t, std::size_t t, const ContextSequence<T>& ctx,
                   AttentionProbe<T>* probe = nullptr) {
  if (z_t.rank() != 3) throw ShapeMismatch("predict_eps: expected [3,H,W]");
  Shape batched{1};
  batched.insert(batched.end(), z_t.shape().begin(), z_t.shape().end());
  const std::size_t ts[] = {t};
  auto eps = predict_eps(p, c, reshape(z_t, batched), std::span<const std::size_t>(ts), stack<T>({ctx.tokens}), probe);
  return reshape(eps, z_t.shape());
}

// ---------------------------------------------------------------------------
// Training objective

// One training example: N condition views with their poses relative to the
// target view, and the target image.
struct MultiViewSample {
  std::vector<Tensor<float>> condition_images;  // each [3,H,W] in [0,1]
  std::vector<RelPoseFeature> relative_poses;
  Tensor<float> target;
};

// Diffusion runs in [-1, 1].
template <typename T>
Tensor<T> to_signed(const Tensor<float>& img) {
  Tensor<T> out(img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i) out[i] = static_cast<T>(2.0 * img[i] - 1.0);
  return out;
}

template <typename T>
Tensor<float> to_unit(const Tensor<T>& z) {
  Tensor<float> out(z.shape());
  for (std::size_t i = 0; i < z.numel(); ++i)
    out[i] = static_cast<float>(std::clamp((static_cast<double>(z[i]) + 1.0) / 2.0, 0.0, 1.0));
  return out;
}

template <typename T>
std::vector<ConditionView<T>> condition_views(Tape<T>& tape, const MultiViewSample& s) {
  std::vector<ConditionView<T>> views;
  for (std::size_t i = 0; i < s.condition_images.size(); ++i) {
    views.push_back({tape.constant(s.condition_images[i].template cast<T>()), s.relative_poses[i]});
  }
  return views;
}

struct ContextSpec {
  ContextMode mode = ContextMode::B;
  ContextMode per_view = ContextMode::B;  // for mode C
  std::size_t views = 1;                  // condition views per sample
};

template <typename T>
using EpsPredictor = std::function<Var<T>(const Var<T>& z_t, std::span<const std::size_t> t, const Var<T>& ctx)>;

// Per-sample randomness of one training step.
struct NoiseDraw {
  std::size_t t = 1;
  Tensor<double> eps;
  bool uncond = false;
};

// Draws, per sample in order: t ~ U{1..T}, eps ~ N(0, I), and whether the null
// context replaces the condition (probability p_uncond).
inline std::vector<NoiseDraw> draw_noise(std::span<const MultiViewSample> batch, const NoiseSchedule& sched,
                                         double p_uncond, Rng& rng) {
  if (!(p_uncond >= 0 && p_uncond < 1)) throw BadRange("p_uncond must lie in [0, 1)");
  std::vector<NoiseDraw> out;
  for (const auto& s : batch) {
    NoiseDraw d;
    d.t = 1 + static_cast<std::size_t>(rng.below(sched.steps()));
    d.eps = Tensor<double>(s.target.shape());
    for (auto& v : d.eps.data()) v = rng.normal();
    d.uncond = rng.bernoulli(p_uncond);
    out.push_back(std::move(d));
  }
  return out;
}

// Mean squared error between injected and predicted noise over a batch.
template <typename T>
Var<T> denoising_loss(Binder<T>& p, const ModelConfig& c, const NoiseSchedule& sched, const ContextSpec& spec,
                      std::span<const MultiViewSample> batch, std::span<const NoiseDraw> draws,
                      const EpsPredictor<T>& predictor = {}) {
  if (batch.empty() || draws.size() != batch.size()) throw ShapeMismatch("denoising_loss: one draw per sample");
  auto& tape = p.tape();
  std::vector<std::size_t> ts;
  std::vector<Var<T>> ctxs;
  std::vector<T> zt_buf, eps_buf;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch[i];
    const auto eps = draws[i].eps.template cast<T>();
    const auto zt = q_sample(to_signed<T>(s.target), draws[i].t, eps, sched);
    ts.push_back(draws[i].t);
    zt_buf.insert(zt_buf.end(), zt.data().begin(), zt.data().end());
    eps_buf.insert(eps_buf.end(), eps.data().begin(), eps.data().end());
    if (draws[i].uncond) {
      ctxs.push_back(null_context(p, c, spec.mode, spec.views, spec.per_view).tokens);
    } else {
      const auto views = condition_views(tape, s);
      ctxs.push_back(build_context(p, c, spec.mode, std::span<const ConditionView<T>>(views), spec.per_view).tokens);
    }
  }
  Shape bs{batch.size()};
  bs.insert(bs.end(), batch[0].target.shape().begin(), batch[0].target.shape().end());
  auto z_t = tape.constant(Tensor<T>(bs, std::move(zt_buf)));
  auto eps = tape.constant(Tensor<T>(bs, std::move(eps_buf)));
  auto ctx = stack(ctxs);
  auto eps_hat = predictor ? predictor(z_t, ts, ctx) : predict_eps(p, c, z_t, ts, ctx);
  return mse(eps_hat, eps);
}

template <typename T>
Var<T> loss_step(Binder<T>& p, const ModelConfig& c, const NoiseSchedule& sched, const ContextSpec& spec,
                 std::span<const MultiViewSample> batch, double p_uncond, Rng& rng,
                 const EpsPredictor<T>& predictor = {}) {
  const auto draws = draw_noise(batch, sched, p_uncond, rng);
  return denoising_loss(p, c, sched, spec, batch, std::span<const NoiseDraw>(draws), predictor);
}

// ---------------------------------------------------------------------------
// Guidance and sampling

// (1 - s) * eps_uncond + s * eps_cond, which equals eps_uncond + s * (eps_cond -
// eps_uncond) and reproduces either input bit-exactly at s = 0 and s = 1.
template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double s) {
  if (eps_cond.shape() != eps_uncond.shape()) throw ShapeMismatch("cfg_combine: shapes differ");
  const T ws = static_cast<T>(s);
  const T wu = static_cast<T>(1.0 - s);
  Tensor<T> out(eps_cond.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = wu * eps_uncond[i] + ws * eps_cond[i];
  return out;
}

// Descending timesteps T, T - T/steps, ..., spaced evenly and ending above 0.
inline std::vector<std::size_t> ddim_timesteps(std::size_t total, std::size_t steps) {
  if (steps < 1 || steps > total)
    throw BadSteps("steps=" + std::to_string(steps) + " outside [1, " + std::to_string(total) + "]");
  std::vector<std::size_t> ts;
  for (std::size_t k = 0; k < steps; ++k) ts.push_back(total - (k * total) / steps);
  return ts;
}

inline Tensor<float> initial_noise(std::size_t resolution, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "ddim-noise"));
  Tensor<float> z(Shape{3, resolution, resolution});
  for (auto& v : z.data()) v = static_cast<float>(rng.normal());
  return z;
}

// Deterministic (eta = 0) DDIM with classifier-free guidance. Contexts are
// [L, d_ctx] values; every image of the batch has its own noise seed. The
// conditional and unconditional passes are evaluated separately.
template <typename T>
std::vector<Tensor<float>> sample_ddim(const ParamSet<T>& params, const ModelConfig& c,
                                       std::span<const Tensor<T>> cond, std::span<const Tensor<T>> uncond,
                                       const NoiseSchedule& sched, std::size_t steps, double guidance,
                                       std::span<const std::uint64_t> seeds) {
  const auto ts = ddim_timesteps(sched.steps(), steps);
  const std::size_t batch = cond.size();
  if (uncond.size() != batch || seeds.size() != batch) throw ShapeMismatch("sample_ddim: batch sizes differ");
  const std::size_t res = c.resolution;
  const std::size_t per = 3 * res * res;

  auto stack_ctx = [](std::span<const Tensor<T>> xs) {
    Shape s{xs.size()};
    s.insert(s.end(), xs[0].shape().begin(), xs[0].shape().end());
    std::vector<T> buf;
    for (const auto& x : xs) {
      if (x.shape() != xs[0].shape()) throw ShapeMismatch("sample_ddim: context lengths differ within batch");
      buf.insert(buf.end(), x.data().begin(), x.data().end());
    }
    return Tensor<T>(s, std::move(buf));
  };
  const Tensor<T> cond_ctx = stack_ctx(cond);
  const Tensor<T> uncond_ctx = stack_ctx(uncond);

  Tensor<T> z(Shape{batch, 3, res, res});
  for (std::size_t b = 0; b < batch; ++b) {
    const auto n = initial_noise(res, seeds[b]);
    for (std::size_t i = 0; i < per; ++i) z[b * per + i] = static_cast<T>(n[i]);
  }

  auto eps_for = [&](const Tensor<T>& ctx, std::span<const std::size_t> tb) {
    Tape<T> tape;
    Binder<T> p(tape, params, false);
    return predict_eps(p, c, tape.constant(z), tb, tape.constant(ctx)).value();
  };

  for (std::size_t k = 0; k < ts.size(); ++k) {
    const std::size_t t = ts[k];
    const double ab = sched.alpha_bar_at(t);
    const double ab_prev = k + 1 < ts.size() ? sched.alpha_bar_at(ts[k + 1]) : 1.0;
    const std::vector<std::size_t> tb(batch, t);
    const auto eps = cfg_combine(eps_for(cond_ctx, tb), eps_for(uncond_ctx, tb), guidance);
    for (std::size_t i = 0; i < z.numel(); ++i) {
      double x0 = (static_cast<double>(z[i]) - std::sqrt(1.0 - ab) * static_cast<double>(eps[i])) / std::sqrt(ab);
      x0 = std::clamp(x0, -1.0, 1.0);
      z[i] = static_cast<T>(std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * static_cast<double>(eps[i]));
    }
  }

  std::vector<Tensor<float>> out;
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<T> buf(z.ptr() + b * per, z.ptr() + (b + 1) * per);
    out.push_back(to_unit(Tensor<T>(Shape{3, res, res}, std::move(buf))));
  }
  return out;
}

}  // namespace vfd
