#pragma once

// Conditioning contexts built from posed images.
//
//   mode A (legacy):    one token, projection of [pooled image embedding | pose]
//   mode B (revamped):  image tokens with a projected pose token appended as rows
//   mode C (multiview): per-view contexts concatenated along the sequence axis

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "vfd/errors.hpp"
#include "vfd/nn.hpp"
#include "vfd/ops.hpp"
#include "vfd/rng.hpp"
#include "vfd/scene.hpp"

namespace vfd {

enum class ContextMode { A, B, C };

inline char mode_letter(ContextMode m) { return m == ContextMode::A ? 'a' : m == ContextMode::B ? 'b' : 'c'; }

inline ContextMode parse_mode(const std::string& s) {
  if (s == "a" || s == "A") return ContextMode::A;
  if (s == "b" || s == "B") return ContextMode::B;
  if (s == "c" || s == "C") return ContextMode::C;
  throw ConfigError("unknown mode '" + s + "' (expected a, b or c)");
}

// Architecture hyperparameters shared by the encoder, the projections and the
// denoiser.
struct ModelConfig {
  std::size_t resolution = 32;
  std::size_t d_ctx = 64;
  std::size_t d_embed = 64;
  std::size_t n_tok = 16;
  std::size_t enc_c1 = 16;
  std::size_t enc_c2 = 32;
  std::size_t c1 = 16;
  std::size_t c2 = 32;
  std::size_t groups = 4;
  std::size_t time_dim = 64;
  std::size_t ff_mult = 4;

  // The encoder downsamples three times, so its token grid is (res/8)^2.
  std::size_t token_grid() const { return resolution / 8; }

  void validate() const {
    if (!valid_resolution(resolution)) throw ConfigError("resolution must be 16, 32 or 64");
    if (token_grid() * token_grid() != n_tok)
      throw ConfigError("n_tok must equal (resolution/8)^2 = " + std::to_string(token_grid() * token_grid()));
    if (groups == 0 || c1 % groups || c2 % groups || (c1 + c2) % groups)
      throw ConfigError("c1, c2 and c1+c2 must be divisible by groups");
    if (d_ctx == 0 || d_embed == 0 || time_dim == 0 || ff_mult == 0 || enc_c1 == 0 || enc_c2 == 0)
      throw ConfigError("model dimensions must be positive");
    if (c1 % 2) throw ConfigError("c1 must be even (sinusoidal timestep features)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr std::size_t kPoseDim = 4;

// Encoder: three stride-2 bias-free convolutions; the last grid is the token
// sequence and the pooling head maps the token mean to the pooled embedding.
template <typename T>
void init_conditioning(ParamSet<T>& ps, const ModelConfig& c, Rng& rng) {
  ps.add("enc.conv1.w", init_fan_in<T>({c.enc_c1, 3, 3, 3}, 27, rng));
  ps.add("enc.conv2.w", init_fan_in<T>({c.enc_c2, c.enc_c1, 3, 3}, c.enc_c1 * 9, rng));
  ps.add("enc.conv3.w", init_fan_in<T>({c.d_ctx, c.enc_c2, 3, 3}, c.enc_c2 * 9, rng));
  ps.add("enc.pool.w", init_fan_in<T>({c.d_ctx, c.d_embed}, c.d_ctx, rng));
  ps.add("enc.pool.b", Tensor<T>(Shape{c.d_embed}));
  ps.add("proj.legacy.w", init_fan_in<T>({c.d_embed + kPoseDim, c.d_ctx}, c.d_embed + kPoseDim, rng));
  ps.add("proj.legacy.b", Tensor<T>(Shape{c.d_ctx}));
  ps.add("proj.pose.w", init_fan_in<T>({kPoseDim, c.d_ctx}, kPoseDim, rng));
  ps.add("proj.pose.b", Tensor<T>(Shape{c.d_ctx}));
  ps.add("null.a", init_normal<T>({1, c.d_ctx}, 0.1, rng));
  ps.add("null.b", init_normal<T>({c.n_tok + 1, c.d_ctx}, 0.1, rng));
}

template <typename T>
struct EncodedImage {
  Var<T> pooled;                 // [1, d_embed]
  Var<T> tokens;                 // [n_tok, d_ctx]
  std::vector<Var<T>> features;  // per-layer maps [1, C, h, w], for perceptual distance
};

// image: [3, H, W] in [0, 1].
template <typename T>
EncodedImage<T> encode_image(Binder<T>& p, const ModelConfig& c, const Var<T>& image) {
  if (image.shape() != Shape{3, c.resolution, c.resolution}) {
    throw ShapeMismatch("encode_image: expected [3," + std::to_string(c.resolution) + "," +
                        std::to_string(c.resolution) + "], got " + to_string(image.shape()));
  }
  auto x = reshape(image, {1, 3, c.resolution, c.resolution});
  auto f1 = silu(conv2d(x, p("enc.conv1.w"), 2, 1));
  auto f2 = silu(conv2d(f1, p("enc.conv2.w"), 2, 1));
  auto f3 = conv2d(f2, p("enc.conv3.w"), 2, 1);
  auto tokens = reshape(to_tokens(f3), {c.n_tok, c.d_ctx});
  auto pooled = linear(mean_rows(tokens), p("enc.pool.w"), p("enc.pool.b"));
  return {pooled, tokens, {f1, f2, f3}};
}

struct ViewSpan {
  std::size_t view = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  friend bool operator==(const ViewSpan&, const ViewSpan&) = default;
};

template <typename T>
struct ContextSequence {
  Var<T> tokens;  // [L, d_ctx]
  ContextMode mode = ContextMode::A;
  std::vector<ViewSpan> provenance;

  std::size_t length() const { return tokens.dim(0); }
};

template <typename T>
struct ConditionView {
  Var<T> image;  // [3, H, W]
  RelPoseFeature pose;
};

template <typename T>
Var<T> pose_var(Tape<T>& tape, const RelPoseFeature& f) {
  return tape.constant(Tensor<T>(Shape{1, kPoseDim}, std::vector<T>(f.begin(), f.end())));
}

// Standardises every token over its features (zero mean, unit variance) with
// no learned parameters. The encoder output is small at initialisation and
// would otherwise reach cross-attention far below the hidden-state scale.
template <typename T>
Var<T> normalize_tokens(Tape<T>& tape, const Var<T>& tokens) {
  const std::size_t l = tokens.dim(0), d = tokens.dim(1);
  const auto ones = tape.constant(Tensor<T>(Shape{d}, T{1}));
  const auto zeros = tape.constant(Tensor<T>(Shape{d}));
  return reshape(group_norm(reshape(tokens, {l, d, 1, 1}), ones, zeros, 1), {l, d});
}

template <typename T>
ContextSequence<T> build_context_legacy(Binder<T>& p, const ModelConfig& c, const Var<T>& image,
                                        const RelPoseFeature& pose) {
  const auto enc = encode_image(p, c, image);
  auto joint = concat<T>({enc.pooled, pose_var(p.tape(), pose)}, 1);  // [1, d_embed + 4]
  auto token = normalize_tokens(p.tape(), linear(joint, p("proj.legacy.w"), p("proj.legacy.b")));
  return {token, ContextMode::A, {{0, 0, 1}}};
}

template <typename T>
ContextSequence<T> build_context_revamped(Binder<T>& p, const ModelConfig& c, const Var<T>& image,
                                          const RelPoseFeature& pose) {
  const auto enc = encode_image(p, c, image);
  auto pose_token = linear(pose_var(p.tape(), pose), p("proj.pose.w"), p("proj.pose.b"));
  auto tokens = normalize_tokens(p.tape(), concat_rows<T>({enc.tokens, pose_token}));
  return {tokens, ContextMode::B, {{0, 0, c.n_tok + 1}}};
}

// Row-wise concatenation of per-view contexts (per_view is A or B), in input
// order.
template <typename T>
ContextSequence<T> build_context_multiview(Binder<T>& p, const ModelConfig& c,
                                           std::span<const ConditionView<T>> views, ContextMode per_view) {
  if (views.empty()) throw EmptyViewList("multiview context needs at least one condition view");
  if (per_view == ContextMode::C) throw ConfigError("per-view mode must be A or B");
  std::vector<Var<T>> parts;
  std::vector<ViewSpan> spans;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < views.size(); ++i) {
    auto ctx = per_view == ContextMode::A ? build_context_legacy(p, c, views[i].image, views[i].pose)
                                          : build_context_revamped(p, c, views[i].image, views[i].pose);
    spans.push_back({i, offset, offset + ctx.length()});
    offset += ctx.length();
    parts.push_back(ctx.tokens);
  }
  return {parts.size() == 1 ? parts[0] : concat_rows(parts), ContextMode::C, std::move(spans)};
}

// Learned unconditional context with the same length as the mode's
// conditional context.
template <typename T>
ContextSequence<T> null_context(Binder<T>& p, const ModelConfig& c, ContextMode mode, std::size_t n_views = 1,
                                ContextMode per_view = ContextMode::B) {
  if (mode == ContextMode::A) return {normalize_tokens(p.tape(), p("null.a")), mode, {{0, 0, 1}}};
  if (mode == ContextMode::B) return {normalize_tokens(p.tape(), p("null.b")), mode, {{0, 0, c.n_tok + 1}}};
  if (n_views == 0) throw EmptyViewList("multiview null context needs at least one view");
  auto unit = normalize_tokens(p.tape(), per_view == ContextMode::A ? p("null.a") : p("null.b"));
  const std::size_t len = unit.dim(0);
  std::vector<Var<T>> parts(n_views, unit);
  std::vector<ViewSpan> spans;
  for (std::size_t i = 0; i < n_views; ++i) spans.push_back({i, i * len, (i + 1) * len});
  return {n_views == 1 ? unit : concat_rows(parts), mode, std::move(spans)};
}

// Dispatch on mode; modes A and B use the first view only.
template <typename T>
ContextSequence<T> build_context(Binder<T>& p, const ModelConfig& c, ContextMode mode,
                                 std::span<const ConditionView<T>> views, ContextMode per_view = ContextMode::B) {
  if (views.empty()) throw EmptyViewList("no condition views");
  switch (mode) {
    case ContextMode::A:
      return build_context_legacy(p, c, views[0].image, views[0].pose);
    case ContextMode::B:
      return build_context_revamped(p, c, views[0].image, views[0].pose);
    case ContextMode::C:
      return build_context_multiview(p, c, views, per_view);
  }
  throw ConfigError("bad mode");
}

inline std::size_t context_length(const ModelConfig& c, ContextMode mode, std::size_t n_views,
                                  ContextMode per_view = ContextMode::B) {
  const std::size_t per = (mode == ContextMode::A || (mode == ContextMode::C && per_view == ContextMode::A)) ? 1 : c.n_tok + 1;
  return mode == ContextMode::C ? n_views * per : per;
}

}  // namespace vfd
