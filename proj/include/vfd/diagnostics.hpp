#pragma once

// Measures whether a cross-attention layer depends on its queries for a given
// context: random hidden states go in, output deltas and attention-weight
// spread come out.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "vfd/diffusion.hpp"
#include "vfd/errors.hpp"
#include "vfd/nn.hpp"
#include "vfd/rng.hpp"
#include "vfd/tensor.hpp"

namespace vfd {

// Raw cross-attention matrices: wq [d,dk], wk [dc,dk], wv [dc,dk], wo [dk,d], bo [d].
struct CrossAttentionParams {
  Tensor<double> wq, wk, wv, wo, bo;

  std::size_t hidden_dim() const { return wq.dim(0); }
  std::size_t context_dim() const { return wk.dim(0); }
};

template <typename T>
CrossAttentionParams cross_attention_params(const ParamSet<T>& ps, const std::string& prefix = "unet.xf.cross") {
  return {ps.at(prefix + ".wq").template cast<double>(), ps.at(prefix + ".wk").template cast<double>(),
          ps.at(prefix + ".wv").template cast<double>(), ps.at(prefix + ".wo").template cast<double>(),
          ps.at(prefix + ".bo").template cast<double>()};
}

struct AttentionEval {
  Tensor<double> out;      // [S, d]
  Tensor<double> weights;  // [S, L]
};

inline AttentionEval eval_cross_attention(const CrossAttentionParams& w, const Tensor<double>& hidden,
                                          const Tensor<double>& ctx) {
  Tape<double> tape;
  const AttentionWeights<double> vw{tape.constant(w.wq), tape.constant(w.wk), tape.constant(w.wv),
                                    tape.constant(w.wo), tape.constant(w.bo)};
  const auto r = cross_attention(tape.constant(hidden), tape.constant(ctx), vw);
  return {r.out.value(), r.weights.value()};
}

struct DegeneracyReport {
  std::size_t context_length = 0;
  std::size_t trials = 0;
  double max_weight_dev = 0;    // largest |weight - 1/L| seen
  double max_output_delta = 0;  // largest max-abs output difference between paired hidden states
  double min_output_delta = 0;
  double min_weight = 0, max_weight = 0;
  bool degenerate = false;

  std::string verdict() const { return degenerate ? "degenerate" : "expressive"; }
};

inline constexpr double kDegenerateTolerance = 1e-12;

inline nlohmann::json to_json(const DegeneracyReport& r) {
  return {{"L", r.context_length},
          {"max_weight_dev", r.max_weight_dev},
          {"max_output_delta", r.max_output_delta},
          {"min_output_delta", r.min_output_delta},
          {"min_weight", r.min_weight},
          {"max_weight", r.max_weight},
          {"trials", r.trials},
          {"verdict", r.verdict()}};
}

// Every trial draws two unit-Gaussian hidden states of `queries` rows and
// compares the layer outputs. The verdict is read off the measurements:
// uniform weights and outputs that agree to 1e-12 mean the queries had no
// influence.
inline DegeneracyReport check_degeneracy(const CrossAttentionParams& w, const Tensor<double>& ctx,
                                         std::size_t trials, Rng& rng, std::size_t queries = 16) {
  if (trials == 0) throw BadTrials("check_degeneracy needs at least one trial");
  if (ctx.rank() != 2 || ctx.dim(1) != w.context_dim())
    throw ShapeMismatch("check_degeneracy: context must be [L, " + std::to_string(w.context_dim()) + "]");
  DegeneracyReport rep;
  rep.context_length = ctx.dim(0);
  rep.trials = trials;
  rep.min_output_delta = INFINITY;
  rep.min_weight = INFINITY;
  rep.max_weight = -INFINITY;
  const double uniform = 1.0 / static_cast<double>(rep.context_length);
  for (std::size_t k = 0; k < trials; ++k) {
    Tensor<double> h1(Shape{queries, w.hidden_dim()}), h2(Shape{queries, w.hidden_dim()});
    for (auto& v : h1.data()) v = rng.normal();
    for (auto& v : h2.data()) v = rng.normal();
    const auto a = eval_cross_attention(w, h1, ctx);
    const auto b = eval_cross_attention(w, h2, ctx);
    const double delta = max_abs_diff(a.out, b.out);
    rep.max_output_delta = std::max(rep.max_output_delta, delta);
    rep.min_output_delta = std::min(rep.min_output_delta, delta);
    for (const auto* wts : {&a.weights, &b.weights})
      for (double v : wts->data()) {
        rep.max_weight_dev = std::max(rep.max_weight_dev, std::abs(v - uniform));
        rep.min_weight = std::min(rep.min_weight, v);
        rep.max_weight = std::max(rep.max_weight, v);
      }
  }
  rep.degenerate = rep.max_weight_dev == 0.0 && rep.max_output_delta <= kDegenerateTolerance;
  return rep;
}

// Shannon entropy (nats) of each query's attention distribution: Tensor[S].
inline Tensor<double> attention_entropy(const CrossAttentionParams& w, const Tensor<double>& ctx,
                                        const Tensor<double>& hidden) {
  if (hidden.rank() != 2 || ctx.rank() != 2) throw ShapeMismatch("attention_entropy: expected [S,d] and [L,dc]");
  const auto r = eval_cross_attention(w, hidden, ctx);
  const std::size_t s = r.weights.dim(0), l = r.weights.dim(1);
  Tensor<double> out(Shape{s});
  for (std::size_t i = 0; i < s; ++i) {
    double h = 0;
    for (std::size_t j = 0; j < l; ++j) {
      const double p = r.weights[i * l + j];
      if (p > 0) h -= p * std::log(p);
    }
    out[i] = h;
  }
  return out;
}

}  // namespace vfd
