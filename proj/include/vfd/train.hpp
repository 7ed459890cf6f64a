#pragma once

// Training state, batch assembly and the optimisation loop.
//
// Every random choice of step k is drawn from streams derived from
// (seed, k), so a run resumed from a checkpoint replays exactly the same
// batches and noise as an uninterrupted run.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <set>
#include <vector>

#include "vfd/checkpoint.hpp"
#include "vfd/config.hpp"
#include "vfd/dataset.hpp"
#include "vfd/diffusion.hpp"
#include "vfd/nn.hpp"

namespace vfd {

struct TrainState {
  RunConfig config;
  ParamSet<float> params;
  Adam<float> optimizer;
  std::uint64_t step = 0;
};

inline TrainState init_train_state(const RunConfig& cfg) {
  TrainState s{cfg, init_model<float>(cfg.model, cfg.seed), Adam<float>(AdamConfig{cfg.train.lr}), 0};
  return s;
}

inline NoiseSchedule schedule_for(const RunConfig& cfg) {
  return build_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end);
}

inline ContextSpec context_spec(const RunConfig& cfg) {
  return {cfg.context.mode, cfg.context.per_view, cfg.context.views};
}

// Views available for training: everything except the held-out ids.
inline std::vector<std::size_t> training_views(const RunConfig& cfg) {
  const std::set<std::size_t> held(cfg.train.heldout.begin(), cfg.train.heldout.end());
  std::vector<std::size_t> out;
  for (std::size_t v = 0; v < cfg.dataset.views_per_scene; ++v)
    if (!held.count(v)) out.push_back(v);
  return out;
}

template <typename It>
void shuffle_with(It first, It last, Rng& rng) {
  const auto n = static_cast<std::size_t>(last - first);
  for (std::size_t i = n; i > 1; --i) std::swap(first[i - 1], first[rng.below(i)]);
}

struct BatchItem {
  std::size_t scene = 0;
  std::vector<std::size_t> cond_views;
  std::size_t target_view = 0;
};

// Scenes are visited in a fresh random order every epoch; each visit draws
// N + 1 distinct training views, the first N as conditions and the last as
// the target.
inline std::vector<BatchItem> batch_plan(const RunConfig& cfg, std::size_t n_scenes, std::uint64_t step) {
  const auto views = training_views(cfg);
  const std::size_t n = cfg.context.views;
  std::vector<BatchItem> out;
  for (std::size_t b = 0; b < cfg.train.batch; ++b) {
    const std::uint64_t visit = step * cfg.train.batch + b;
    const std::uint64_t epoch = visit / n_scenes;
    std::vector<std::size_t> order(n_scenes);
    std::iota(order.begin(), order.end(), 0);
    Rng erng(derive_seed(cfg.seed, "epoch", epoch));
    shuffle_with(order.begin(), order.end(), erng);

    Rng vrng(derive_seed(cfg.seed, "views", visit));
    auto pool = views;
    shuffle_with(pool.begin(), pool.end(), vrng);
    BatchItem item;
    item.scene = order[visit % n_scenes];
    item.cond_views.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
    item.target_view = pool[n];
    out.push_back(std::move(item));
  }
  return out;
}

inline MultiViewSample make_sample(const Dataset& data, std::size_t scene, const std::vector<std::size_t>& cond_views,
                                   std::size_t target_view) {
  const auto& sc = data.scenes.at(scene);
  MultiViewSample s;
  for (auto v : cond_views) {
    s.condition_images.push_back(sc.images.at(v));
    s.relative_poses.push_back(relative_pose(sc.poses.at(v), sc.poses.at(target_view)));
  }
  s.target = sc.images.at(target_view);
  return s;
}

// One optimisation step; returns the batch loss.
inline double train_step(TrainState& st, const Dataset& data, const NoiseSchedule& sched) {
  const auto& cfg = st.config;
  std::vector<MultiViewSample> batch;
  for (const auto& item : batch_plan(cfg, data.scenes.size(), st.step))
    batch.push_back(make_sample(data, item.scene, item.cond_views, item.target_view));
  Tape<float> tape;
  Binder<float> p(tape, st.params);
  Rng rng(derive_seed(cfg.seed, "noise", st.step));
  auto loss = loss_step<float>(p, cfg.model, sched, context_spec(cfg), batch, cfg.train.p_uncond, rng);
  tape.backward(loss);
  st.optimizer.step(st.params, p.grads());
  ++st.step;
  return loss.value().item();
}

inline void check_dataset_matches(const RunConfig& cfg, const Dataset& data) {
  if (data.resolution != cfg.dataset.resolution)
    throw MissingDataset("dataset resolution " + std::to_string(data.resolution) + " differs from config " +
                         std::to_string(cfg.dataset.resolution));
  if (data.views_per_scene != cfg.dataset.views_per_scene)
    throw MissingDataset("dataset has " + std::to_string(data.views_per_scene) + " views per scene, config expects " +
                         std::to_string(cfg.dataset.views_per_scene));
}

// Runs until st.step == target_step. `on_step(step, loss)` sees the 1-based
// step number just completed.
inline void train_until(TrainState& st, const Dataset& data, std::uint64_t target_step,
                        const std::function<void(std::uint64_t, double)>& on_step) {
  check_dataset_matches(st.config, data);
  const auto sched = schedule_for(st.config);
  while (st.step < target_step) {
    const double loss = train_step(st, data, sched);
    if (!std::isfinite(loss)) throw BadRange("loss became non-finite at step " + std::to_string(st.step));
    if (on_step) on_step(st.step, loss);
  }
}

// Exponential moving average with the first value as the starting point.
inline std::vector<double> ema(const std::vector<double>& xs, double decay) {
  std::vector<double> out;
  double m = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    m = i == 0 ? xs[0] : decay * m + (1 - decay) * xs[i];
    out.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint round trip

inline nlohmann::json context_json(const ContextConfig& c) {
  return {{"mode", std::string(1, mode_letter(c.mode))}, {"views", c.views}, {"per_view", std::string(1, mode_letter(c.per_view))}};
}

inline void save_train_state(const std::filesystem::path& path, const TrainState& st) {
  Checkpoint ck;
  ck.meta = {{"format", 1},
             {"step", st.step},
             {"adam_steps", st.optimizer.steps()},
             {"rng", {{"seed", st.config.seed}, {"step", st.step}}},
             {"context", context_json(st.config.context)},
             {"config", serialize_config(st.config)}};
  for (const auto& [name, t] : st.params) ck.tensors.add(name, t);
  for (const auto& [name, t] : st.optimizer.first_moment()) ck.tensors.add("adam.m." + name, t);
  for (const auto& [name, t] : st.optimizer.second_moment()) ck.tensors.add("adam.v." + name, t);
  write_checkpoint(path, ck);
}

// Restores a state, validating every tensor against the shapes implied by
// `cfg`. The architecture and context layout must agree with the checkpoint;
// training-only settings such as the step budget are taken from `cfg`.
inline TrainState load_train_state(const std::filesystem::path& path, const RunConfig& cfg) {
  const Checkpoint ck = read_checkpoint(path);
  TrainState st = init_train_state(cfg);
  RunConfig saved;
  try {
    saved = load_config(ck.meta.at("config").get<std::string>(), {}, "checkpoint config");
    st.step = ck.meta.at("step").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointMismatch(std::string("checkpoint metadata incomplete: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointMismatch(std::string("checkpoint config invalid: ") + e.what());
  }
  if (!(saved.model == cfg.model))
    throw CheckpointMismatch("checkpoint model dimensions differ from the configuration");
  if (!(saved.context == cfg.context))
    throw CheckpointMismatch(std::string("checkpoint was trained with context mode ") + mode_letter(saved.context.mode) +
                             ", views " + std::to_string(saved.context.views));

  ParamSet<float> params, m, v;
  for (const auto& [name, t] : ck.tensors) {
    if (name.rfind("adam.m.", 0) == 0) {
      m.add(name.substr(7), t);
    } else if (name.rfind("adam.v.", 0) == 0) {
      v.add(name.substr(7), t);
    } else {
      params.add(name, t);
    }
  }
  require_same_layout(st.params, params, "parameters");
  st.params = std::move(params);
  // Moments exist only for parameters that have received a gradient.
  for (const auto* moments : {&m, &v})
    for (const auto& [name, t] : *moments)
      if (!st.params.contains(name) || st.params.at(name).shape() != t.shape())
        throw CheckpointMismatch("optimizer moment '" + name + "' does not match any parameter");
  if (m.size() != v.size()) throw CheckpointMismatch("first and second moments differ in count");
  if (m.size()) {
    st.optimizer.restore(std::move(m), std::move(v), ck.meta.value("adam_steps", std::uint64_t{0}));
  }
  for (const auto& [name, t] : st.params)
    for (float x : t.data())
      if (!std::isfinite(x)) throw CheckpointMismatch("non-finite value in '" + name + "'");
  return st;
}

// Context settings recorded in a checkpoint, for commands that take the
// trained layout by default.
inline ContextConfig checkpoint_context(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  try {
    const auto& c = ck.meta.at("context");
    return {parse_mode(c.at("mode").get<std::string>()), c.at("views").get<std::size_t>(),
            parse_mode(c.at("per_view").get<std::string>())};
  } catch (const std::exception& e) {
    throw CheckpointMismatch(std::string("checkpoint context missing: ") + e.what());
  }
}

}  // namespace vfd
