#pragma once

// The user-facing commands. Each one takes a validated RunConfig plus
// command-specific options, writes its artifacts below an output directory
// and returns a summary for programmatic callers.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vfd/checkpoint.hpp"
#include "vfd/config.hpp"
#include "vfd/dataset.hpp"
#include "vfd/diagnostics.hpp"
#include "vfd/diffusion.hpp"
#include "vfd/image_io.hpp"
#include "vfd/metrics.hpp"
#include "vfd/train.hpp"

namespace vfd {

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::string format_loss(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline Dataset load_config_dataset(const RunConfig& cfg) {
  Dataset d = load_dataset(expand_path(cfg.dataset.path));
  check_dataset_matches(cfg, d);
  return d;
}

// ---------------------------------------------------------------------------
// render-dataset

inline Manifest cmd_render_dataset(const RunConfig& cfg) {
  if (cfg.dataset.n_scenes == 0) throw ConfigError("dataset.n_scenes must be positive");
  return make_dataset(expand_path(cfg.dataset.path), cfg.dataset.n_scenes, cfg.dataset.views_per_scene,
                      cfg.dataset.resolution, cfg.seed);
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::optional<fs::path> resume;  // checkpoint to continue from
  bool verbose = false;
};

struct TrainResult {
  std::vector<double> losses;  // losses of the steps run by this call
  std::uint64_t first_step = 0;
  std::uint64_t final_step = 0;
  fs::path checkpoint;
};

// Writes <out>/loss.csv ("step,loss"), <out>/config.toml and
// <out>/checkpoint.bin, refreshed every train.checkpoint_every steps and at
// the end. A resumed run keeps the earlier CSV rows and appends.
inline TrainResult cmd_train(const RunConfig& cfg, const TrainOptions& opt = {}) {
  const fs::path out = expand_path(cfg.out);
  const Dataset data = load_config_dataset(cfg);
  TrainState st = opt.resume ? load_train_state(*opt.resume, cfg) : init_train_state(cfg);
  fs::create_directories(out);
  write_text(out / "config.toml", serialize_config(cfg));

  const fs::path csv_path = out / "loss.csv";
  std::vector<std::string> kept;
  if (opt.resume && fs::exists(csv_path)) {
    std::ifstream in(csv_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      const auto comma = line.find(',');
      if (comma == std::string::npos) continue;
      if (std::stoull(line.substr(0, comma)) <= st.step) kept.push_back(line);
    }
  }
  std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
  if (!csv) throw IoError("cannot write " + csv_path.string());
  csv << "step,loss\n";
  for (const auto& l : kept) csv << l << '\n';

  TrainResult res;
  res.first_step = st.step + 1;
  res.checkpoint = out / "checkpoint.bin";
  const auto t0 = std::chrono::steady_clock::now();
  train_until(st, data, cfg.train.steps, [&](std::uint64_t step, double loss) {
    res.losses.push_back(loss);
    csv << step << ',' << format_loss(loss) << '\n';
    if (cfg.train.checkpoint_every && step % cfg.train.checkpoint_every == 0) {
      csv.flush();
      save_train_state(res.checkpoint, st);
    }
    if (opt.verbose && (step % 100 == 0 || step == cfg.train.steps)) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "step %llu  loss %.5f  (%.1fs)\n", static_cast<unsigned long long>(step), loss, secs);
    }
  });
  csv.flush();
  if (!csv) throw IoError("failed writing " + csv_path.string());
  save_train_state(res.checkpoint, st);
  res.final_step = st.step;
  return res;
}

// ---------------------------------------------------------------------------
// Conditional generation helpers shared by sample, sweep and evaluate

struct Generator {
  RunConfig cfg;
  ParamSet<float> params;
  NoiseSchedule sched;

  // Context tokens for condition views of `scene` targeting `target_view`.
  Tensor<float> context(const Dataset& data, std::size_t scene, const std::vector<std::size_t>& cond_views,
                        std::size_t target_view) const {
    const auto s = make_sample(data, scene, cond_views, target_view);
    Tape<float> tape;
    Binder<float> p(tape, params, false);
    const auto views = condition_views(tape, s);
    return build_context(p, cfg.model, cfg.context.mode, std::span<const ConditionView<float>>(views),
                         cfg.context.per_view)
        .tokens.value();
  }

  Tensor<float> null_tokens() const {
    Tape<float> tape;
    Binder<float> p(tape, params, false);
    return null_context(p, cfg.model, cfg.context.mode, cfg.context.views, cfg.context.per_view).tokens.value();
  }

  std::vector<Tensor<float>> generate(std::span<const Tensor<float>> ctx, std::size_t steps, double scale,
                                      std::span<const std::uint64_t> seeds) const {
    const std::vector<Tensor<float>> uncond(ctx.size(), null_tokens());
    return sample_ddim<float>(params, cfg.model, ctx, uncond, sched, steps, scale, seeds);
  }
};

// Loads weights from `checkpoint`, or initialises them from the seed when no
// checkpoint is given. The context layout follows the checkpoint; an explicit
// conflicting --mode/--views request is a configuration error.
inline Generator make_generator(RunConfig cfg, const std::optional<fs::path>& checkpoint, bool context_explicit) {
  if (checkpoint) {
    const auto trained = checkpoint_context(*checkpoint);
    if (context_explicit && !(trained == cfg.context))
      throw ConfigError(std::string("checkpoint was trained in mode ") + mode_letter(trained.mode) + " with " +
                        std::to_string(trained.views) + " view(s)");
    cfg.context = trained;
    validate(cfg);
    auto st = load_train_state(*checkpoint, cfg);
    return {cfg, std::move(st.params), schedule_for(cfg)};
  }
  return {cfg, init_model<float>(cfg.model, cfg.seed), schedule_for(cfg)};
}

inline std::vector<std::size_t> condition_view_ids(const RunConfig& cfg) {
  std::vector<std::size_t> v;
  for (std::size_t i = 0; i < cfg.context.views; ++i) v.push_back(cfg.sample.cond_view + i);
  return v;
}

// ---------------------------------------------------------------------------
// sample

struct SampleOptions {
  std::optional<fs::path> checkpoint;
  bool context_explicit = false;
};

// Writes <out>/sample.png beside the condition views and the true target.
inline fs::path cmd_sample(const RunConfig& cfg_in, const SampleOptions& opt) {
  const Generator gen = make_generator(cfg_in, opt.checkpoint, opt.context_explicit);
  const auto& cfg = gen.cfg;
  const Dataset data = load_config_dataset(cfg);
  if (cfg.sample.scene >= data.scenes.size()) throw ConfigError("sample.scene out of range");
  const fs::path out = expand_path(cfg.out);
  fs::create_directories(out);
  const auto cond = condition_view_ids(cfg);
  const Tensor<float> ctx[] = {gen.context(data, cfg.sample.scene, cond, cfg.sample.target_view)};
  const std::uint64_t seeds[] = {derive_seed(cfg.seed, "sample")};
  const auto img = gen.generate(ctx, cfg.sample.eval_steps, cfg.sample.eval_scale, seeds)[0];
  write_png(out / "sample.png", img);
  write_png(out / "target.png", data.scenes[cfg.sample.scene].images[cfg.sample.target_view]);
  for (std::size_t i = 0; i < cond.size(); ++i)
    write_png(out / ("condition_" + std::to_string(i) + ".png"), data.scenes[cfg.sample.scene].images[cond[i]]);
  return out / "sample.png";
}

// ---------------------------------------------------------------------------
// sweep

struct SweepCell {
  std::size_t steps = 0;
  double scale = 0;
  fs::path path;
  double seconds = 0;
  bool ok = false;
  std::string error;
};

struct SweepResult {
  std::vector<std::size_t> rows;  // steps
  std::vector<double> cols;       // scales
  std::vector<SweepCell> cells;   // row-major
};

inline std::string scale_label(double s) {
  std::ostringstream os;
  os << s;
  return os.str();
}

// Tiles equally sized [3,H,W] images into a grid with a one-pixel white gutter.
inline Tensor<float> tile_images(const std::vector<Tensor<float>>& imgs, std::size_t rows, std::size_t cols) {
  const std::size_t h = imgs.at(0).dim(1), w = imgs.at(0).dim(2);
  const std::size_t H = rows * h + (rows + 1), W = cols * w + (cols + 1);
  Tensor<float> out(Shape{3, H, W}, 1.0f);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const auto& img = imgs[r * cols + c];
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j)
            out[(ch * H + r * (h + 1) + 1 + i) * W + c * (w + 1) + 1 + j] = img[(ch * h + i) * w + j];
    }
  return out;
}

// Renders every (steps, scale) cell for one condition set. Each cell's
// starting noise comes from its own stream derived from (seed, cell index).
inline SweepResult cmd_sweep(const RunConfig& cfg_in, const SampleOptions& opt) {
  const Generator gen = make_generator(cfg_in, opt.checkpoint, opt.context_explicit);
  const auto& cfg = gen.cfg;
  const Dataset data = load_config_dataset(cfg);
  if (cfg.sample.scene >= data.scenes.size()) throw ConfigError("sample.scene out of range");
  const fs::path out = expand_path(cfg.out);
  fs::create_directories(out / "sweep");
  const Tensor<float> ctx[] = {gen.context(data, cfg.sample.scene, condition_view_ids(cfg), cfg.sample.target_view)};

  SweepResult res{cfg.sample.steps, cfg.sample.scale, {}};
  std::vector<Tensor<float>> images;
  nlohmann::json cells = nlohmann::json::array();
  for (std::size_t r = 0; r < res.rows.size(); ++r) {
    for (std::size_t c = 0; c < res.cols.size(); ++c) {
      const std::size_t index = r * res.cols.size() + c;
      SweepCell cell{res.rows[r], res.cols[c], {}, 0, false, {}};
      cell.path = out / "sweep" / ("steps" + std::to_string(cell.steps) + "_scale" + scale_label(cell.scale) + ".png");
      const std::uint64_t seeds[] = {derive_seed(cfg.seed, "sweep-cell", index)};
      Tensor<float> img(Shape{3, cfg.model.resolution, cfg.model.resolution}, 1.0f);
      try {
        const auto t0 = std::chrono::steady_clock::now();
        img = gen.generate(ctx, cell.steps, cell.scale, seeds)[0];
        cell.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_png(cell.path, img);
        cell.ok = true;
      } catch (const Error& e) {
        cell.error = e.what();
      }
      images.push_back(img);
      cells.push_back({{"steps", cell.steps},
                       {"scale", cell.scale},
                       {"path", fs::relative(cell.path, out).generic_string()},
                       {"ok", cell.ok},
                       {"error", cell.ok ? nlohmann::json(nullptr) : nlohmann::json(cell.error)}});
      res.cells.push_back(std::move(cell));
    }
  }
  write_png(out / "sweep" / "grid.png", tile_images(images, res.rows.size(), res.cols.size()));

  nlohmann::json timing = nlohmann::json::array();
  for (const auto& cell : res.cells) timing.push_back({{"steps", cell.steps}, {"scale", cell.scale}, {"seconds", cell.seconds}});
  // Timings vary between runs, so they live apart from the grid description.
  write_json(out / "sweep.json", {{"scene", cfg.sample.scene},
                                  {"condition_views", condition_view_ids(cfg)},
                                  {"target_view", cfg.sample.target_view},
                                  {"mode", std::string(1, mode_letter(cfg.context.mode))},
                                  {"rows_steps", res.rows},
                                  {"cols_scale", res.cols},
                                  {"cells", cells}});
  write_json(out / "sweep_timing.json", timing);
  return res;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvalRow {
  std::size_t scene_id = 0, target_view = 0;
  Psnr psnr;
  double perceptual = 0, embed_sim = 0;
  Psnr copy_psnr, gray_psnr;
  double copy_perceptual = 0, copy_embed_sim = 0;
};

struct EvalReport {
  ContextConfig context;
  std::size_t steps = 0;
  double scale = 0;
  std::vector<EvalRow> rows;
  std::optional<double> fid;
  std::string fid_error;
  nlohmann::json json;
};

struct EvalOptions {
  std::optional<fs::path> checkpoint;
  bool context_explicit = false;
  bool ground_truth = false;  // score the true targets instead of generated images
  std::size_t batch = 16;
};

inline nlohmann::json psnr_json(const Psnr& p) { return p.infinite ? nlohmann::json(nullptr) : nlohmann::json(p.db); }

// Mean of finite PSNR values.
inline double mean_finite_psnr(const std::vector<Psnr>& xs) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& p : xs)
    if (!p.infinite) {
      s += p.db;
      ++n;
    }
  return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

// Generates every held-out view of every scene from the first N training
// views and scores it against the truth. Also scores two reference
// predictors: the condition image itself and a constant mid-gray image.
inline EvalReport cmd_evaluate(const RunConfig& cfg_in, const EvalOptions& opt) {
  const Generator gen = make_generator(cfg_in, opt.checkpoint, opt.context_explicit);
  const auto& cfg = gen.cfg;
  const Dataset data = load_config_dataset(cfg);
  const ImageEncoder enc(gen.params, cfg.model);
  const auto train_views = training_views(cfg);
  const std::vector<std::size_t> cond(train_views.begin(), train_views.begin() + static_cast<std::ptrdiff_t>(cfg.context.views));
  const std::size_t steps = cfg.sample.eval_steps;
  const double scale = cfg.sample.eval_scale;

  struct Job {
    std::size_t scene, view;
  };
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < data.scenes.size(); ++s)
    for (auto v : cfg.train.heldout) jobs.push_back({s, v});
  if (jobs.empty()) throw MissingDataset("no held-out views to evaluate");

  std::vector<Tensor<float>> generated, targets;
  for (std::size_t start = 0; start < jobs.size(); start += opt.batch) {
    const std::size_t end = std::min(jobs.size(), start + opt.batch);
    std::vector<Tensor<float>> ctx;
    std::vector<std::uint64_t> seeds;
    for (std::size_t j = start; j < end; ++j) {
      targets.push_back(data.scenes[jobs[j].scene].images[jobs[j].view]);
      if (!opt.ground_truth) {
        ctx.push_back(gen.context(data, jobs[j].scene, cond, jobs[j].view));
        seeds.push_back(derive_seed(cfg.seed, "eval", jobs[j].scene * 1000 + jobs[j].view));
      }
    }
    if (opt.ground_truth) {
      generated.insert(generated.end(), targets.end() - static_cast<std::ptrdiff_t>(end - start), targets.end());
    } else {
      auto imgs = gen.generate(ctx, steps, scale, seeds);
      generated.insert(generated.end(), imgs.begin(), imgs.end());
    }
  }

  EvalReport rep;
  rep.context = cfg.context;
  rep.steps = steps;
  rep.scale = scale;
  const Tensor<float> gray(Shape{3, cfg.model.resolution, cfg.model.resolution}, 0.5f);
  nlohmann::json rows = nlohmann::json::array();
  const std::string mode(1, mode_letter(cfg.context.mode));
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const auto& target = targets[i];
    const auto& copy = data.scenes[jobs[i].scene].images[cond[0]];
    EvalRow r;
    r.scene_id = data.scenes[jobs[i].scene].scene_id;
    r.target_view = jobs[i].view;
    r.psnr = psnr(generated[i], target);
    r.perceptual = perceptual_distance(generated[i], target, enc);
    r.embed_sim = embed_similarity(generated[i], target, enc);
    r.copy_psnr = psnr(copy, target);
    r.copy_perceptual = perceptual_distance(copy, target, enc);
    r.copy_embed_sim = embed_similarity(copy, target, enc);
    r.gray_psnr = psnr(gray, target);
    rows.push_back({{"scene_id", r.scene_id},
                    {"target_view", r.target_view},
                    {"mode", mode},
                    {"steps", steps},
                    {"scale", scale},
                    {"psnr", psnr_json(r.psnr)},
                    {"psnr_infinite", r.psnr.infinite},
                    {"perceptual", r.perceptual},
                    {"embed_sim", r.embed_sim},
                    {"copy_condition", {{"psnr", psnr_json(r.copy_psnr)}, {"perceptual", r.copy_perceptual}, {"embed_sim", r.copy_embed_sim}}},
                    {"mid_gray_psnr", psnr_json(r.gray_psnr)}});
    rep.rows.push_back(r);
  }

  try {
    rep.fid = fid(generated, targets, enc);
  } catch (const TooFewSamples& e) {
    rep.fid_error = e.what();
  }

  auto mean_of = [&](auto field) {
    double s = 0;
    for (const auto& r : rep.rows) s += field(r);
    return s / static_cast<double>(rep.rows.size());
  };
  std::vector<Psnr> model_psnr, copy_psnr, gray_psnr;
  std::size_t beats_gray = 0;
  for (const auto& r : rep.rows) {
    model_psnr.push_back(r.psnr);
    copy_psnr.push_back(r.copy_psnr);
    gray_psnr.push_back(r.gray_psnr);
    beats_gray += r.psnr.infinite || r.psnr.db > r.gray_psnr.db;
  }
  auto finite_or_null = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  rep.json = {{"mode", mode},
              {"views", cfg.context.views},
              {"condition_views", cond},
              {"steps", steps},
              {"scale", scale},
              {"ground_truth", opt.ground_truth},
              {"rows", rows},
              {"aggregate",
               {{"count", rep.rows.size()},
                {"psnr_mean", finite_or_null(mean_finite_psnr(model_psnr))},
                {"psnr_infinite_count", std::count_if(model_psnr.begin(), model_psnr.end(), [](const Psnr& p) { return p.infinite; })},
                {"perceptual_mean", mean_of([](const EvalRow& r) { return r.perceptual; })},
                {"embed_sim_mean", mean_of([](const EvalRow& r) { return r.embed_sim; })},
                {"fid", rep.fid ? nlohmann::json(*rep.fid) : nlohmann::json(nullptr)},
                {"fid_error", rep.fid ? nlohmann::json(nullptr) : nlohmann::json(rep.fid_error)},
                {"beats_mid_gray_fraction", static_cast<double>(beats_gray) / static_cast<double>(rep.rows.size())}}},
              {"baselines",
               {{"copy_condition",
                 {{"psnr_mean", finite_or_null(mean_finite_psnr(copy_psnr))},
                  {"perceptual_mean", mean_of([](const EvalRow& r) { return r.copy_perceptual; })},
                  {"embed_sim_mean", mean_of([](const EvalRow& r) { return r.copy_embed_sim; })}}},
                {"mid_gray", {{"psnr_mean", finite_or_null(mean_finite_psnr(gray_psnr))}}}}}};
  const fs::path out = expand_path(cfg.out);
  write_json(out / ("evaluate_" + mode + ".json"), rep.json);
  return rep;
}

// ---------------------------------------------------------------------------
// diagnose

struct DiagnoseOptions {
  std::optional<fs::path> checkpoint;  // absent: freshly initialised weights
  bool context_explicit = false;
  std::size_t trials = 100;
};

// Builds a context of the configured mode from a rendered scene and measures
// the cross-attention layer's dependence on its queries.
inline nlohmann::json cmd_diagnose(const RunConfig& cfg_in, const DiagnoseOptions& opt) {
  const Generator gen = make_generator(cfg_in, opt.checkpoint, opt.context_explicit);
  const auto& cfg = gen.cfg;
  Rng srng(derive_seed(cfg.seed, "diagnose-scene"));
  const auto scene = sample_scene(0, srng);
  const auto target = sample_pose(srng);
  Tape<float> tape;
  Binder<float> p(tape, gen.params, false);
  std::vector<ConditionView<float>> views;
  for (std::size_t i = 0; i < cfg.context.views; ++i) {
    const auto v = render_view(scene, sample_pose(srng), cfg.model.resolution);
    views.push_back({tape.constant(v.image), relative_pose(v.pose, target)});
  }
  const auto ctx = build_context(p, cfg.model, cfg.context.mode, std::span<const ConditionView<float>>(views),
                                 cfg.context.per_view);
  const auto ctx_d = ctx.tokens.value().cast<double>();
  const auto w = cross_attention_params(gen.params);
  Rng rng(derive_seed(cfg.seed, "diagnose-trials"));
  const auto rep = check_degeneracy(w, ctx_d, opt.trials, rng);

  Tensor<double> hidden(Shape{16, w.hidden_dim()});
  for (auto& v : hidden.data()) v = rng.normal();
  const auto ent = attention_entropy(w, ctx_d, hidden);
  double ent_mean = 0;
  for (double e : ent.data()) ent_mean += e / static_cast<double>(ent.numel());

  nlohmann::json j = to_json(rep);
  j["mode"] = std::string(1, mode_letter(cfg.context.mode));
  j["views"] = cfg.context.views;
  j["source"] = opt.checkpoint ? opt.checkpoint->string() : std::string("random-init");
  j["mean_attention_entropy"] = ent_mean;
  j["max_attention_entropy"] = std::log(static_cast<double>(rep.context_length));
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : ctx.provenance) spans.push_back({{"view", s.view}, {"begin", s.begin}, {"end", s.end}});
  j["provenance"] = spans;
  write_json(fs::path(expand_path(cfg.out)) / ("diagnose_" + std::string(1, mode_letter(cfg.context.mode)) + ".json"), j);
  return j;
}

}  // namespace vfd
