#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vfd/commands.hpp"

namespace fs = std::filesystem;
using namespace vfd;

namespace {

enum ExitCode { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kCheckpoint = 4 };

int exit_code_for(const Error& e) {
  const std::string& k = e.kind();
  if (k == "CheckpointMismatch") return kCheckpoint;
  if (k == "MissingDataset" || k == "IoError" || k == "TooFewSamples" || k == "EmptyViewList") return kData;
  return kConfig;
}

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<std::size_t> views;
  std::optional<std::string> steps;
  std::optional<std::string> scale;
  std::optional<std::string> checkpoint;
  std::optional<std::string> out;
  std::optional<std::string> dataset;
  std::vector<std::string> set;
  bool random_init = false;
  bool ground_truth = false;
  bool verbose = false;
  std::size_t trials = 100;
};

template <typename V>
std::vector<V> parse_csv(const std::string& text, const char* flag) {
  std::vector<V> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      if constexpr (std::is_same_v<V, double>) {
        out.push_back(std::stod(item, &used));
      } else {
        if (item.find('-') != std::string::npos) throw std::invalid_argument("negative");
        out.push_back(static_cast<V>(std::stoull(item, &used)));
      }
      if (used != item.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ConfigError(std::string(flag) + ": cannot parse '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError(std::string(flag) + " needs at least one value");
  return out;
}

template <typename V>
V single(const std::vector<V>& xs, const char* flag, const std::string& cmd) {
  if (xs.size() != 1) throw ConfigError(std::string(flag) + " takes a single value for '" + cmd + "'");
  return xs[0];
}

// The file (or built-in defaults), then --set overrides, then dedicated flags.
RunConfig resolve_config(const Flags& f, const std::string& cmd) {
  RunConfig c = f.config.empty() ? load_config("", f.set) : load_config_file(expand_path(f.config), f.set);
  if (f.seed) c.seed = *f.seed;
  if (f.out) c.out = *f.out;
  if (f.dataset) c.dataset.path = *f.dataset;
  if (f.mode) {
    c.context.mode = parse_mode(*f.mode);
    if (!f.views) c.context.views = c.context.mode == ContextMode::C ? std::max<std::size_t>(c.context.views, 2) : 1;
  }
  if (f.views) c.context.views = *f.views;
  if (f.steps) {
    const auto xs = parse_csv<std::size_t>(*f.steps, "--steps");
    if (cmd == "sweep") {
      c.sample.steps = xs;
    } else if (cmd == "train") {
      c.train.steps = single(xs, "--steps", cmd);
    } else {
      c.sample.eval_steps = single(xs, "--steps", cmd);
    }
  }
  if (f.scale) {
    const auto xs = parse_csv<double>(*f.scale, "--scale");
    if (cmd == "sweep") {
      c.sample.scale = xs;
    } else {
      c.sample.eval_scale = single(xs, "--scale", cmd);
    }
  }
  validate(c);
  return c;
}

// Weights for the generation commands: --checkpoint, else <out>/checkpoint.bin,
// else freshly initialised weights when --random-init is given.
std::optional<fs::path> weights_path(const Flags& f, const RunConfig& c) {
  if (f.checkpoint) return fs::path(expand_path(*f.checkpoint));
  if (f.random_init) return std::nullopt;
  const fs::path p = fs::path(expand_path(c.out)) / "checkpoint.bin";
  if (!fs::exists(p)) throw CheckpointMismatch("no checkpoint at " + p.string() + " (pass --checkpoint or --random-init)");
  return p;
}

int run(const std::string& cmd, const Flags& f) {
  const RunConfig cfg = resolve_config(f, cmd);
  const bool context_explicit = f.mode.has_value() || f.views.has_value();
  if (cmd == "render-dataset") {
    const auto m = cmd_render_dataset(cfg);
    std::printf("rendered %zu images to %s\n", m.entries.size(), expand_path(cfg.dataset.path).c_str());
  } else if (cmd == "train") {
    TrainOptions opt;
    if (f.checkpoint) opt.resume = fs::path(expand_path(*f.checkpoint));
    opt.verbose = f.verbose;
    const auto r = cmd_train(cfg, opt);
    std::printf("trained steps %llu..%llu, final loss %s, checkpoint %s\n",
                static_cast<unsigned long long>(r.first_step), static_cast<unsigned long long>(r.final_step),
                r.losses.empty() ? "n/a" : format_loss(r.losses.back()).c_str(), r.checkpoint.string().c_str());
  } else if (cmd == "sample") {
    const auto p = cmd_sample(cfg, {weights_path(f, cfg), context_explicit});
    std::printf("wrote %s\n", p.string().c_str());
  } else if (cmd == "sweep") {
    const auto r = cmd_sweep(cfg, {weights_path(f, cfg), context_explicit});
    std::size_t failed = 0;
    for (const auto& cell : r.cells) {
      if (!cell.ok) {
        ++failed;
        std::fprintf(stderr, "cell steps=%zu scale=%g failed: %s\n", cell.steps, cell.scale, cell.error.c_str());
      }
    }
    std::printf("sweep %zux%zu: %zu images, %zu failed\n", r.rows.size(), r.cols.size(), r.cells.size() - failed, failed);
    if (failed) return kConfig;
  } else if (cmd == "evaluate") {
    EvalOptions opt;
    opt.checkpoint = f.ground_truth ? std::nullopt : weights_path(f, cfg);
    opt.context_explicit = context_explicit;
    opt.ground_truth = f.ground_truth;
    const auto r = cmd_evaluate(cfg, opt);
    std::cout << r.json["aggregate"].dump(2) << '\n';
  } else if (cmd == "diagnose") {
    DiagnoseOptions opt;
    opt.checkpoint = weights_path(f, cfg);
    opt.context_explicit = context_explicit;
    opt.trials = f.trials;
    std::cout << cmd_diagnose(cfg, opt).dump(2) << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view conditioned pixel diffusion: datasets, training, sampling and diagnostics"};
  app.require_subcommand(1);
  Flags f;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "TOML configuration file");
    sub->add_option("--seed", f.seed, "Master seed");
    sub->add_option("--mode", f.mode, "Context mode")->check(CLI::IsMember({"a", "b", "c", "A", "B", "C"}));
    sub->add_option("--views", f.views, "Number of condition views");
    sub->add_option("--steps", f.steps, "Sampling steps (comma-separated for sweep); training steps for train");
    sub->add_option("--scale", f.scale, "Guidance scale (comma-separated for sweep)");
    sub->add_option("--checkpoint", f.checkpoint, "Checkpoint to load (train: resume from it)");
    sub->add_option("--out", f.out, "Output directory");
    sub->add_option("--dataset", f.dataset, "Dataset directory");
    sub->add_option("--set", f.set, "Config override such as 'train.lr = 0.0005' (repeatable)");
    sub->add_flag("-v,--verbose", f.verbose, "Progress output");
  };

  std::vector<std::pair<std::string, CLI::App*>> subs;
  for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
           {"render-dataset", "Render the synthetic multi-view dataset"},
           {"train", "Train the denoiser"},
           {"sample", "Generate one novel view"},
           {"sweep", "Render the steps x scale grid"},
           {"evaluate", "Score held-out views"},
           {"diagnose", "Measure cross-attention degeneracy"}}) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub);
    subs.emplace_back(name, sub);
  }
  for (const char* name : {"sample", "sweep", "evaluate", "diagnose"})
    for (auto& [n, sub] : subs)
      if (n == name) sub->add_flag("--random-init", f.random_init, "Use freshly initialised weights");
  for (auto& [n, sub] : subs) {
    if (n == "evaluate") sub->add_flag("--ground-truth", f.ground_truth, "Score the true targets against themselves");
    if (n == "diagnose") sub->add_option("--trials", f.trials, "Random hidden-state trials")->check(CLI::PositiveNumber);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  std::string cmd;
  for (auto& [n, sub] : subs)
    if (sub->parsed()) cmd = n;
  try {
    return run(cmd, f);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return kInternal;
  }
}
