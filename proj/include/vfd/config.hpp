#pragma once

// Run configuration: a TOML file whose keys all have built-in defaults, plus
// `section.key = value` overrides.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <toml.hpp>

#include "vfd/conditioning.hpp"
#include "vfd/errors.hpp"

namespace vfd {

struct DatasetConfig {
  std::string path = "data/scenes";
  std::size_t n_scenes = 64;
  std::size_t resolution = 32;
  std::size_t views_per_scene = 12;
  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct ContextConfig {
  ContextMode mode = ContextMode::B;
  std::size_t views = 1;
  ContextMode per_view = ContextMode::B;
  friend bool operator==(const ContextConfig&, const ContextConfig&) = default;
};

struct ScheduleConfig {
  std::size_t steps = 200;
  double beta_start = 1e-4;
  double beta_end = 0.035;
  friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 8;
  double lr = 1e-3;
  double p_uncond = 0.1;
  std::size_t checkpoint_every = 500;
  std::vector<std::size_t> heldout = {10, 11};
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct SampleConfig {
  std::vector<std::size_t> steps = {20, 50, 100, 150, 200};
  std::vector<double> scale = {1, 4, 16, 30};
  std::size_t eval_steps = 50;
  double eval_scale = 1.0;
  std::size_t scene = 0;      // sweep/sample condition scene
  std::size_t cond_view = 0;  // first condition view; mode C uses the following ones too
  std::size_t target_view = 10;
  friend bool operator==(const SampleConfig&, const SampleConfig&) = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "runs/default";
  DatasetConfig dataset;
  ContextConfig context;
  ModelConfig model;
  ScheduleConfig schedule;
  TrainConfig train;
  SampleConfig sample;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// Leading "~" and $VAR / ${VAR} references are expanded.
inline std::string expand_path(const std::string& p) {
  std::string s = p;
  if (!s.empty() && s[0] == '~') {
    const char* home = std::getenv("HOME");
    s = std::string(home ? home : "") + s.substr(1);
  }
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '$') {
      out += s[i];
      continue;
    }
    std::size_t j = i + 1;
    const bool braced = j < s.size() && s[j] == '{';
    if (braced) ++j;
    std::size_t k = j;
    while (k < s.size() && (std::isalnum(static_cast<unsigned char>(s[k])) || s[k] == '_')) ++k;
    if (k == j || (braced && (k >= s.size() || s[k] != '}'))) throw ConfigError("cannot expand path '" + p + "'");
    const char* v = std::getenv(s.substr(j, k - j).c_str());
    if (!v) throw ConfigError("environment variable " + s.substr(j, k - j) + " in '" + p + "' is not set");
    out += v;
    i = braced ? k : k - 1;
  }
  return out;
}

inline void validate(const RunConfig& c) {
  if (c.dataset.n_scenes == 0) throw ConfigError("dataset.n_scenes must be positive");
  if (c.dataset.views_per_scene < 2) throw ConfigError("dataset.views_per_scene must be at least 2");
  if (c.model.resolution != c.dataset.resolution) throw ConfigError("model resolution must match dataset.resolution");
  c.model.validate();
  if (c.context.mode == ContextMode::C && c.context.views < 2) throw ConfigError("mode c needs context.views >= 2");
  if (c.context.mode != ContextMode::C && c.context.views != 1) throw ConfigError("modes a and b use exactly one view");
  if (c.context.per_view == ContextMode::C) throw ConfigError("context.per_view must be a or b");
  for (auto v : c.train.heldout)
    if (v >= c.dataset.views_per_scene) throw ConfigError("held-out view " + std::to_string(v) + " does not exist");
  const std::set<std::size_t> held(c.train.heldout.begin(), c.train.heldout.end());
  const std::size_t trainable = c.dataset.views_per_scene - held.size();
  if (c.context.views + 1 > trainable)
    throw ConfigError("need " + std::to_string(c.context.views + 1) + " training views per scene, only " +
                      std::to_string(trainable) + " are not held out");
  if (c.schedule.steps == 0) throw ConfigError("schedule.steps must be positive");
  if (!(c.schedule.beta_start > 0 && c.schedule.beta_start <= c.schedule.beta_end && c.schedule.beta_end < 1))
    throw ConfigError("need 0 < beta_start <= beta_end < 1");
  if (c.train.batch == 0) throw ConfigError("train.batch must be positive");
  if (!(c.train.lr > 0)) throw ConfigError("train.lr must be positive");
  if (!(c.train.p_uncond >= 0 && c.train.p_uncond < 1)) throw ConfigError("train.p_uncond must lie in [0, 1)");
  if (c.sample.steps.empty() || c.sample.scale.empty()) throw ConfigError("sample.steps and sample.scale must be non-empty");
  for (auto s : c.sample.steps)
    if (s < 1 || s > c.schedule.steps)
      throw ConfigError("sampling steps " + std::to_string(s) + " outside [1, " + std::to_string(c.schedule.steps) + "]");
  if (c.sample.eval_steps < 1 || c.sample.eval_steps > c.schedule.steps) throw ConfigError("sample.eval_steps out of range");
  if (c.sample.cond_view + c.context.views > c.dataset.views_per_scene || c.sample.target_view >= c.dataset.views_per_scene)
    throw ConfigError("sample views out of range");
  expand_path(c.dataset.path);
  expand_path(c.out);
}

namespace detail {

inline const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"", {"seed", "out"}},
      {"dataset", {"path", "n_scenes", "resolution", "views_per_scene"}},
      {"context", {"mode", "views", "per_view"}},
      {"model", {"d_ctx", "d_embed", "n_tok", "enc_c1", "enc_c2", "c1", "c2", "groups", "time_dim", "ff_mult"}},
      {"schedule", {"steps", "beta_start", "beta_end"}},
      {"train", {"steps", "batch", "lr", "p_uncond", "checkpoint_every", "heldout"}},
      {"sample", {"steps", "scale", "eval_steps", "eval_scale", "scene", "cond_view", "target_view"}}};
  return keys;
}

inline void check_keys(const toml::table& t) {
  const auto& keys = known_keys();
  for (const auto& [k, v] : t) {
    const std::string key(k.str());
    if (keys.at("").count(key)) continue;
    const auto sec = keys.find(key);
    if (sec == keys.end() || key.empty()) throw ConfigError("unknown config key '" + key + "'");
    const auto* sub = v.as_table();
    if (!sub) throw ConfigError("'" + key + "' must be a table");
    for (const auto& [k2, v2] : *sub)
      if (!sec->second.count(std::string(k2.str())))
        throw ConfigError("unknown config key '" + key + "." + std::string(k2.str()) + "'");
  }
}

inline std::size_t get_size(const toml::node_view<const toml::node>& n, std::size_t fallback, const std::string& key) {
  if (!n) return fallback;
  const auto v = n.value<std::int64_t>();
  if (!v || *v < 0) throw ConfigError(key + " must be a non-negative integer");
  return static_cast<std::size_t>(*v);
}

inline double get_double(const toml::node_view<const toml::node>& n, double fallback, const std::string& key) {
  if (!n) return fallback;
  const auto v = n.value<double>();
  if (!v) throw ConfigError(key + " must be a number");
  return *v;
}

inline std::string get_string(const toml::node_view<const toml::node>& n, const std::string& fallback, const std::string& key) {
  if (!n) return fallback;
  const auto v = n.value<std::string>();
  if (!v) throw ConfigError(key + " must be a string");
  return *v;
}

template <typename V, typename Get>
std::vector<V> get_list(const toml::node_view<const toml::node>& n, const std::vector<V>& fallback, const std::string& key,
                        Get get) {
  if (!n) return fallback;
  const auto* arr = n.as_array();
  if (!arr) throw ConfigError(key + " must be an array");
  std::vector<V> out;
  for (const auto& e : *arr) out.push_back(get(toml::node_view<const toml::node>(e), V{}, key));
  return out;
}

// Recursively overlays `src` onto `dst`.
inline void merge(toml::table& dst, const toml::table& src) {
  for (const auto& [k, v] : src) {
    if (const auto* sub = v.as_table()) {
      if (auto* existing = dst[k].as_table()) {
        merge(*existing, *sub);
        continue;
      }
    }
    dst.insert_or_assign(k, v);
  }
}

}  // namespace detail

inline RunConfig config_from_table(const toml::table& t) {
  detail::check_keys(t);
  using namespace detail;
  RunConfig c;
  const auto s = toml::node_view<const toml::node>(t);
  if (s["seed"]) {
    const auto v = s["seed"].value<std::int64_t>();
    if (!v || *v < 0) throw ConfigError("seed must be a non-negative integer");
    c.seed = static_cast<std::uint64_t>(*v);
  }
  c.out = get_string(s["out"], c.out, "out");

  c.dataset.path = get_string(s["dataset"]["path"], c.dataset.path, "dataset.path");
  c.dataset.n_scenes = get_size(s["dataset"]["n_scenes"], c.dataset.n_scenes, "dataset.n_scenes");
  c.dataset.resolution = get_size(s["dataset"]["resolution"], c.dataset.resolution, "dataset.resolution");
  c.dataset.views_per_scene = get_size(s["dataset"]["views_per_scene"], c.dataset.views_per_scene, "dataset.views_per_scene");

  c.context.mode = parse_mode(get_string(s["context"]["mode"], std::string(1, mode_letter(c.context.mode)), "context.mode"));
  c.context.views = get_size(s["context"]["views"], c.context.views, "context.views");
  c.context.per_view =
      parse_mode(get_string(s["context"]["per_view"], std::string(1, mode_letter(c.context.per_view)), "context.per_view"));

  auto& m = c.model;
  m.resolution = c.dataset.resolution;
  m.d_ctx = get_size(s["model"]["d_ctx"], m.d_ctx, "model.d_ctx");
  m.d_embed = get_size(s["model"]["d_embed"], m.d_embed, "model.d_embed");
  m.n_tok = get_size(s["model"]["n_tok"], m.n_tok, "model.n_tok");
  m.enc_c1 = get_size(s["model"]["enc_c1"], m.enc_c1, "model.enc_c1");
  m.enc_c2 = get_size(s["model"]["enc_c2"], m.enc_c2, "model.enc_c2");
  m.c1 = get_size(s["model"]["c1"], m.c1, "model.c1");
  m.c2 = get_size(s["model"]["c2"], m.c2, "model.c2");
  m.groups = get_size(s["model"]["groups"], m.groups, "model.groups");
  m.time_dim = get_size(s["model"]["time_dim"], m.time_dim, "model.time_dim");
  m.ff_mult = get_size(s["model"]["ff_mult"], m.ff_mult, "model.ff_mult");

  c.schedule.steps = get_size(s["schedule"]["steps"], c.schedule.steps, "schedule.steps");
  c.schedule.beta_start = get_double(s["schedule"]["beta_start"], c.schedule.beta_start, "schedule.beta_start");
  c.schedule.beta_end = get_double(s["schedule"]["beta_end"], c.schedule.beta_end, "schedule.beta_end");

  c.train.steps = get_size(s["train"]["steps"], c.train.steps, "train.steps");
  c.train.batch = get_size(s["train"]["batch"], c.train.batch, "train.batch");
  c.train.lr = get_double(s["train"]["lr"], c.train.lr, "train.lr");
  c.train.p_uncond = get_double(s["train"]["p_uncond"], c.train.p_uncond, "train.p_uncond");
  c.train.checkpoint_every = get_size(s["train"]["checkpoint_every"], c.train.checkpoint_every, "train.checkpoint_every");
  c.train.heldout = get_list<std::size_t>(s["train"]["heldout"], c.train.heldout, "train.heldout", get_size);

  c.sample.steps = get_list<std::size_t>(s["sample"]["steps"], c.sample.steps, "sample.steps", get_size);
  c.sample.scale = get_list<double>(s["sample"]["scale"], c.sample.scale, "sample.scale", get_double);
  c.sample.eval_steps = get_size(s["sample"]["eval_steps"], c.sample.eval_steps, "sample.eval_steps");
  c.sample.eval_scale = get_double(s["sample"]["eval_scale"], c.sample.eval_scale, "sample.eval_scale");
  c.sample.scene = get_size(s["sample"]["scene"], c.sample.scene, "sample.scene");
  c.sample.cond_view = get_size(s["sample"]["cond_view"], c.sample.cond_view, "sample.cond_view");
  c.sample.target_view = get_size(s["sample"]["target_view"], c.sample.target_view, "sample.target_view");
  return c;
}

inline toml::table parse_toml(const std::string& text, const std::string& origin) {
  try {
    return toml::parse(text, origin);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << e;
    throw ConfigError("cannot parse " + origin + ": " + os.str());
  }
}

// `overrides` are TOML assignments with dotted keys, e.g. "train.steps = 500".
inline RunConfig load_config(const std::string& text, const std::vector<std::string>& overrides = {},
                             const std::string& origin = "config") {
  toml::table t = parse_toml(text, origin);
  for (const auto& o : overrides) detail::merge(t, parse_toml(o, "override '" + o + "'"));
  RunConfig c = config_from_table(t);
  validate(c);
  return c;
}

inline RunConfig load_config_file(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return load_config(ss.str(), overrides, path.string());
}

inline toml::table to_toml(const RunConfig& c) {
  auto ints = [](const std::vector<std::size_t>& v) {
    toml::array a;
    for (auto x : v) a.push_back(static_cast<std::int64_t>(x));
    return a;
  };
  auto reals = [](const std::vector<double>& v) {
    toml::array a;
    for (auto x : v) a.push_back(x);
    return a;
  };
  auto i64 = [](std::size_t v) { return static_cast<std::int64_t>(v); };
  const auto& m = c.model;
  return toml::table{
      {"seed", static_cast<std::int64_t>(c.seed)},
      {"out", c.out},
      {"dataset", toml::table{{"path", c.dataset.path},
                              {"n_scenes", i64(c.dataset.n_scenes)},
                              {"resolution", i64(c.dataset.resolution)},
                              {"views_per_scene", i64(c.dataset.views_per_scene)}}},
      {"context", toml::table{{"mode", std::string(1, mode_letter(c.context.mode))},
                              {"views", i64(c.context.views)},
                              {"per_view", std::string(1, mode_letter(c.context.per_view))}}},
      {"model", toml::table{{"d_ctx", i64(m.d_ctx)},
                            {"d_embed", i64(m.d_embed)},
                            {"n_tok", i64(m.n_tok)},
                            {"enc_c1", i64(m.enc_c1)},
                            {"enc_c2", i64(m.enc_c2)},
                            {"c1", i64(m.c1)},
                            {"c2", i64(m.c2)},
                            {"groups", i64(m.groups)},
                            {"time_dim", i64(m.time_dim)},
                            {"ff_mult", i64(m.ff_mult)}}},
      {"schedule", toml::table{{"steps", i64(c.schedule.steps)},
                               {"beta_start", c.schedule.beta_start},
                               {"beta_end", c.schedule.beta_end}}},
      {"train", toml::table{{"steps", i64(c.train.steps)},
                            {"batch", i64(c.train.batch)},
                            {"lr", c.train.lr},
                            {"p_uncond", c.train.p_uncond},
                            {"checkpoint_every", i64(c.train.checkpoint_every)},
                            {"heldout", ints(c.train.heldout)}}},
      {"sample", toml::table{{"steps", ints(c.sample.steps)},
                             {"scale", reals(c.sample.scale)},
                             {"eval_steps", i64(c.sample.eval_steps)},
                             {"eval_scale", c.sample.eval_scale},
                             {"scene", i64(c.sample.scene)},
                             {"cond_view", i64(c.sample.cond_view)},
                             {"target_view", i64(c.sample.target_view)}}}};
}

inline std::string serialize_config(const RunConfig& c) {
  std::ostringstream os;
  os << to_toml(c) << '\n';
  return os.str();
}

}  // namespace vfd
