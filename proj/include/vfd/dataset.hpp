#pragma once

// On-disk multi-view dataset: <root>/<scene>/<view>.png plus manifest.json.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vfd/errors.hpp"
#include "vfd/image_io.hpp"
#include "vfd/rng.hpp"
#include "vfd/scene.hpp"

namespace vfd {

struct ManifestEntry {
  std::uint32_t scene_id = 0;
  std::uint32_t view_id = 0;
  double radius = 0, azimuth = 0, elevation = 0;
  std::string file;

  CameraPose pose() const { return CameraPose(radius, azimuth, elevation); }
};

struct Manifest {
  std::size_t resolution = 0;
  std::size_t views_per_scene = 0;
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;
};

inline std::string scene_dir_name(std::uint32_t scene) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04u", scene);
  return buf;
}

inline std::string view_file_name(std::uint32_t scene, std::uint32_t view) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04u/%02u.png", scene, view);
  return buf;
}

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"scene_id", e.scene_id},
                       {"view_id", e.view_id},
                       {"radius", e.radius},
                       {"azimuth", e.azimuth},
                       {"elevation", e.elevation},
                       {"file", e.file}});
  }
  return {{"resolution", m.resolution}, {"views_per_scene", m.views_per_scene}, {"seed", m.seed}, {"entries", entries}};
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  Manifest m;
  m.resolution = j.at("resolution").get<std::size_t>();
  m.views_per_scene = j.at("views_per_scene").get<std::size_t>();
  m.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& e : j.at("entries")) {
    m.entries.push_back({e.at("scene_id").get<std::uint32_t>(), e.at("view_id").get<std::uint32_t>(),
                         e.at("radius").get<double>(), e.at("azimuth").get<double>(),
                         e.at("elevation").get<double>(), e.at("file").get<std::string>()});
  }
  return m;
}

// Renders `n_scenes` procedural scenes from `views_per_scene` random poses each.
// Every scene draws its parameters and poses from its own seeded stream, so a
// scene's content does not depend on how many scenes are generated.
inline Manifest make_dataset(const std::filesystem::path& root, std::size_t n_scenes, std::size_t views_per_scene,
                             std::size_t resolution, std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (!valid_resolution(resolution)) throw ShapeMismatch("resolution must be 16, 32 or 64");
  Manifest m{resolution, views_per_scene, seed, {}};
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());

  for (std::uint32_t s = 0; s < n_scenes; ++s) {
    Rng rng(derive_seed(seed, "scene", s));
    const SceneSpec scene = sample_scene(s, rng);
    fs::create_directories(root / scene_dir_name(s), ec);
    if (ec) throw IoError("cannot create scene directory: " + ec.message());
    for (std::uint32_t v = 0; v < views_per_scene; ++v) {
      ViewRecord rec = render_view(scene, sample_pose(rng), resolution);
      // Camera always looks at the origin, which lies inside every primitive.
      if (rec.foreground_pixels == 0) throw IoError("empty foreground for scene " + std::to_string(s));
      const std::string file = view_file_name(s, v);
      write_png(root / file, rec.image);
      m.entries.push_back({s, v, rec.pose.radius(), rec.pose.azimuth(), rec.pose.elevation(), file});
    }
  }
  std::ofstream out(root / "manifest.json", std::ios::binary);
  if (!out) throw IoError("cannot write manifest in " + root.string());
  out << to_json(m).dump(2) << '\n';
  if (!out) throw IoError("failed writing manifest in " + root.string());
  return m;
}

inline Manifest read_manifest(const std::filesystem::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw MissingDataset("no manifest.json under " + root.string());
  try {
    return manifest_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw MissingDataset(std::string("malformed manifest: ") + e.what());
  }
}

struct SceneViews {
  std::uint32_t scene_id = 0;
  std::vector<Tensor<float>> images;  // indexed by view id
  std::vector<CameraPose> poses;
};

struct Dataset {
  std::size_t resolution = 0;
  std::size_t views_per_scene = 0;
  std::vector<SceneViews> scenes;
};

inline Dataset load_dataset(const std::filesystem::path& root) {
  const Manifest m = read_manifest(root);
  Dataset d{m.resolution, m.views_per_scene, {}};
  for (const auto& e : m.entries) {
    if (d.scenes.empty() || d.scenes.back().scene_id != e.scene_id) d.scenes.push_back({e.scene_id, {}, {}});
    auto& sc = d.scenes.back();
    if (e.view_id != sc.images.size()) throw MissingDataset("manifest views out of order for scene " + std::to_string(e.scene_id));
    Tensor<float> img;
    try {
      img = read_png(root / e.file);
    } catch (const IoError& err) {
      throw MissingDataset(err.what());
    }
    if (img.dim(1) != m.resolution || img.dim(2) != m.resolution) throw MissingDataset(e.file + " has wrong resolution");
    sc.images.push_back(std::move(img));
    sc.poses.push_back(e.pose());
  }
  for (const auto& sc : d.scenes) {
    if (sc.images.size() != d.views_per_scene) throw MissingDataset("scene " + std::to_string(sc.scene_id) + " is incomplete");
  }
  if (d.scenes.empty()) throw MissingDataset("dataset under " + root.string() + " is empty");
  return d;
}

}  // namespace vfd
