#pragma once

// Procedural multi-view scenes: parametric primitives ray-cast under
// spherical camera poses with Lambertian shading.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <vector>

#include "vfd/errors.hpp"
#include "vfd/rng.hpp"
#include "vfd/tensor.hpp"

namespace vfd {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

inline double wrap_angle(double a) {
  double r = std::fmod(a, kTwoPi);
  if (r < 0) r += kTwoPi;
  if (r >= kTwoPi) r = 0.0;
  return r;
}

// Camera position on a sphere around the scene origin, always looking at the
// origin with +z as world up.
class CameraPose {
 public:
  CameraPose(double radius, double azimuth, double elevation)
      : radius_(radius), azimuth_(wrap_angle(azimuth)), elevation_(elevation) {
    if (!(radius > 0)) throw BadRange("camera radius must be > 0");
    if (!(std::abs(elevation) < std::numbers::pi / 2)) throw BadRange("elevation must lie in (-pi/2, pi/2)");
  }

  double radius() const noexcept { return radius_; }
  double azimuth() const noexcept { return azimuth_; }
  double elevation() const noexcept { return elevation_; }

  std::array<double, 3> position() const {
    const double ce = std::cos(elevation_);
    return {radius_ * ce * std::cos(azimuth_), radius_ * ce * std::sin(azimuth_), radius_ * std::sin(elevation_)};
  }

  friend bool operator==(const CameraPose&, const CameraPose&) = default;

 private:
  double radius_, azimuth_, elevation_;
};

// (delta elevation, sin delta azimuth, cos delta azimuth, delta radius), target
// relative to condition. Continuous across the azimuth wrap.
using RelPoseFeature = std::array<double, 4>;

inline RelPoseFeature relative_pose(const CameraPose& condition, const CameraPose& target) {
  const double daz = target.azimuth() - condition.azimuth();
  return {target.elevation() - condition.elevation(), std::sin(daz), std::cos(daz),
          target.radius() - condition.radius()};
}

struct Rgb {
  double r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

enum class Primitive { Sphere, Cube, Composite };

struct SceneSpec {
  std::uint32_t id = 0;
  Primitive primitive = Primitive::Sphere;
  double size = 0.6;                     // sphere radius / cube half-extent
  std::array<Rgb, 6> face_albedo{};      // cube faces +x, -x, +y, -y, +z, -z
  std::array<Rgb, 4> sphere_albedo{};    // azimuthal quadrants of the sphere
  std::array<double, 3> light{0, 0, 1};  // unit direction towards the light
  Rgb background{0.92, 0.92, 0.95};
};

struct ViewRecord {
  Tensor<float> image;  // [3, H, W] in [0, 1]
  CameraPose pose;
  std::uint32_t scene_id = 0;
  std::size_t foreground_pixels = 0;
};

inline bool valid_resolution(std::size_t res) { return res == 16 || res == 32 || res == 64; }

namespace detail {

using Vec3 = std::array<double, 3>;

inline Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 add_scaled(const Vec3& a, const Vec3& b, double s) {
  return {a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]};
}
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline Vec3 normalize(const Vec3& v) {
  const double n = std::sqrt(dot(v, v));
  return {v[0] / n, v[1] / n, v[2] / n};
}

struct Hit {
  double t;
  Vec3 normal;
  Rgb albedo;
};

inline std::optional<Hit> hit_sphere(const Vec3& o, const Vec3& d, const Vec3& c, double r,
                                     const std::array<Rgb, 4>& albedo) {
  const Vec3 oc = sub(o, c);
  const double b = dot(oc, d);
  const double cc = dot(oc, oc) - r * r;
  const double disc = b * b - cc;
  if (disc < 0) return std::nullopt;
  const double t = -b - std::sqrt(disc);
  if (t <= 1e-9) return std::nullopt;
  const Vec3 p = add_scaled(o, d, t);
  const Vec3 n = normalize(sub(p, c));
  const double az = wrap_angle(std::atan2(n[1], n[0]));
  const auto quadrant = std::min<std::size_t>(3, static_cast<std::size_t>(az / (kTwoPi / 4)));
  return Hit{t, n, albedo[quadrant]};
}

inline std::optional<Hit> hit_box(const Vec3& o, const Vec3& d, const Vec3& c, double half,
                                  const std::array<Rgb, 6>& albedo) {
  double t_near = -1e300, t_far = 1e300;
  int axis_near = 0;
  double sign_near = 1;
  for (int a = 0; a < 3; ++a) {
    const double lo = c[a] - half, hi = c[a] + half;
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < lo || o[a] > hi) return std::nullopt;
      continue;
    }
    double t0 = (lo - o[a]) / d[a];
    double t1 = (hi - o[a]) / d[a];
    double s = -1;  // entering through the low face
    if (t0 > t1) {
      std::swap(t0, t1);
      s = 1;
    }
    if (t0 > t_near) {
      t_near = t0;
      axis_near = a;
      sign_near = s;
    }
    t_far = std::min(t_far, t1);
  }
  if (t_near > t_far || t_near <= 1e-9) return std::nullopt;
  Vec3 n{0, 0, 0};
  n[axis_near] = sign_near;
  const std::size_t face = static_cast<std::size_t>(axis_near) * 2 + (sign_near > 0 ? 0 : 1);
  return Hit{t_near, n, albedo[face]};
}

inline std::optional<Hit> trace(const SceneSpec& s, const Vec3& o, const Vec3& d) {
  switch (s.primitive) {
    case Primitive::Sphere:
      return hit_sphere(o, d, {0, 0, 0}, s.size, s.sphere_albedo);
    case Primitive::Cube:
      return hit_box(o, d, {0, 0, 0}, s.size, s.face_albedo);
    case Primitive::Composite: {
      // A box with a smaller sphere resting on top; the box contains the origin.
      auto box = hit_box(o, d, {0, 0, -0.35 * s.size}, 0.65 * s.size, s.face_albedo);
      auto ball = hit_sphere(o, d, {0, 0, 0.75 * s.size}, 0.5 * s.size, s.sphere_albedo);
      if (box && ball) return box->t <= ball->t ? box : ball;
      return box ? box : ball;
    }
  }
  return std::nullopt;
}

}  // namespace detail

inline constexpr double kFieldOfView = std::numbers::pi / 3;  // 60 degrees, vertical and horizontal
inline constexpr double kAmbient = 0.3;

// Perspective ray cast, one ray per pixel centre. Pure and deterministic.
inline ViewRecord render_view(const SceneSpec& scene, const CameraPose& pose, std::size_t resolution) {
  if (!valid_resolution(resolution)) throw ShapeMismatch("resolution must be 16, 32 or 64");
  using detail::Vec3;
  const Vec3 eye = pose.position();
  const Vec3 forward = detail::normalize({-eye[0], -eye[1], -eye[2]});
  Vec3 right = detail::cross(forward, {0, 0, 1});
  if (detail::dot(right, right) < 1e-18) right = detail::cross(forward, {0, 1, 0});
  right = detail::normalize(right);
  const Vec3 up = detail::cross(right, forward);
  const double half = std::tan(kFieldOfView / 2);
  const Vec3 light = detail::normalize(scene.light);

  const std::size_t n = resolution;
  Tensor<float> img(Shape{3, n, n});
  std::size_t fg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = (1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n)) * half;
    for (std::size_t j = 0; j < n; ++j) {
      const double u = (2.0 * (static_cast<double>(j) + 0.5) / static_cast<double>(n) - 1.0) * half;
      const Vec3 dir = detail::normalize(detail::add_scaled(detail::add_scaled(forward, right, u), up, v));
      Rgb c = scene.background;
      if (auto hit = detail::trace(scene, eye, dir)) {
        const double shade = kAmbient + (1.0 - kAmbient) * std::max(0.0, detail::dot(hit->normal, light));
        c = {hit->albedo.r * shade, hit->albedo.g * shade, hit->albedo.b * shade};
        ++fg;
      }
      const double ch[3] = {c.r, c.g, c.b};
      for (std::size_t k = 0; k < 3; ++k)
        img[(k * n + i) * n + j] = static_cast<float>(std::clamp(ch[k], 0.0, 1.0));
    }
  }
  return ViewRecord{std::move(img), pose, scene.id, fg};
}

// Pose ranges for dataset sampling.
inline constexpr double kMinElevation = -std::numbers::pi / 6;
inline constexpr double kMaxElevation = std::numbers::pi / 2;
inline constexpr double kMinRadius = 1.5;
inline constexpr double kMaxRadius = 2.5;

inline CameraPose sample_pose(Rng& rng) {
  const double az = rng.uniform(0.0, kTwoPi);
  // Stay a hair below the pole so the view basis is well defined.
  const double el = rng.uniform(kMinElevation, kMaxElevation - 1e-3);
  const double r = rng.uniform(kMinRadius, kMaxRadius);
  return CameraPose(r, az, el);
}

inline SceneSpec sample_scene(std::uint32_t id, Rng& rng) {
  SceneSpec s;
  s.id = id;
  s.primitive = static_cast<Primitive>(rng.below(3));
  auto color = [&] { return Rgb{rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)}; };
  for (auto& c : s.face_albedo) c = color();
  for (auto& c : s.sphere_albedo) c = color();
  s.light = detail::normalize({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.3, 1.0)});
  return s;
}

}  // namespace vfd
