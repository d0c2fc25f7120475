// Deterministic capsule rasterizer for the planar chain.
//
// All geometry is expressed in "local pixel" coordinates: pixel coordinates
// minus the integer part of the camera offset. Shifting the camera by whole
// pixels therefore leaves every floating-point computation unchanged, which
// makes rendering and flow exactly translation-equivariant.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "jidm/image.hpp"
#include "jidm/kinematics.hpp"

namespace jidm {

struct RenderStyle {
  std::vector<double> per_link_base_intensity;
  double radial_shading_gain = 0.35;
  double background_value = 0.0;
  int supersample_factor = 4;
  int channels = 1;

  void validate(std::size_t n_links) const {
    if (per_link_base_intensity.size() != n_links)
      throw std::invalid_argument("style needs one base intensity per link");
    for (std::size_t i = 0; i < n_links; ++i) {
      const double b = per_link_base_intensity[i];
      if (!(b > 0.0 && b <= 1.0)) throw std::invalid_argument("base intensity must lie in (0,1]");
      if (i > 0 && std::abs(b - per_link_base_intensity[i - 1]) < 0.08)
        throw std::invalid_argument("adjacent link intensities must differ by at least 0.08");
    }
    if (radial_shading_gain < 0.0) throw std::invalid_argument("shading gain must be >= 0");
    if (!(background_value >= 0.0 && background_value < 1.0))
      throw std::invalid_argument("background value must lie in [0,1)");
    if (supersample_factor < 1) throw std::invalid_argument("supersample factor must be >= 1");
    if (channels != 1 && channels != 3) throw std::invalid_argument("channels must be 1 or 3");
  }
};

/// Golden-ratio intensity sequence in [0.35, 0.95]; adjacent links differ by
/// at least 0.6 * 0.382.
inline RenderStyle default_style(std::size_t n_links) {
  RenderStyle s;
  constexpr double kGolden = 0.6180339887498949;
  for (std::size_t i = 0; i < n_links; ++i) {
    const double f = std::fmod(0.5 + static_cast<double>(i) * kGolden, 1.0);
    s.per_link_base_intensity.push_back(0.35 + 0.6 * f);
  }
  return s;
}

/// A posed chain rasterized into local pixel coordinates.
class ChainRaster {
 public:
  ChainRaster(const ChainConfig& config, const CameraModel& camera, const ChainState& state)
      : scale_(camera.scale) {
    const ChainPose pose = pose_chain(config, state);
    origin_col_ = static_cast<int>(std::floor(camera.offset.x()));
    origin_row_ = static_cast<int>(std::floor(camera.offset.y()));
    const Vec2 frac(camera.offset.x() - origin_col_, camera.offset.y() - origin_row_);
    const std::size_t n = config.n_joints();
    capsules_.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      Capsule c;
      c.a = scale_ * pose.joints[i] + frac;
      c.b = scale_ * pose.joints[i + 1] + frac;
      c.axis = pose.axis(i);
      c.normal = pose.normal(i);
      c.length = scale_ * config.link_lengths[i];
      c.radius = scale_ * config.link_radii[i];
      c.extent = scale_ * (config.link_lengths[i] + config.link_radii[i]);
      c.lo = c.a.cwiseMin(c.b).array() - c.radius;
      c.hi = c.a.cwiseMax(c.b).array() + c.radius;
      capsules_.push_back(c);
    }
  }

  int origin_col() const { return origin_col_; }
  int origin_row() const { return origin_row_; }

  /// Local coordinate of an image pixel center.
  Vec2 local_of_pixel(int row, int col) const {
    return {static_cast<double>(col - origin_col_), static_cast<double>(row - origin_row_)};
  }

  /// Most distal link covering a local point, or -1.
  int top_link(const Vec2& x) const {
    for (int i = static_cast<int>(capsules_.size()) - 1; i >= 0; --i) {
      const Capsule& c = capsules_[static_cast<std::size_t>(i)];
      if (x.x() < c.lo.x() || x.x() > c.hi.x() || x.y() < c.lo.y() || x.y() > c.hi.y()) continue;
      if (inside(c, x)) return i;
    }
    return -1;
  }

  /// Material coordinates (world units, link frame) of a local point on link i.
  LinkPoint material_point(int link, const Vec2& x) const {
    const Capsule& c = capsules_[static_cast<std::size_t>(link)];
    const Vec2 d = x - c.a;
    return {link, d.dot(c.axis) / scale_, d.dot(c.normal) / scale_};
  }

  /// Local position of a material point under this raster's pose.
  Vec2 local_position(const LinkPoint& p) const {
    const Capsule& c = capsules_[static_cast<std::size_t>(p.link_index)];
    return c.a + scale_ * (p.along * c.axis + p.across * c.normal);
  }

  /// Shaded intensity of a point known to lie on link i, before channel tint.
  double shade(int link, const Vec2& x, const RenderStyle& style) const {
    const Capsule& c = capsules_[static_cast<std::size_t>(link)];
    const double rho = std::min(1.0, (x - c.a).norm() / c.extent);
    const double v = style.per_link_base_intensity[static_cast<std::size_t>(link)] *
                     (1.0 - style.radial_shading_gain * rho);
    return std::clamp(v, 0.0, 1.0);
  }

 private:
  struct Capsule {
    Vec2 a, b, axis, normal, lo, hi;
    double length = 0, radius = 0, extent = 0;
  };

  static bool inside(const Capsule& c, const Vec2& x) {
    const Vec2 d = x - c.a;
    const double t = std::clamp(d.dot(c.axis), 0.0, c.length);
    const Vec2 e = d - t * c.axis;
    return e.squaredNorm() <= c.radius * c.radius;
  }

  double scale_;
  int origin_col_ = 0;
  int origin_row_ = 0;
  std::vector<Capsule> capsules_;
};

inline double channel_tint(int link, int channel, int channels) {
  if (channels == 1) return 1.0;
  const double f = std::fmod(0.3 * link + channel / 3.0, 1.0);
  return 0.55 + 0.45 * f;
}

inline Image render(const ChainConfig& config, const CameraModel& camera, const RenderStyle& style,
                    const ChainState& state) {
  style.validate(config.n_joints());
  const ChainRaster raster(config, camera, state);
  const int ss = style.supersample_factor;
  const int ch = style.channels;
  Image img(camera.height, camera.width, ch, static_cast<float>(style.background_value));
  std::vector<double> acc(static_cast<std::size_t>(ch));
  const double inv = 1.0 / static_cast<double>(ss * ss);
  for (int r = 0; r < camera.height; ++r) {
    for (int c = 0; c < camera.width; ++c) {
      const Vec2 center = raster.local_of_pixel(r, c);
      std::fill(acc.begin(), acc.end(), 0.0);
      bool any = false;
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const Vec2 x = center + Vec2((sx + 0.5) / ss - 0.5, (sy + 0.5) / ss - 0.5);
          const int link = raster.top_link(x);
          if (link < 0) {
            for (int k = 0; k < ch; ++k) acc[static_cast<std::size_t>(k)] += style.background_value;
          } else {
            any = true;
            const double v = raster.shade(link, x, style);
            for (int k = 0; k < ch; ++k) acc[static_cast<std::size_t>(k)] += v * channel_tint(link, k, ch);
          }
        }
      }
      if (!any) continue;
      for (int k = 0; k < ch; ++k)
        img(r, c, k) = static_cast<float>(std::clamp(acc[static_cast<std::size_t>(k)] * inv, 0.0, 1.0));
    }
  }
  return img;
}

/// True where any capsule covers the pixel center. Depends on geometry only.
inline Mask foreground_mask(const ChainConfig& config, const CameraModel& camera, const RenderStyle& /*style*/,
                            const ChainState& state) {
  const ChainRaster raster(config, camera, state);
  Mask m(camera.height, camera.width, 1, 0);
  for (int r = 0; r < camera.height; ++r)
    for (int c = 0; c < camera.width; ++c)
      m(r, c) = raster.top_link(raster.local_of_pixel(r, c)) >= 0 ? 1 : 0;
  return m;
}

/// Per-pixel index of the most distal link covering the pixel center (-1 for
/// background).
inline Grid<int> link_index_map(const ChainConfig& config, const CameraModel& camera, const ChainState& state) {
  const ChainRaster raster(config, camera, state);
  Grid<int> m(camera.height, camera.width, 1, -1);
  for (int r = 0; r < camera.height; ++r)
    for (int c = 0; c < camera.width; ++c) m(r, c) = raster.top_link(raster.local_of_pixel(r, c));
  return m;
}

}  // namespace jidm
