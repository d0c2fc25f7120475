// Dense optical flow between chain states: the exact material-point flow
// oracle, its first-order prediction from the analytic Jacobian, and a
// Gaussian/dropout noise model standing in for estimator error.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>

#include "jidm/image.hpp"
#include "jidm/kinematics.hpp"
#include "jidm/render.hpp"

namespace jidm {

/// Per-pixel displacement anchored at the source frame.
struct FlowField {
  Grid<double> vectors;  // H x W x 2, (dx, dy) in pixels
  Mask valid;
  Mask occluded;

  FlowField() = default;
  FlowField(int h, int w) : vectors(h, w, 2, 0.0), valid(h, w, 1, 0), occluded(h, w, 1, 0) {}

  int height() const { return valid.height; }
  int width() const { return valid.width; }
  Vec2 at(int row, int col) const { return {vectors(row, col, 0), vectors(row, col, 1)}; }
  void set(int row, int col, const Vec2& v) {
    vectors(row, col, 0) = v.x();
    vectors(row, col, 1) = v.y();
  }

  friend bool operator==(const FlowField&, const FlowField&) = default;
};

struct FlowNoiseModel {
  double sigma_pixels = 0.0;
  double dropout_rate = 0.0;
  std::uint64_t seed = 0;
};

/// Exact flow from state `from` to state `to`: each foreground pixel of the
/// source frame follows its material point. Pixels whose material point ends
/// under a more distal link are flagged occluded but keep their flow.
inline FlowField oracle_flow_between(const ChainConfig& config, const CameraModel& camera, const ChainState& from,
                                     const ChainState& to) {
  const ChainRaster src(config, camera, from);
  const ChainRaster dst(config, camera, to);
  FlowField f(camera.height, camera.width);
  for (int r = 0; r < camera.height; ++r) {
    for (int c = 0; c < camera.width; ++c) {
      const Vec2 x = src.local_of_pixel(r, c);
      const int link = src.top_link(x);
      if (link < 0) continue;
      const LinkPoint mp = src.material_point(link, x);
      const Vec2 y = dst.local_position(mp);
      f.set(r, c, y - src.local_position(mp));
      f.valid(r, c) = 1;
      f.occluded(r, c) = dst.top_link(y) > link ? 1 : 0;
    }
  }
  return f;
}

inline FlowField oracle_flow(const ChainConfig& config, const CameraModel& camera, const RenderStyle& /*style*/,
                             const ChainState& state, const Action& action) {
  const ChainState next{state.q + action.delta_a};
  return oracle_flow_between(config, camera, state, next);
}

/// Analytic per-pixel Jacobians (pixels per radian) at the material point of
/// each foreground pixel of the frame rendered at `state`. Background pixels
/// get an empty flag in `valid`.
struct AnalyticPixelField {
  Mask valid;
  std::vector<Mat2X> jacobians;  // row-major over pixels, empty for background

  const Mat2X& at(int row, int col) const {
    return jacobians[static_cast<std::size_t>(row) * static_cast<std::size_t>(valid.width) + col];
  }
};

inline AnalyticPixelField analytic_pixel_field(const ChainConfig& config, const CameraModel& camera,
                                               const ChainState& state) {
  const ChainRaster raster(config, camera, state);
  const ChainPose pose = pose_chain(config, state);
  AnalyticPixelField field{Mask(camera.height, camera.width, 1, 0), {}};
  field.jacobians.resize(static_cast<std::size_t>(camera.height) * camera.width);
  for (int r = 0; r < camera.height; ++r) {
    for (int c = 0; c < camera.width; ++c) {
      const Vec2 x = raster.local_of_pixel(r, c);
      const int link = raster.top_link(x);
      if (link < 0) continue;
      field.valid(r, c) = 1;
      field.jacobians[static_cast<std::size_t>(r) * camera.width + c] =
          camera.scale * link_point_jacobian(pose, raster.material_point(link, x));
    }
  }
  return field;
}

inline FlowField first_order_flow(const ChainConfig& config, const CameraModel& camera, const ChainState& state,
                                  const Action& action) {
  const AnalyticPixelField field = analytic_pixel_field(config, camera, state);
  FlowField f(camera.height, camera.width);
  for (int r = 0; r < camera.height; ++r) {
    for (int c = 0; c < camera.width; ++c) {
      if (!field.valid(r, c)) continue;
      f.set(r, c, field.at(r, c) * action.delta_a);
      f.valid(r, c) = 1;
    }
  }
  return f;
}

/// Zero-mean Gaussian noise on valid vectors plus random invalidation.
/// Deterministic in model.seed.
inline FlowField add_noise(FlowField flow, const FlowNoiseModel& model) {
  if (model.sigma_pixels == 0.0 && model.dropout_rate == 0.0) return flow;
  std::mt19937_64 rng(model.seed);
  std::normal_distribution<double> gauss(0.0, model.sigma_pixels);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int r = 0; r < flow.height(); ++r) {
    for (int c = 0; c < flow.width(); ++c) {
      if (!flow.valid(r, c)) continue;
      const double nx = model.sigma_pixels > 0.0 ? gauss(rng) : 0.0;
      const double ny = model.sigma_pixels > 0.0 ? gauss(rng) : 0.0;
      if (model.dropout_rate > 0.0 && unit(rng) < model.dropout_rate) {
        flow.valid(r, c) = 0;
        flow.set(r, c, Vec2::Zero());
        continue;
      }
      flow.set(r, c, flow.at(r, c) + Vec2(nx, ny));
    }
  }
  return flow;
}

/// Bilinear sample of the flow at a fractional pixel location; fails unless
/// all four neighbours are valid.
inline std::optional<Vec2> sample_flow(const FlowField& f, const Vec2& p) {
  const int c0 = static_cast<int>(std::floor(p.x()));
  const int r0 = static_cast<int>(std::floor(p.y()));
  const double ax = p.x() - c0;
  const double ay = p.y() - r0;
  Vec2 out = Vec2::Zero();
  for (int dr = 0; dr <= 1; ++dr) {
    for (int dc = 0; dc <= 1; ++dc) {
      const int r = r0 + dr;
      const int c = c0 + dc;
      if (!f.valid.contains(r, c) || !f.valid(r, c)) return std::nullopt;
      const double w = (dr ? ay : 1.0 - ay) * (dc ? ax : 1.0 - ax);
      out += w * f.at(r, c);
    }
  }
  return out;
}

}  // namespace jidm
