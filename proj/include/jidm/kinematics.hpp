// Planar serial-chain kinematics: forward kinematics, the analytic embodiment
// Jacobian of body points, and the affine camera that maps world units to
// pixels.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace jidm {

using Vec2 = Eigen::Vector2d;
using VecX = Eigen::VectorXd;
using Mat2X = Eigen::Matrix<double, 2, Eigen::Dynamic>;

struct JointLimit {
  double lo = -2.4;
  double hi = 2.4;
};

struct ChainConfig {
  std::vector<double> link_lengths;
  std::vector<double> link_radii;
  std::vector<JointLimit> joint_limits;
  Vec2 base_position = Vec2::Zero();

  std::size_t n_joints() const { return link_lengths.size(); }

  /// Throws std::invalid_argument when any geometric invariant is violated.
  void validate() const {
    const std::size_t n = link_lengths.size();
    if (n == 0) throw std::invalid_argument("chain needs at least one joint");
    if (link_radii.size() != n || joint_limits.size() != n)
      throw std::invalid_argument("chain arrays disagree on joint count");
    for (std::size_t i = 0; i < n; ++i) {
      if (!(link_lengths[i] > 0.0))
        throw std::invalid_argument("link length must be positive (link " + std::to_string(i) + ")");
      if (!(link_radii[i] > 0.0))
        throw std::invalid_argument("link radius must be positive (link " + std::to_string(i) + ")");
      if (!(joint_limits[i].lo < joint_limits[i].hi))
        throw std::invalid_argument("joint limit lo must be < hi (joint " + std::to_string(i) + ")");
    }
  }

  double reach() const {
    double r = 0.0;
    for (double l : link_lengths) r += l;
    return r + link_radii.back();
  }
};

/// Geometric taper chain: lengths 1.0*0.85^i, radii 0.09*0.9^i, limits +-2.4.
inline ChainConfig default_chain(std::size_t n_joints, double length_taper = 0.85,
                                 double radius_taper = 0.9, double limit = 2.4, double base_radius = 0.09) {
  ChainConfig c;
  for (std::size_t i = 0; i < n_joints; ++i) {
    c.link_lengths.push_back(std::pow(length_taper, static_cast<double>(i)));
    c.link_radii.push_back(base_radius * std::pow(radius_taper, static_cast<double>(i)));
    c.joint_limits.push_back({-limit, limit});
  }
  c.validate();
  return c;
}

struct ChainState {
  VecX q;
};

struct Action {
  VecX delta_a;
};

/// A material point attached to a link: arc_param in [0,1] runs from the
/// link's proximal joint to its distal joint, lateral in [-1,1] is a fraction
/// of the link radius.
struct BodyPoint {
  int link_index = 0;
  double arc_param = 1.0;
  double lateral = 0.0;
};

/// A material point expressed directly in a link frame (world units). Used
/// for pixels that land on a capsule cap, where arc_param leaves [0,1].
struct LinkPoint {
  int link_index = 0;
  double along = 0.0;
  double across = 0.0;
};

inline LinkPoint to_link_point(const ChainConfig& config, const BodyPoint& p) {
  if (p.link_index < 0 || static_cast<std::size_t>(p.link_index) >= config.n_joints())
    throw std::domain_error("body point link_index out of range: " + std::to_string(p.link_index));
  if (p.arc_param < 0.0 || p.arc_param > 1.0)
    throw std::domain_error("body point arc_param outside [0,1]");
  if (p.lateral < -1.0 || p.lateral > 1.0)
    throw std::domain_error("body point lateral outside [-1,1]");
  const auto i = static_cast<std::size_t>(p.link_index);
  return {p.link_index, p.arc_param * config.link_lengths[i], p.lateral * config.link_radii[i]};
}

/// Joint positions and absolute link headings of a posed chain. joints has
/// n+1 entries; joints[n] is the distal end of the last link.
struct ChainPose {
  std::vector<Vec2> joints;
  std::vector<double> headings;

  Vec2 axis(std::size_t i) const { return {std::cos(headings[i]), std::sin(headings[i])}; }
  Vec2 normal(std::size_t i) const { return {-std::sin(headings[i]), std::cos(headings[i])}; }
};

inline ChainPose pose_chain(const ChainConfig& config, const ChainState& state) {
  const std::size_t n = config.n_joints();
  if (static_cast<std::size_t>(state.q.size()) != n)
    throw std::invalid_argument("state dimension does not match chain");
  ChainPose pose;
  pose.joints.reserve(n + 1);
  pose.headings.reserve(n);
  Vec2 p = config.base_position;
  double heading = 0.0;
  pose.joints.push_back(p);
  for (std::size_t i = 0; i < n; ++i) {
    heading += state.q[static_cast<Eigen::Index>(i)];
    pose.headings.push_back(heading);
    p += config.link_lengths[i] * Vec2(std::cos(heading), std::sin(heading));
    pose.joints.push_back(p);
  }
  return pose;
}

inline Vec2 link_point_position(const ChainPose& pose, const LinkPoint& p) {
  const auto i = static_cast<std::size_t>(p.link_index);
  return pose.joints[i] + p.along * pose.axis(i) + p.across * pose.normal(i);
}

inline Vec2 forward_kinematics(const ChainConfig& config, const ChainState& state, const BodyPoint& point) {
  const LinkPoint lp = to_link_point(config, point);
  return link_point_position(pose_chain(config, state), lp);
}

/// d(position)/dq for a point on link i: column j <= i is the joint-j rotation
/// rate perp(x - joint_j); columns j > i are zero.
inline Mat2X link_point_jacobian(const ChainPose& pose, const LinkPoint& p) {
  const std::size_t n = pose.headings.size();
  const Vec2 x = link_point_position(pose, p);
  Mat2X jac = Mat2X::Zero(2, static_cast<Eigen::Index>(n));
  for (int j = 0; j <= p.link_index; ++j) {
    const Vec2 r = x - pose.joints[static_cast<std::size_t>(j)];
    jac(0, j) = -r.y();
    jac(1, j) = r.x();
  }
  return jac;
}

inline Mat2X analytic_jacobian(const ChainConfig& config, const ChainState& state, const BodyPoint& point) {
  const LinkPoint lp = to_link_point(config, point);
  return link_point_jacobian(pose_chain(config, state), lp);
}

inline ChainState clamp_to_limits(const ChainConfig& config, ChainState state) {
  for (Eigen::Index j = 0; j < state.q.size(); ++j) {
    const auto& lim = config.joint_limits[static_cast<std::size_t>(j)];
    state.q[j] = std::clamp(state.q[j], lim.lo, lim.hi);
  }
  return state;
}

inline bool within_limits(const ChainConfig& config, const ChainState& state) {
  for (Eigen::Index j = 0; j < state.q.size(); ++j) {
    const auto& lim = config.joint_limits[static_cast<std::size_t>(j)];
    if (state.q[j] < lim.lo || state.q[j] > lim.hi) return false;
  }
  return true;
}

/// Per-coordinate cap of an action at +-delta_max.
inline Action clamp_action(Action a, double delta_max) {
  a.delta_a = a.delta_a.cwiseMax(-delta_max).cwiseMin(delta_max);
  return a;
}

/// Affine pixel camera. Pixel coordinates are (x, y) = (column, row); pixel
/// (c, r) has its center at exactly (c, r).
struct CameraModel {
  double scale = 32.0;
  Vec2 offset = Vec2(64.0, 64.0);
  int height = 128;
  int width = 128;

  void validate() const {
    if (!(scale > 0.0)) throw std::invalid_argument("camera scale must be positive");
    if (height < 16 || width < 16) throw std::invalid_argument("camera image must be at least 16x16");
  }
};

inline Vec2 project(const CameraModel& camera, const Vec2& world) { return camera.scale * world + camera.offset; }

inline Vec2 unproject(const CameraModel& camera, const Vec2& pixel) { return (pixel - camera.offset) / camera.scale; }

/// Camera whose scale makes the fully extended chain fit inside the frame
/// with the base at the image center.
inline CameraModel fit_camera(const ChainConfig& config, int height, int width, double margin = 0.92) {
  CameraModel cam;
  cam.height = height;
  cam.width = width;
  const double half = 0.5 * static_cast<double>(std::min(height, width) - 1);
  cam.scale = margin * half / config.reach();
  cam.offset = Vec2(0.5 * (width - 1), 0.5 * (height - 1)) - cam.scale * config.base_position;
  cam.validate();
  return cam;
}

/// Tip of the last link, in pixels.
inline Vec2 tip_pixel(const ChainConfig& config, const CameraModel& camera, const ChainState& state) {
  return project(camera, pose_chain(config, state).joints.back());
}

inline Mat2X tip_pixel_jacobian(const ChainConfig& config, const CameraModel& camera, const ChainState& state) {
  const auto n = static_cast<int>(config.n_joints());
  const LinkPoint tip{n - 1, config.link_lengths.back(), 0.0};
  return camera.scale * link_point_jacobian(pose_chain(config, state), tip);
}

}  // namespace jidm
