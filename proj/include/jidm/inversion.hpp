// Ridge-regularized action recovery from a per-pixel Jacobian field and a
// flow field, and the chunk translator that applies it to adjacent frames.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "jidm/flow.hpp"
#include "jidm/image.hpp"
#include "jidm/kinematics.hpp"

namespace jidm {

using MatX2 = Eigen::Matrix<double, Eigen::Dynamic, 2>;

struct RidgeParams {
  double lambda = 1e-3;
  bool use_mask = true;
  /// Give zero weight to pixels whose flow is flagged occluded.
  bool weight_by_validity = false;
};

/// Right-inverse ridge pseudoinverse J^T (J J^T + lambda I)^{-1} of a 2 x n
/// Jacobian. Equal to (J^T J + lambda I)^{-1} J^T.
inline MatX2 ridge_pinv(const Mat2X& jac, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("ridge lambda must be >= 0");
  const Eigen::Matrix2d a = jac * jac.transpose() + lambda * Eigen::Matrix2d::Identity();
  const double det = a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0);
  const double scale = std::max({std::abs(a(0, 0)), std::abs(a(1, 1)), 1e-300});
  if (!(std::abs(det) > 1e-14 * scale * scale)) throw std::domain_error("singular 2x2 system in ridge_pinv");
  Eigen::Matrix2d inv;
  inv << a(1, 1), -a(0, 1), -a(1, 0), a(0, 0);
  inv /= det;
  return jac.transpose() * inv;
}

struct Pixel {
  int row = 0;
  int col = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
  friend auto operator<=>(const Pixel&, const Pixel&) = default;
};

/// Per-pixel 2 x n matrices evaluated at a set of pixels.
struct JacobianField {
  int n = 0;
  std::vector<Pixel> pixels;
  std::vector<Mat2X> matrices;

  std::size_t size() const { return pixels.size(); }
  void add(Pixel p, Mat2X m) {
    pixels.push_back(p);
    matrices.push_back(std::move(m));
  }
};

/// Analytic field restricted to the requested pixels (background pixels get
/// zero matrices).
inline JacobianField analytic_field_at(const ChainConfig& config, const CameraModel& camera, const ChainState& state,
                                       const std::vector<Pixel>& pixels) {
  const AnalyticPixelField dense = analytic_pixel_field(config, camera, state);
  JacobianField f;
  f.n = static_cast<int>(config.n_joints());
  for (const Pixel& p : pixels) {
    if (dense.valid(p.row, p.col))
      f.add(p, dense.at(p.row, p.col));
    else
      f.add(p, Mat2X::Zero(2, f.n));
  }
  return f;
}

struct InversionResult {
  Action action;
  bool ill_conditioned = false;
  double min_eigenvalue = 0.0;
  double trace = 0.0;
  std::size_t pixels_used = 0;
  /// sqrt(sum |J da - v|^2 / sum |v|^2); 0 when there is no flow.
  double residual_ratio = 0.0;
};

namespace detail {

struct NormalTerms {
  Eigen::MatrixXd gram;
  VecX rhs;
  double flow_sq = 0.0;
};

inline NormalTerms pairwise_sum(const std::vector<NormalTerms>& parts, std::size_t lo, std::size_t hi) {
  if (hi - lo == 1) return parts[lo];
  const std::size_t mid = lo + (hi - lo) / 2;
  NormalTerms a = pairwise_sum(parts, lo, mid);
  const NormalTerms b = pairwise_sum(parts, mid, hi);
  a.gram += b.gram;
  a.rhs += b.rhs;
  a.flow_sq += b.flow_sq;
  return a;
}

/// In-place Cholesky solve of a symmetric positive-definite system.
inline VecX cholesky_solve(Eigen::MatrixXd a, VecX b) {
  const Eigen::Index n = a.rows();
  for (Eigen::Index j = 0; j < n; ++j) {
    double d = a(j, j);
    for (Eigen::Index k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
    if (!(d > 0.0)) throw std::domain_error("normal matrix is not positive definite");
    const double l = std::sqrt(d);
    a(j, j) = l;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
      a(i, j) = s / l;
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    double s = b[i];
    for (Eigen::Index k = 0; k < i; ++k) s -= a(i, k) * b[k];
    b[i] = s / a(i, i);
  }
  for (Eigen::Index i = n - 1; i >= 0; --i) {
    double s = b[i];
    for (Eigen::Index k = i + 1; k < n; ++k) s -= a(k, i) * b[k];
    b[i] = s / a(i, i);
  }
  return b;
}

}  // namespace detail

/// argmin_da sum_p |J_p da - v_p|^2 + lambda |da|^2 via the normal equations.
/// Pixels are reduced in sorted (row, col) order with a pairwise tree, so the
/// result is bitwise independent of the order of `field.pixels`.
inline InversionResult aggregate_invert(const JacobianField& field, const FlowField& flow, const RidgeParams& params) {
  const auto n = static_cast<Eigen::Index>(field.n);
  if (n < 1) throw std::invalid_argument("field has no action dimensions");
  if (!(params.lambda >= 0.0)) throw std::invalid_argument("ridge lambda must be >= 0");

  std::vector<std::size_t> order;
  order.reserve(field.size());
  for (std::size_t k = 0; k < field.size(); ++k) {
    const Pixel& p = field.pixels[k];
    if (!flow.valid.contains(p.row, p.col)) throw std::out_of_range("field pixel outside the flow image");
    if (params.use_mask && !flow.valid(p.row, p.col)) continue;
    if (params.weight_by_validity && flow.occluded(p.row, p.col)) continue;
    if (!field.matrices[k].allFinite() || !flow.at(p.row, p.col).allFinite())
      throw std::domain_error("non-finite field or flow value");
    order.push_back(k);
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (field.pixels[a] != field.pixels[b]) return field.pixels[a] < field.pixels[b];
    const auto& ma = field.matrices[a];
    const auto& mb = field.matrices[b];
    return std::lexicographical_compare(ma.data(), ma.data() + ma.size(), mb.data(), mb.data() + mb.size());
  });

  std::vector<detail::NormalTerms> parts;
  parts.reserve(order.size() + 1);
  for (std::size_t k : order) {
    const Pixel& p = field.pixels[k];
    const Mat2X& jac = field.matrices[k];
    const Vec2 v = flow.at(p.row, p.col);
    parts.push_back({jac.transpose() * jac, jac.transpose() * v, v.squaredNorm()});
  }
  detail::NormalTerms total{Eigen::MatrixXd::Zero(n, n), VecX::Zero(n), 0.0};
  if (!parts.empty()) total = detail::pairwise_sum(parts, 0, parts.size());

  InversionResult res;
  res.pixels_used = order.size();
  res.trace = total.gram.trace();
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(total.gram, Eigen::EigenvaluesOnly);
  res.min_eigenvalue = eig.eigenvalues()[0];
  res.ill_conditioned = res.min_eigenvalue < 1e-10 * res.trace || res.trace == 0.0;

  Eigen::MatrixXd a = total.gram;
  a.diagonal().array() += params.lambda;
  res.action.delta_a = detail::cholesky_solve(a, total.rhs);

  if (total.flow_sq > 0.0) {
    // |J da - v|^2 summed = da' G da - 2 da' b + |v|^2
    const VecX& d = res.action.delta_a;
    const double r2 = std::max(0.0, d.dot(total.gram * d) - 2.0 * d.dot(total.rhs) + total.flow_sq);
    res.residual_ratio = std::sqrt(r2 / total.flow_sq);
  }
  return res;
}

/// A planned or observed frame. `state` is the rendering state when the frame
/// came from the simulator or the scripted planner.
struct Frame {
  Image image;
  std::optional<ChainState> state;
};

using FlowFn = std::function<FlowField(const Frame& from, const Frame& to)>;
/// Evaluates a Jacobian field on `frame` at the given pixels.
using FieldFn = std::function<JacobianField(const Frame& frame, const std::vector<Pixel>& pixels)>;

struct ChunkTranslation {
  std::vector<Action> actions;      // clamped to +-delta_max
  std::vector<Action> raw_actions;  // before clamping
  std::vector<InversionResult> solves;
};

inline std::vector<Pixel> valid_pixels(const FlowField& flow) {
  std::vector<Pixel> px;
  for (int r = 0; r < flow.height(); ++r)
    for (int c = 0; c < flow.width(); ++c)
      if (flow.valid(r, c)) px.push_back({r, c});
  return px;
}

inline std::vector<Pixel> all_pixels(int height, int width) {
  std::vector<Pixel> px;
  px.reserve(static_cast<std::size_t>(height) * width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) px.push_back({r, c});
  return px;
}

/// Recovers one action per adjacent frame pair of frames[0..K]; frames[0] is
/// the current observation.
inline ChunkTranslation translate_chunk(const std::vector<Frame>& frames, const FieldFn& field_fn,
                                        const FlowFn& flow_fn, const RidgeParams& params, double delta_max) {
  if (frames.size() < 2) throw std::invalid_argument("translate_chunk needs at least two frames (K >= 1)");
  const Image& first = frames.front().image;
  for (const auto& f : frames)
    if (!f.image.same_shape(first.height, first.width) || f.image.channels != first.channels)
      throw std::invalid_argument("chunk frames must share a shape");
  ChunkTranslation out;
  for (std::size_t k = 0; k + 1 < frames.size(); ++k) {
    const FlowField flow = flow_fn(frames[k], frames[k + 1]);
    const std::vector<Pixel> px = params.use_mask ? valid_pixels(flow) : all_pixels(flow.height(), flow.width());
    const JacobianField field = field_fn(frames[k], px);
    InversionResult res = aggregate_invert(field, flow, params);
    out.raw_actions.push_back(res.action);
    out.actions.push_back(clamp_action(res.action, delta_max));
    out.solves.push_back(std::move(res));
  }
  return out;
}

}  // namespace jidm
