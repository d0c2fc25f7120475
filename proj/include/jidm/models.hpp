// Trainable inverse-dynamics models.
//
// All three models share one per-pixel encoder: an MLP over normalized pixel
// coordinates and P x P patches centred on the pixel, one per level of a
// box-filtered image pyramid (factor 3 per level), plus, for the baselines,
// the same patches of o_{t+1} or the flow vector at the pixel. A context vector is the mean encoding over
// the active points of a fixed pixel grid (grid points whose pixel differs
// from the background).
//
//  * PatchFieldModel (J-IDM): a per-pixel head maps [encoding(p), context]
//    to a 2 x n Jacobian; actions are recovered by ridge inversion.
//  * DirectIDM: a head maps the context vector straight to an action.
//    Variant image_pair sees (o_t, o_{t+1}) patches, variant image_flow sees
//    the o_t patch and the flow vector.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "jidm/dataset.hpp"
#include "jidm/flow.hpp"
#include "jidm/inversion.hpp"
#include "jidm/nn.hpp"

namespace jidm {

enum class ModelKind : std::uint32_t { jidm = 1, unipi = 2, dflow = 3 };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::jidm: return "jidm";
    case ModelKind::unipi: return "unipi";
    case ModelKind::dflow: return "dflow";
  }
  return "unknown";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "jidm") return ModelKind::jidm;
  if (s == "unipi") return ModelKind::unipi;
  if (s == "dflow") return ModelKind::dflow;
  throw std::invalid_argument("unknown model kind '" + s + "' (expected jidm, unipi or dflow)");
}

struct ModelLayout {
  ModelKind kind = ModelKind::jidm;
  int n_joints = 2;
  int channels = 1;
  int patch = 9;
  int levels = 1;  // pyramid levels; level k averages 3^k x 3^k blocks
  int hidden1 = 128;
  int hidden2 = 128;
  int head_hidden = 128;
  int ctx_stride = 4;
  int height = 128;
  int width = 128;
  double background = 0.0;
  double jac_scale = 1.0;     // pixels per radian represented by a unit field output
  double action_scale = 0.12; // radians represented by a unit direct-head output
  double flow_scale = 1.0;    // pixels represented by a unit flow input

  int input_size() const {
    const int patch_len = levels * patch * patch * channels;
    switch (kind) {
      case ModelKind::jidm: return 2 + patch_len;
      case ModelKind::unipi: return 2 + 2 * patch_len;
      case ModelKind::dflow: return 2 + patch_len + 2;
    }
    return 0;
  }

  std::vector<int> encoder_sizes() const { return {input_size(), hidden1, hidden2}; }
  std::vector<int> head_sizes() const {
    if (kind == ModelKind::jidm) return {2 * hidden2, head_hidden, 2 * n_joints};
    return {hidden2, head_hidden, n_joints};
  }
  std::size_t param_count() const { return nn::mlp_param_count(encoder_sizes()) + nn::mlp_param_count(head_sizes()); }

  void validate() const {
    if (n_joints < 1) throw std::invalid_argument("model needs n_joints >= 1");
    if (patch < 1 || patch % 2 == 0) throw std::invalid_argument("patch size must be odd and positive");
    if (levels < 1 || levels > 8) throw std::invalid_argument("pyramid levels must lie in [1, 8]");
    if (hidden1 < 1 || hidden2 < 1 || head_hidden < 1) throw std::invalid_argument("layer widths must be positive");
    if (ctx_stride < 1) throw std::invalid_argument("context stride must be positive");
    if (channels != 1 && channels != 3) throw std::invalid_argument("channels must be 1 or 3");
  }
};

inline constexpr int kPyramidFactor = 3;

/// Fewest pyramid levels whose coarsest patch spans `extent` pixels.
inline int levels_to_cover(int patch, int extent) {
  int levels = 1;
  for (long span = patch; span < extent; span *= kPyramidFactor) ++levels;
  return levels;
}

/// Scales and pyramid depth derived from the data geometry.
inline ModelLayout layout_for(ModelKind kind, const DatasetManifest& m, int patch = 9, int hidden1 = 128,
                              int hidden2 = 128, int head_hidden = 128, int ctx_stride = 4) {
  ModelLayout l;
  l.kind = kind;
  l.n_joints = static_cast<int>(m.chain.n_joints());
  l.channels = m.style.channels;
  l.patch = patch;
  l.hidden1 = hidden1;
  l.hidden2 = hidden2;
  l.head_hidden = head_hidden;
  l.ctx_stride = ctx_stride;
  l.height = m.camera.height;
  l.width = m.camera.width;
  l.levels = levels_to_cover(patch, std::max(l.height, l.width));
  l.background = m.style.background_value;
  l.jac_scale = m.camera.scale * m.chain.reach();
  l.action_scale = m.delta_max;
  l.flow_scale = m.delta_max * l.jac_scale;
  return l;
}

/// Baseline layout with the same encoder widths whose total parameter count
/// is closest to `reference`. The head width is tuned first; the first
/// encoder width shrinks only if no head width gets within 2%.
inline ModelLayout matched_direct_layout(const ModelLayout& reference, ModelKind kind) {
  if (kind == ModelKind::jidm) throw std::invalid_argument("matched layout is for direct baselines");
  const auto target = static_cast<double>(reference.param_count());
  ModelLayout best;
  double best_err = std::numeric_limits<double>::infinity();
  for (int h1 = reference.hidden1; h1 >= 1; --h1) {
    for (int hd = 1; hd <= 8 * reference.head_hidden + 64; ++hd) {
      ModelLayout l = reference;
      l.kind = kind;
      l.hidden1 = h1;
      l.head_hidden = hd;
      const double err = std::abs(static_cast<double>(l.param_count()) - target) / target;
      if (err < best_err) {
        best_err = err;
        best = l;
      }
    }
    if (best_err <= 0.02) break;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Feature extraction

/// Bilinear sample with zero padding outside the image.
inline double sample_bilinear(const Image& img, double y, double x, int ch) {
  const int c0 = static_cast<int>(std::floor(x));
  const int r0 = static_cast<int>(std::floor(y));
  const double ax = x - c0;
  const double ay = y - r0;
  double out = 0.0;
  for (int dr = 0; dr <= 1; ++dr) {
    const double wy = dr ? ay : 1.0 - ay;
    if (wy == 0.0) continue;
    for (int dc = 0; dc <= 1; ++dc) {
      const double wx = dc ? ax : 1.0 - ax;
      if (wx == 0.0) continue;
      const int r = r0 + dr;
      const int c = c0 + dc;
      if (img.contains(r, c)) out += wy * wx * static_cast<double>(img(r, c, ch));
    }
  }
  return out;
}

namespace detail {

inline double* write_patch(const Image& img, const Pixel& p, int patch, double* out) {
  const int half = patch / 2;
  for (int dy = -half; dy <= half; ++dy)
    for (int dx = -half; dx <= half; ++dx)
      for (int ch = 0; ch < img.channels; ++ch)
        *out++ = sample_bilinear(img, static_cast<double>(p.row + dy), static_cast<double>(p.col + dx), ch);
  return out;
}

/// Box-averaged copy of an image: pixel (R, C) is the mean of the
/// factor x factor block starting at (R*factor, C*factor), zeros outside.
struct PooledImage {
  int height = 0, width = 0, channels = 1, factor = 1;
  std::vector<double> data;

  double at(int r, int c, int ch) const {
    if (r < 0 || c < 0 || r >= height || c >= width) return 0.0;
    return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
  }
};

inline PooledImage pool_image(const Image& img, int factor) {
  PooledImage p;
  p.factor = factor;
  p.channels = img.channels;
  p.height = (img.height + factor - 1) / factor;
  p.width = (img.width + factor - 1) / factor;
  p.data.assign(static_cast<std::size_t>(p.height) * p.width * p.channels, 0.0);
  const double norm = 1.0 / (static_cast<double>(factor) * factor);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      for (int ch = 0; ch < img.channels; ++ch)
        p.data[(static_cast<std::size_t>(r / factor) * p.width + c / factor) * p.channels + ch] +=
            norm * static_cast<double>(img(r, c, ch));
  return p;
}

/// Patch centred on p in a pooled image; the block centre of pooled pixel C
/// sits at C*factor + (factor-1)/2 in full-resolution coordinates.
inline double* write_pooled_patch(const PooledImage& img, const Pixel& p, int patch, double* out) {
  const int half = patch / 2;
  const double f = img.factor;
  const double cy = (p.row - 0.5 * (f - 1.0)) / f;
  const double cx = (p.col - 0.5 * (f - 1.0)) / f;
  for (int dy = -half; dy <= half; ++dy)
    for (int dx = -half; dx <= half; ++dx) {
      const double y = cy + dy, x = cx + dx;
      const int r0 = static_cast<int>(std::floor(y)), c0 = static_cast<int>(std::floor(x));
      const double ay = y - r0, ax = x - c0;
      for (int ch = 0; ch < img.channels; ++ch)
        *out++ = (1.0 - ay) * ((1.0 - ax) * img.at(r0, c0, ch) + ax * img.at(r0, c0 + 1, ch)) +
                 ay * ((1.0 - ax) * img.at(r0 + 1, c0, ch) + ax * img.at(r0 + 1, c0 + 1, ch));
    }
  return out;
}

inline std::vector<PooledImage> coarse_levels(const Image& img, int levels) {
  std::vector<PooledImage> out;
  int factor = 1;
  for (int k = 1; k < levels; ++k) out.push_back(pool_image(img, factor *= kPyramidFactor));
  return out;
}

inline double* write_coords(const ModelLayout& l, const Pixel& p, double* out) {
  *out++ = 2.0 * p.col / std::max(1, l.width - 1) - 1.0;
  *out++ = 2.0 * p.row / std::max(1, l.height - 1) - 1.0;
  return out;
}

inline bool pixel_active(const Image& img, int row, int col, double background) {
  for (int ch = 0; ch < img.channels; ++ch)
    if (std::abs(static_cast<double>(img(row, col, ch)) - background) > 1e-6) return true;
  return false;
}

inline void check_image(const ModelLayout& l, const Image& img) {
  if (!img.same_shape(l.height, l.width) || img.channels != l.channels)
    throw std::invalid_argument("image shape does not match the model layout");
}

}  // namespace detail

/// Active points of the fixed context grid.
inline std::vector<Pixel> context_pixels(const ModelLayout& l, const Image& img, const Image* second = nullptr) {
  std::vector<Pixel> out;
  const int start = l.ctx_stride / 2;
  for (int r = start; r < l.height; r += l.ctx_stride)
    for (int c = start; c < l.width; c += l.ctx_stride)
      if (detail::pixel_active(img, r, c, l.background) ||
          (second && detail::pixel_active(*second, r, c, l.background)))
        out.push_back({r, c});
  return out;
}

/// Encoder inputs for the given pixels. `second` is o_{t+1} (image_pair) and
/// `flow` is the flow field (image_flow).
inline void write_features(const ModelLayout& l, const Image& img, const Image* second, const FlowField* flow,
                           const std::vector<Pixel>& pixels, nn::Matrix& x, Eigen::Index first_col) {
  if (pixels.empty()) return;
  const auto coarse = detail::coarse_levels(img, l.levels);
  const auto coarse2 = l.kind == ModelKind::unipi ? detail::coarse_levels(*second, l.levels)
                                                  : std::vector<detail::PooledImage>{};
  for (std::size_t k = 0; k < pixels.size(); ++k) {
    double* out = x.data() + (first_col + static_cast<Eigen::Index>(k)) * x.rows();
    const Pixel& p = pixels[k];
    out = detail::write_coords(l, p, out);
    out = detail::write_patch(img, p, l.patch, out);
    for (const auto& level : coarse) out = detail::write_pooled_patch(level, p, l.patch, out);
    if (l.kind == ModelKind::unipi) {
      out = detail::write_patch(*second, p, l.patch, out);
      for (const auto& level : coarse2) out = detail::write_pooled_patch(level, p, l.patch, out);
    }
    if (l.kind == ModelKind::dflow) {
      const bool ok = flow->valid(p.row, p.col) != 0;
      *out++ = ok ? flow->vectors(p.row, p.col, 0) / l.flow_scale : 0.0;
      *out++ = ok ? flow->vectors(p.row, p.col, 1) / l.flow_scale : 0.0;
    }
  }
}

// ---------------------------------------------------------------------------
// Models

class PatchFieldModel {
 public:
  PatchFieldModel() = default;
  explicit PatchFieldModel(ModelLayout layout) : layout_(layout) {
    if (layout_.kind != ModelKind::jidm) throw std::invalid_argument("PatchFieldModel needs a jidm layout");
    layout_.validate();
    encoder_ = nn::Mlp(layout_.encoder_sizes(), 0, nn::Output::tanh);
    head_ = nn::Mlp(layout_.head_sizes(), encoder_.param_end());
    params = VecX::Zero(static_cast<Eigen::Index>(head_.param_end()));
  }

  const ModelLayout& layout() const { return layout_; }
  const nn::Mlp& encoder() const { return encoder_; }
  const nn::Mlp& head() const { return head_; }
  std::size_t param_count() const { return static_cast<std::size_t>(params.size()); }

  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    encoder_.initialize({params.data(), param_count()}, rng);
    head_.initialize({params.data(), param_count()}, rng);
  }

  VecX params;

 private:
  ModelLayout layout_;
  nn::Mlp encoder_;
  nn::Mlp head_;
};

class DirectIDM {
 public:
  DirectIDM() = default;
  explicit DirectIDM(ModelLayout layout) : layout_(layout) {
    if (layout_.kind == ModelKind::jidm) throw std::invalid_argument("DirectIDM needs a unipi or dflow layout");
    layout_.validate();
    encoder_ = nn::Mlp(layout_.encoder_sizes(), 0, nn::Output::tanh);
    head_ = nn::Mlp(layout_.head_sizes(), encoder_.param_end());
    params = VecX::Zero(static_cast<Eigen::Index>(head_.param_end()));
  }

  const ModelLayout& layout() const { return layout_; }
  const nn::Mlp& encoder() const { return encoder_; }
  const nn::Mlp& head() const { return head_; }
  std::size_t param_count() const { return static_cast<std::size_t>(params.size()); }

  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    encoder_.initialize({params.data(), param_count()}, rng);
    head_.initialize({params.data(), param_count()}, rng);
  }

  VecX params;

 private:
  ModelLayout layout_;
  nn::Mlp encoder_;
  nn::Mlp head_;
};

using AnyModel = std::variant<PatchFieldModel, DirectIDM>;

inline const ModelLayout& layout_of(const AnyModel& m) {
  return std::visit([](const auto& x) -> const ModelLayout& { return x.layout(); }, m);
}

// ---------------------------------------------------------------------------
// Field evaluation

namespace detail {

inline VecX context_vector(const PatchFieldModel& model, const Image& img) {
  const ModelLayout& l = model.layout();
  const std::vector<Pixel> ctx = context_pixels(l, img);
  VecX c = VecX::Zero(l.hidden2);
  if (ctx.empty()) return c;
  nn::Matrix x(l.input_size(), static_cast<Eigen::Index>(ctx.size()));
  write_features(l, img, nullptr, nullptr, ctx, x, 0);
  const auto tape = model.encoder().forward({model.params.data(), model.param_count()}, std::move(x));
  const nn::Matrix& e = tape.output();
  for (Eigen::Index j = 0; j < e.cols(); ++j) c += e.col(j);
  return c / static_cast<double>(ctx.size());
}

inline Mat2X unpack_jacobian(const double* out, int n, double scale) {
  Mat2X jac(2, n);
  for (int r = 0; r < 2; ++r)
    for (int j = 0; j < n; ++j) jac(r, j) = scale * out[r * n + j];
  return jac;
}

}  // namespace detail

/// Per-pixel 2 x n matrices (pixels per radian) of the model on `image`.
/// Each pixel's result is independent of which other pixels are queried.
inline JacobianField evaluate_field(const PatchFieldModel& model, const Image& image, const std::vector<Pixel>& pixels) {
  const ModelLayout& l = model.layout();
  detail::check_image(l, image);
  for (const Pixel& p : pixels)
    if (!image.contains(p.row, p.col)) throw std::out_of_range("query pixel outside the image");
  JacobianField field;
  field.n = l.n_joints;
  field.pixels = pixels;
  field.matrices.reserve(pixels.size());
  if (pixels.empty()) return field;

  const VecX ctx = detail::context_vector(model, image);
  const std::span<const double> params{model.params.data(), model.param_count()};
  constexpr std::size_t kChunk = 256;
  for (std::size_t begin = 0; begin < pixels.size(); begin += kChunk) {
    const std::size_t end = std::min(pixels.size(), begin + kChunk);
    const std::vector<Pixel> part(pixels.begin() + static_cast<std::ptrdiff_t>(begin),
                                  pixels.begin() + static_cast<std::ptrdiff_t>(end));
    nn::Matrix x(l.input_size(), static_cast<Eigen::Index>(part.size()));
    write_features(l, image, nullptr, nullptr, part, x, 0);
    const auto enc = model.encoder().forward(params, std::move(x));
    nn::Matrix z(2 * l.hidden2, enc.output().cols());
    z.topRows(l.hidden2) = enc.output();
    z.bottomRows(l.hidden2).colwise() = ctx;
    const auto head = model.head().forward(params, std::move(z));
    const nn::Matrix& out = head.output();
    for (Eigen::Index j = 0; j < out.cols(); ++j)
      field.matrices.push_back(detail::unpack_jacobian(out.data() + j * out.rows(), l.n_joints, l.jac_scale));
  }
  return field;
}

/// Action predicted by a direct baseline.
inline VecX predict_direct(const DirectIDM& model, const Image& o_t, const Image* o_next, const FlowField* flow) {
  const ModelLayout& l = model.layout();
  detail::check_image(l, o_t);
  if (l.kind == ModelKind::unipi && !o_next) throw std::invalid_argument("image_pair baseline needs o_next");
  if (l.kind == ModelKind::dflow && !flow) throw std::invalid_argument("image_flow baseline needs flow");
  const std::vector<Pixel> ctx = context_pixels(l, o_t, l.kind == ModelKind::unipi ? o_next : nullptr);
  VecX pooled = VecX::Zero(l.hidden2);
  const std::span<const double> params{model.params.data(), model.param_count()};
  if (!ctx.empty()) {
    nn::Matrix x(l.input_size(), static_cast<Eigen::Index>(ctx.size()));
    write_features(l, o_t, o_next, flow, ctx, x, 0);
    const auto tape = model.encoder().forward(params, std::move(x));
    pooled = tape.output().rowwise().sum() / static_cast<double>(ctx.size());
  }
  nn::Matrix z = pooled;
  const auto head = model.head().forward(params, std::move(z));
  return l.action_scale * head.output().col(0);
}

// ---------------------------------------------------------------------------
// Losses

struct JidmLossConfig {
  double w_a = 0.3;
  double charbonnier_eps = 1e-3;
  double lambda = 1e-4;
};

/// One record's contribution to a J-IDM batch: supervised pixels of o_t and
/// their flow targets (zero for sampled background pixels).
struct FieldSample {
  const Image* image = nullptr;
  VecX delta_a;
  std::vector<Pixel> pixels;
  std::vector<Vec2> targets;
};

struct LossResult {
  double loss = 0.0;
  VecX grad;
  double forward_term = 0.0;
  double inverse_term = 0.0;
};

namespace detail {

/// Per-pixel joint loss and its gradient with respect to the 2 x n Jacobian.
struct PixelLoss {
  double forward = 0.0;
  double inverse = 0.0;
  Mat2X d_forward;
  Mat2X d_inverse;
};

inline PixelLoss pixel_loss(const Mat2X& jac, const VecX& da, const Vec2& v, const JidmLossConfig& cfg) {
  PixelLoss out;
  const Vec2 e = jac * da - v;
  const double rho = std::sqrt(e.squaredNorm() + cfg.charbonnier_eps * cfg.charbonnier_eps);
  out.forward = rho;
  out.d_forward = (e / rho) * da.transpose();

  // r = da - J^T A^{-1} v with A = J J^T + lambda I
  const Eigen::Matrix2d a = jac * jac.transpose() + cfg.lambda * Eigen::Matrix2d::Identity();
  const Eigen::Matrix2d a_inv = a.inverse();
  const Vec2 w = a_inv * v;
  const VecX r = da - jac.transpose() * w;
  out.inverse = r.squaredNorm();
  const Vec2 s = a_inv * (jac * r);
  out.d_inverse = -2.0 * w * r.transpose() + 2.0 * s * (jac.transpose() * w).transpose() +
                  2.0 * w * (jac.transpose() * s).transpose();
  return out;
}

}  // namespace detail

/// Mean over supervised pixels of rho(|J da - v|) + w_a |da - J^{+,lambda} v|^2
/// with its exact parameter gradient.
inline LossResult loss_jidm(const PatchFieldModel& model, const std::vector<FieldSample>& batch,
                            const JidmLossConfig& cfg) {
  const ModelLayout& l = model.layout();
  const std::span<const double> params{model.params.data(), model.param_count()};
  const int n = l.n_joints;

  std::vector<std::vector<Pixel>> ctx(batch.size());
  Eigen::Index total_cols = 0, total_queries = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    detail::check_image(l, *batch[b].image);
    if (batch[b].pixels.size() != batch[b].targets.size()) throw std::invalid_argument("pixels and targets disagree");
    ctx[b] = context_pixels(l, *batch[b].image);
    total_cols += static_cast<Eigen::Index>(batch[b].pixels.size() + ctx[b].size());
    total_queries += static_cast<Eigen::Index>(batch[b].pixels.size());
  }
  LossResult res;
  res.grad = VecX::Zero(static_cast<Eigen::Index>(model.param_count()));
  if (total_queries == 0) return res;

  nn::Matrix x(l.input_size(), total_cols);
  std::vector<Eigen::Index> query_col(batch.size()), ctx_col(batch.size());
  {
    Eigen::Index col = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      query_col[b] = col;
      write_features(l, *batch[b].image, nullptr, nullptr, batch[b].pixels, x, col);
      col += static_cast<Eigen::Index>(batch[b].pixels.size());
      ctx_col[b] = col;
      write_features(l, *batch[b].image, nullptr, nullptr, ctx[b], x, col);
      col += static_cast<Eigen::Index>(ctx[b].size());
    }
  }
  const auto enc = model.encoder().forward(params, std::move(x));
  const nn::Matrix& e = enc.output();

  nn::Matrix z(2 * l.hidden2, total_queries);
  std::vector<VecX> ctx_vec(batch.size());
  {
    Eigen::Index q = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      ctx_vec[b] = VecX::Zero(l.hidden2);
      for (std::size_t k = 0; k < ctx[b].size(); ++k) ctx_vec[b] += e.col(ctx_col[b] + static_cast<Eigen::Index>(k));
      if (!ctx[b].empty()) ctx_vec[b] /= static_cast<double>(ctx[b].size());
      for (std::size_t k = 0; k < batch[b].pixels.size(); ++k, ++q) {
        z.col(q).head(l.hidden2) = e.col(query_col[b] + static_cast<Eigen::Index>(k));
        z.col(q).tail(l.hidden2) = ctx_vec[b];
      }
    }
  }
  const auto head = model.head().forward(params, std::move(z));
  const nn::Matrix& out = head.output();

  const double inv_count = 1.0 / static_cast<double>(total_queries);
  nn::Matrix d_out(2 * n, total_queries);
  {
    Eigen::Index q = 0;
    for (const FieldSample& s : batch) {
      for (std::size_t k = 0; k < s.pixels.size(); ++k, ++q) {
        const Mat2X jac = detail::unpack_jacobian(out.data() + q * out.rows(), n, l.jac_scale);
        const detail::PixelLoss pl = detail::pixel_loss(jac, s.delta_a, s.targets[k], cfg);
        res.forward_term += pl.forward;
        res.inverse_term += pl.inverse;
        const Mat2X d = (pl.d_forward + cfg.w_a * pl.d_inverse) * (inv_count * l.jac_scale);
        for (int r = 0; r < 2; ++r)
          for (int j = 0; j < n; ++j) d_out(r * n + j, q) = d(r, j);
      }
    }
  }
  res.forward_term *= inv_count;
  res.inverse_term *= inv_count;
  res.loss = res.forward_term + cfg.w_a * res.inverse_term;

  std::span<double> grad{res.grad.data(), model.param_count()};
  const nn::Matrix dz = model.head().backward(params, head, std::move(d_out), grad);
  nn::Matrix de = nn::Matrix::Zero(l.hidden2, total_cols);
  {
    Eigen::Index q = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      VecX d_ctx = VecX::Zero(l.hidden2);
      for (std::size_t k = 0; k < batch[b].pixels.size(); ++k, ++q) {
        de.col(query_col[b] + static_cast<Eigen::Index>(k)) = dz.col(q).head(l.hidden2);
        d_ctx += dz.col(q).tail(l.hidden2);
      }
      if (ctx[b].empty()) continue;
      d_ctx /= static_cast<double>(ctx[b].size());
      for (std::size_t k = 0; k < ctx[b].size(); ++k) de.col(ctx_col[b] + static_cast<Eigen::Index>(k)) = d_ctx;
    }
  }
  model.encoder().backward(params, enc, std::move(de), grad);
  return res;
}

struct DirectSample {
  const Image* o_t = nullptr;
  const Image* o_next = nullptr;
  const FlowField* flow = nullptr;
  VecX delta_a;
};

/// Mean squared action error over records and coordinates, with exact gradient.
inline LossResult loss_direct(const DirectIDM& model, const std::vector<DirectSample>& batch) {
  const ModelLayout& l = model.layout();
  const std::span<const double> params{model.params.data(), model.param_count()};
  const int n = l.n_joints;
  const bool pair = l.kind == ModelKind::unipi;

  std::vector<std::vector<Pixel>> ctx(batch.size());
  std::vector<Eigen::Index> first(batch.size());
  Eigen::Index total = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    detail::check_image(l, *batch[b].o_t);
    ctx[b] = context_pixels(l, *batch[b].o_t, pair ? batch[b].o_next : nullptr);
    first[b] = total;
    total += static_cast<Eigen::Index>(ctx[b].size());
  }
  LossResult res;
  res.grad = VecX::Zero(static_cast<Eigen::Index>(model.param_count()));
  if (batch.empty()) return res;

  nn::Matrix x(l.input_size(), total);
  for (std::size_t b = 0; b < batch.size(); ++b)
    write_features(l, *batch[b].o_t, batch[b].o_next, batch[b].flow, ctx[b], x, first[b]);
  const auto enc = model.encoder().forward(params, std::move(x));
  const nn::Matrix& e = enc.output();

  nn::Matrix pooled = nn::Matrix::Zero(l.hidden2, static_cast<Eigen::Index>(batch.size()));
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (ctx[b].empty()) continue;
    pooled.col(static_cast<Eigen::Index>(b)) =
        e.middleCols(first[b], static_cast<Eigen::Index>(ctx[b].size())).rowwise().sum() /
        static_cast<double>(ctx[b].size());
  }
  const auto head = model.head().forward(params, std::move(pooled));
  const nn::Matrix& out = head.output();

  const double norm = 1.0 / static_cast<double>(batch.size() * static_cast<std::size_t>(n));
  nn::Matrix d_out(n, static_cast<Eigen::Index>(batch.size()));
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto bi = static_cast<Eigen::Index>(b);
    const VecX err = l.action_scale * out.col(bi) - batch[b].delta_a;
    res.loss += err.squaredNorm() * norm;
    d_out.col(bi) = 2.0 * norm * l.action_scale * err;
  }
  res.forward_term = res.loss;

  std::span<double> grad{res.grad.data(), model.param_count()};
  const nn::Matrix dp = model.head().backward(params, head, std::move(d_out), grad);
  nn::Matrix de(l.hidden2, total);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto cnt = static_cast<Eigen::Index>(ctx[b].size());
    if (cnt == 0) continue;
    de.middleCols(first[b], cnt).colwise() = dp.col(static_cast<Eigen::Index>(b)) / static_cast<double>(cnt);
  }
  if (total > 0) model.encoder().backward(params, enc, std::move(de), grad);
  return res;
}

// ---------------------------------------------------------------------------
// Training

/// Ridge weights in configs are given in normalized units: pixels divided by
/// the longer frame side, actions divided by delta_max. Multiply by this to get
/// the weight in raw pixel/radian units used by the solvers.
inline double ridge_unit(const CameraModel& cam, double delta_max) {
  const double s = static_cast<double>(std::max(cam.height, cam.width)) / delta_max;
  return s * s;
}

struct TrainConfig {
  double w_a = 0.3;
  double charbonnier_eps = 1e-3;
  double lambda_train = 1e-4;  // normalized, see ridge_unit
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Learning rate at the last step as a fraction of learning_rate (cosine
  /// schedule); 1 keeps it constant.
  double final_lr_fraction = 1.0;
  int steps = 2000;
  int records_per_step = 16;
  int pixels_per_record = 512;
  double foreground_fraction = 0.5;
  /// Supervise every flow-valid and background pixel instead of sampling.
  bool dense_pixels = false;
  bool exclude_occluded = false;
  std::uint64_t seed = 0;
  int log_every = 50;

  void validate() const {
    if (w_a < 0.0) throw std::invalid_argument("w_a must be >= 0");
    if (!(charbonnier_eps > 0.0)) throw std::invalid_argument("charbonnier eps must be > 0");
    if (!(lambda_train > 0.0)) throw std::invalid_argument("training lambda must be > 0");
    if (steps < 0) throw std::invalid_argument("steps must be >= 0");
    if (records_per_step < 1 || pixels_per_record < 1) throw std::invalid_argument("batch sizes must be >= 1");
    if (foreground_fraction < 0.0 || foreground_fraction > 1.0)
      throw std::invalid_argument("foreground fraction must lie in [0,1]");
  }
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(int step, double param_norm)
      : std::runtime_error("non-finite loss at step " + std::to_string(step) + " (parameter norm " +
                           format_double(param_norm) + ")"),
        step(step),
        param_norm(param_norm) {}
  int step;
  double param_norm;
};

struct LossPoint {
  int step = 0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<LossPoint> loss_curve;
  double seconds = 0.0;
};

namespace detail {

class RecordSampler {
 public:
  RecordSampler(std::size_t n, std::mt19937_64& rng) : order_(n), rng_(rng) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    pos_ = n;
  }
  std::size_t next() {
    if (pos_ >= order_.size()) {
      for (std::size_t i = order_.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(order_[i - 1], order_[pick(rng_)]);
      }
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64& rng_;
  std::size_t pos_;
};

inline FieldSample make_field_sample(const TransitionRecord& r, const TrainConfig& cfg, double background,
                                     std::mt19937_64& rng) {
  FieldSample s;
  s.image = &r.o_t;
  s.delta_a = r.delta_a.delta_a;
  std::vector<Pixel> fg, bg;
  for (int row = 0; row < r.flow.height(); ++row) {
    for (int col = 0; col < r.flow.width(); ++col) {
      if (r.flow.valid(row, col)) {
        if (cfg.exclude_occluded && r.flow.occluded(row, col)) continue;
        fg.push_back({row, col});
      } else if (!pixel_active(r.o_t, row, col, background)) {
        bg.push_back({row, col});
      }
    }
  }
  auto add = [&](const Pixel& p, bool foreground) {
    s.pixels.push_back(p);
    s.targets.push_back(foreground ? r.flow.at(p.row, p.col) : Vec2::Zero());
  };
  if (cfg.dense_pixels) {
    for (const auto& p : fg) add(p, true);
    for (const auto& p : bg) add(p, false);
    return s;
  }
  int n_fg = static_cast<int>(std::lround(cfg.foreground_fraction * cfg.pixels_per_record));
  if (fg.empty()) n_fg = 0;
  const int n_bg = bg.empty() ? 0 : cfg.pixels_per_record - n_fg;
  if (!fg.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, fg.size() - 1);
    for (int k = 0; k < n_fg; ++k) add(fg[pick(rng)], true);
  }
  if (!bg.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, bg.size() - 1);
    for (int k = 0; k < n_bg; ++k) add(bg[pick(rng)], false);
  }
  return s;
}

template <typename Model, typename LossFn>
TrainResult adam_loop(Model& model, const TrainConfig& cfg, LossFn&& loss_fn) {
  const auto t0 = std::chrono::steady_clock::now();
  nn::Adam adam(model.param_count(),
                nn::AdamConfig{cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps});
  TrainResult result;
  double window = 0.0;
  int window_n = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    LossResult lr = loss_fn(step);
    if (!std::isfinite(lr.loss) || !lr.grad.allFinite()) throw TrainingDiverged(step, model.params.norm());
    if (cfg.final_lr_fraction != 1.0 && cfg.steps > 1) {
      const double t = static_cast<double>(step) / static_cast<double>(cfg.steps - 1);
      const double f = cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + std::cos(M_PI * t));
      adam.set_learning_rate(cfg.learning_rate * f);
    }
    adam.step(model.params, lr.grad);
    window += lr.loss;
    ++window_n;
    if (cfg.log_every > 0 && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      result.loss_curve.push_back({step + 1, window / window_n});
      window = 0.0;
      window_n = 0;
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace detail

inline TrainResult train(PatchFieldModel& model, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.records.empty()) throw std::invalid_argument("training dataset is empty");
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  detail::RecordSampler sampler(data.size(), rng);
  const JidmLossConfig lc{cfg.w_a, cfg.charbonnier_eps,
                          cfg.lambda_train * ridge_unit(data.manifest.camera, data.manifest.delta_max)};
  const double bg = model.layout().background;
  return detail::adam_loop(model, cfg, [&](int) {
    std::vector<FieldSample> batch;
    batch.reserve(static_cast<std::size_t>(cfg.records_per_step));
    for (int b = 0; b < cfg.records_per_step; ++b)
      batch.push_back(detail::make_field_sample(data.records[sampler.next()], cfg, bg, rng));
    return loss_jidm(model, batch, lc);
  });
}

inline TrainResult train(DirectIDM& model, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.records.empty()) throw std::invalid_argument("training dataset is empty");
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  detail::RecordSampler sampler(data.size(), rng);
  return detail::adam_loop(model, cfg, [&](int) {
    std::vector<DirectSample> batch;
    batch.reserve(static_cast<std::size_t>(cfg.records_per_step));
    for (int b = 0; b < cfg.records_per_step; ++b) {
      const TransitionRecord& r = data.records[sampler.next()];
      batch.push_back({&r.o_t, &r.o_next, &r.flow, r.delta_a.delta_a});
    }
    return loss_direct(model, batch);
  });
}

inline TrainResult train(AnyModel& model, const Dataset& data, const TrainConfig& cfg) {
  return std::visit([&](auto& m) { return train(m, data, cfg); }, model);
}

/// Fresh model of the requested kind, sized and scaled for `manifest`;
/// baselines are matched in parameter count to the J-IDM layout.
inline AnyModel make_model(ModelKind kind, const ModelLayout& jidm_layout, std::uint64_t seed) {
  if (kind == ModelKind::jidm) {
    PatchFieldModel m(jidm_layout);
    m.initialize(seed);
    return m;
  }
  DirectIDM m(matched_direct_layout(jidm_layout, kind));
  m.initialize(seed);
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double action_mse = 0.0;  // per-coordinate, actions in units of delta_max
  double flow_epe = std::numeric_limits<double>::quiet_NaN();
  std::size_t records = 0;
};

using ActionPredictor = std::function<VecX(const TransitionRecord&)>;

/// Mean over records of the per-coordinate squared error of clamped
/// predictions, with actions normalized by delta_max.
inline double action_mse(const Dataset& data, const ActionPredictor& predict) {
  const double dmax = data.manifest.delta_max;
  double total = 0.0;
  for (const auto& r : data.records) {
    const VecX pred = predict(r).cwiseMax(-dmax).cwiseMin(dmax);
    total += ((pred - r.delta_a.delta_a) / dmax).squaredNorm() / static_cast<double>(pred.size());
  }
  return data.records.empty() ? 0.0 : total / static_cast<double>(data.records.size());
}

inline ActionPredictor jidm_predictor(const PatchFieldModel& model, const RidgeParams& params) {
  return [&model, params](const TransitionRecord& r) {
    const auto px = valid_pixels(r.flow);
    return aggregate_invert(evaluate_field(model, r.o_t, px), r.flow, params).action.delta_a;
  };
}

inline ActionPredictor direct_predictor(const DirectIDM& model) {
  return [&model](const TransitionRecord& r) { return predict_direct(model, r.o_t, &r.o_next, &r.flow); };
}

/// Analytic-field predictor; uses the diagnostic state stored in each record.
inline ActionPredictor oracle_predictor(const DatasetManifest& m, const RidgeParams& params) {
  return [&m, params](const TransitionRecord& r) {
    const auto px = valid_pixels(r.flow);
    return aggregate_invert(analytic_field_at(m.chain, m.camera, ChainState{r.state_q}, px), r.flow, params)
        .action.delta_a;
  };
}

/// Mean end-point error of J(p) da against the stored flow over valid pixels.
inline double flow_epe(const PatchFieldModel& model, const Dataset& data) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& r : data.records) {
    const auto px = valid_pixels(r.flow);
    const JacobianField f = evaluate_field(model, r.o_t, px);
    for (std::size_t k = 0; k < px.size(); ++k) {
      total += (f.matrices[k] * r.delta_a.delta_a - r.flow.at(px[k].row, px[k].col)).norm();
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

/// `lambda_inf` is in normalized units (see ridge_unit).
inline EvalResult eval_action_mse(const AnyModel& model, const Dataset& data, double lambda_inf) {
  EvalResult res;
  res.records = data.size();
  if (const auto* f = std::get_if<PatchFieldModel>(&model)) {
    const double raw = lambda_inf * ridge_unit(data.manifest.camera, data.manifest.delta_max);
    res.action_mse = action_mse(data, jidm_predictor(*f, RidgeParams{raw, true, false}));
    res.flow_epe = flow_epe(*f, data);
  } else {
    res.action_mse = action_mse(data, direct_predictor(std::get<DirectIDM>(model)));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints: "JPRM" | version u32 | kind u32 | layout descriptor | f64 params

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const AnyModel& model, const std::string& path) {
  const ModelLayout& l = layout_of(model);
  const VecX& params = std::visit([](const auto& m) -> const VecX& { return m.params; }, model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  io::put_magic(out, "JPRM");
  io::put<std::uint32_t>(out, kCheckpointVersion);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.kind));
  const std::int64_t ints[] = {l.n_joints, l.channels, l.patch, l.hidden1, l.hidden2,
                               l.head_hidden, l.ctx_stride, l.height, l.width, l.levels};
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(std::size(ints)));
  for (auto v : ints) io::put<std::int64_t>(out, v);
  const double reals[] = {l.background, l.jac_scale, l.action_scale, l.flow_scale};
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(std::size(reals)));
  for (auto v : reals) io::put<double>(out, v);
  io::put<std::uint64_t>(out, static_cast<std::uint64_t>(params.size()));
  for (Eigen::Index i = 0; i < params.size(); ++i) io::put<double>(out, params[i]);
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline AnyModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  io::expect_magic(in, "JPRM");
  const auto version = io::get<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  ModelLayout l;
  const auto kind = io::get<std::uint32_t>(in);
  if (kind < 1 || kind > 3) throw std::runtime_error("unknown model kind tag " + std::to_string(kind));
  l.kind = static_cast<ModelKind>(kind);
  const auto n_ints = io::get<std::uint32_t>(in);
  if (n_ints != 10) throw std::runtime_error("unexpected checkpoint layout descriptor");
  std::int64_t ints[10];
  for (auto& v : ints) v = io::get<std::int64_t>(in);
  l.n_joints = static_cast<int>(ints[0]);
  l.channels = static_cast<int>(ints[1]);
  l.patch = static_cast<int>(ints[2]);
  l.hidden1 = static_cast<int>(ints[3]);
  l.hidden2 = static_cast<int>(ints[4]);
  l.head_hidden = static_cast<int>(ints[5]);
  l.ctx_stride = static_cast<int>(ints[6]);
  l.height = static_cast<int>(ints[7]);
  l.width = static_cast<int>(ints[8]);
  l.levels = static_cast<int>(ints[9]);
  const auto n_reals = io::get<std::uint32_t>(in);
  if (n_reals != 4) throw std::runtime_error("unexpected checkpoint layout descriptor");
  l.background = io::get<double>(in);
  l.jac_scale = io::get<double>(in);
  l.action_scale = io::get<double>(in);
  l.flow_scale = io::get<double>(in);
  const auto count = io::get<std::uint64_t>(in);
  if (count != l.param_count()) throw std::runtime_error("checkpoint parameter count disagrees with its layout");
  AnyModel model = l.kind == ModelKind::jidm ? AnyModel(PatchFieldModel(l)) : AnyModel(DirectIDM(l));
  std::visit(
      [&](auto& m) {
        for (Eigen::Index i = 0; i < m.params.size(); ++i) m.params[i] = io::get<double>(in);
      },
      model);
  return model;
}

}  // namespace jidm
