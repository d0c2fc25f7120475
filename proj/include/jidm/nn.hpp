// Small fully connected networks over a flat parameter vector, with exact
// backpropagation and an Adam optimizer.
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace jidm::nn {

using Matrix = Eigen::MatrixXd;  // column-major; one sample per column
using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using RowMajorMutMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

namespace detail {

constexpr int kRowBlock = 8;
constexpr int kColBlock = 4;
using RowPacket = Eigen::Matrix<double, kRowBlock, 1>;

/// y = W x + b for a block of kColBlock columns and kRowBlock rows. Every
/// output is a sequential sum over k with the same instruction sequence, so
/// a column's result never depends on which other columns share the call.
inline void dense_block(const double* wt, int in, int out_padded, int row0, const double* b, const double* x,
                        double* out) {
  const RowPacket bias = Eigen::Map<const RowPacket>(b + row0);
  RowPacket a0 = bias, a1 = bias, a2 = bias, a3 = bias;
  const double* x0 = x;
  const double* x1 = x + in;
  const double* x2 = x + 2 * static_cast<std::ptrdiff_t>(in);
  const double* x3 = x + 3 * static_cast<std::ptrdiff_t>(in);
  for (int k = 0; k < in; ++k) {
    const Eigen::Map<const RowPacket> w(wt + static_cast<std::size_t>(k) * out_padded + row0);
    a0.noalias() += w * x0[k];
    a1.noalias() += w * x1[k];
    a2.noalias() += w * x2[k];
    a3.noalias() += w * x3[k];
  }
  Eigen::Map<RowPacket> o0(out), o1(out + kRowBlock), o2(out + 2 * kRowBlock), o3(out + 3 * kRowBlock);
  o0 = a0;
  o1 = a1;
  o2 = a2;
  o3 = a3;
}

/// tanh(x) = expm1(2|x|) / (expm1(2|x|) + 2) with sign restored; expm1 by
/// Cody-Waite reduction and a degree-13 Taylor polynomial. Branch-free and
/// within a few ulp of std::tanh.
inline double fast_tanh(double x) {
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  constexpr double kInvLn2 = 1.44269504088896338700e+00;
  const double y = 2.0 * std::min(std::abs(x), 20.0);
  const double k = std::nearbyint(y * kInvLn2);
  const double r = (y - k * kLn2Hi) - k * kLn2Lo;
  double p = 1.0 / 6227020800.0;
  p = p * r + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r * r + r;  // expm1(r)
  const auto bits = static_cast<std::uint64_t>(static_cast<std::int64_t>(k) + 1023) << 52;
  const double two_k = std::bit_cast<double>(bits);
  const double e = two_k * p + (two_k - 1.0);  // expm1(y)
  return std::copysign(e / (e + 2.0), x);
}

}  // namespace detail

struct LayerShape {
  int in = 0;
  int out = 0;
  bool tanh = true;
  bool zero_init = false;
  std::size_t weight_offset = 0;  // out x in, row-major
  std::size_t bias_offset = 0;
};

enum class Output { linear_zero_init, tanh };

/// A stack of dense tanh layers. The last layer is either a zero-initialized
/// linear output or another tanh layer (for feature encoders).
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::vector<int>& sizes, std::size_t param_offset, Output output = Output::linear_zero_init)
      : offset_(param_offset) {
    if (sizes.size() < 2) throw std::invalid_argument("mlp needs at least input and output sizes");
    std::size_t p = param_offset;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
      LayerShape l;
      l.in = sizes[i];
      l.out = sizes[i + 1];
      const bool last = i + 2 == sizes.size();
      l.tanh = !last || output == Output::tanh;
      l.zero_init = last && output == Output::linear_zero_init;
      l.weight_offset = p;
      p += static_cast<std::size_t>(l.in) * l.out;
      l.bias_offset = p;
      p += static_cast<std::size_t>(l.out);
      layers_.push_back(l);
    }
    end_ = p;
  }

  std::size_t param_begin() const { return offset_; }
  std::size_t param_end() const { return end_; }
  std::size_t param_count() const { return end_ - offset_; }
  int input_size() const { return layers_.front().in; }
  int output_size() const { return layers_.back().out; }
  const std::vector<LayerShape>& layers() const { return layers_; }

  /// Activations of every layer; acts[0] is the input.
  struct Tape {
    std::vector<Matrix> acts;
    const Matrix& output() const { return acts.back(); }
  };

  Tape forward(std::span<const double> params, Matrix input) const {
    using detail::kColBlock;
    using detail::kRowBlock;
    Tape tape;
    tape.acts.reserve(layers_.size() + 1);
    tape.acts.push_back(std::move(input));
    std::vector<double> wt, bias, xbuf, acc(kColBlock * kRowBlock);
    for (const LayerShape& l : layers_) {
      const Matrix& x = tape.acts.back();
      if (x.rows() != l.in) throw std::invalid_argument("mlp input has wrong row count");
      const int out_padded = (l.out + kRowBlock - 1) / kRowBlock * kRowBlock;
      wt.assign(static_cast<std::size_t>(l.in) * out_padded, 0.0);
      bias.assign(static_cast<std::size_t>(out_padded), 0.0);
      const double* w = params.data() + l.weight_offset;
      for (int i = 0; i < l.out; ++i) {
        bias[static_cast<std::size_t>(i)] = params[l.bias_offset + static_cast<std::size_t>(i)];
        for (int k = 0; k < l.in; ++k)
          wt[static_cast<std::size_t>(k) * out_padded + i] = w[static_cast<std::size_t>(i) * l.in + k];
      }
      Matrix y(l.out, x.cols());
      xbuf.assign(static_cast<std::size_t>(kColBlock) * l.in, 0.0);
      for (Eigen::Index j0 = 0; j0 < x.cols(); j0 += kColBlock) {
        const int cols = static_cast<int>(std::min<Eigen::Index>(kColBlock, x.cols() - j0));
        std::fill(xbuf.begin(), xbuf.end(), 0.0);
        std::copy(x.data() + j0 * l.in, x.data() + (j0 + cols) * l.in, xbuf.begin());
        for (int row0 = 0; row0 < out_padded; row0 += kRowBlock) {
          detail::dense_block(wt.data(), l.in, out_padded, row0, bias.data(), xbuf.data(), acc.data());
          if (l.tanh)
            for (double& v : acc) v = detail::fast_tanh(v);
          for (int c = 0; c < cols; ++c)
            for (int r = 0; r < kRowBlock && row0 + r < l.out; ++r)
              y(row0 + r, j0 + c) = acc[static_cast<std::size_t>(c * kRowBlock + r)];
        }
      }
      tape.acts.push_back(std::move(y));
    }
    return tape;
  }

  /// Accumulates dLoss/dparams into `grad` and returns dLoss/dinput.
  Matrix backward(std::span<const double> params, const Tape& tape, Matrix d_out, std::span<double> grad) const {
    Matrix delta = std::move(d_out);
    for (std::size_t li = layers_.size(); li-- > 0;) {
      const LayerShape& l = layers_[li];
      const Matrix& y = tape.acts[li + 1];
      const Matrix& x = tape.acts[li];
      if (l.tanh) delta.array() *= (1.0 - y.array().square());
      RowMajorMutMap gw(grad.data() + l.weight_offset, l.out, l.in);
      gw.noalias() += delta * x.transpose();
      Eigen::Map<Eigen::VectorXd> gb(grad.data() + l.bias_offset, l.out);
      gb += delta.rowwise().sum();
      const RowMajorMap w(params.data() + l.weight_offset, l.out, l.in);
      Matrix dx = w.transpose() * delta;
      delta = std::move(dx);
    }
    return delta;
  }

  /// Glorot-uniform weights, zero biases; a linear output layer starts at zero.
  void initialize(std::span<double> params, std::mt19937_64& rng) const {
    for (const LayerShape& l : layers_) {
      const bool last = l.zero_init;
      const double bound = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (std::size_t k = 0; k < static_cast<std::size_t>(l.in) * l.out; ++k)
        params[l.weight_offset + k] = last ? 0.0 : u(rng);
      for (int k = 0; k < l.out; ++k) params[l.bias_offset + static_cast<std::size_t>(k)] = 0.0;
    }
  }

 private:
  std::vector<LayerShape> layers_;
  std::size_t offset_ = 0;
  std::size_t end_ = 0;
};

inline std::size_t mlp_param_count(const std::vector<int>& sizes) {
  std::size_t p = 0;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i)
    p += static_cast<std::size_t>(sizes[i]) * sizes[i + 1] + static_cast<std::size_t>(sizes[i + 1]);
  return p;
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))),
                                        v_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))) {}

  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    ++t_;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
    v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    params.array() -= cfg_.learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.eps);
  }

  long steps() const { return t_; }
  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }

 private:
  AdamConfig cfg_;
  Eigen::VectorXd m_, v_;
  long t_ = 0;
};

}  // namespace jidm::nn
