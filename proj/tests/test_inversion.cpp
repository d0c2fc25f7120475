#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "jidm/inversion.hpp"
#include "jidm/render.hpp"

using namespace jidm;

namespace {

Mat2X random_jacobian(std::mt19937_64& rng, int n, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Mat2X j(2, n);
  for (int k = 0; k < j.size(); ++k) j.data()[k] = g(rng);
  return j;
}

struct Instance {
  JacobianField field;
  FlowField flow;
};

Instance random_instance(std::mt19937_64& rng, int n, int h, int w, double fill, const VecX* truth) {
  Instance inst{{}, FlowField(h, w)};
  inst.field.n = n;
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> g(0, 1);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (u(rng) > fill) continue;
      const Mat2X j = random_jacobian(rng, n, 5.0);
      inst.field.add({r, c}, j);
      inst.flow.valid(r, c) = 1;
      inst.flow.set(r, c, truth ? Vec2(j * *truth) : Vec2(g(rng), g(rng)));
    }
  return inst;
}

double rel(const VecX& a, const VecX& b) { return (a - b).norm() / std::max(1e-300, b.norm()); }

}  // namespace

TEST(RidgePinv, IdentityAtZeroLambda) {
  const MatX2 p = ridge_pinv(Mat2X::Identity(2, 2), 0.0);
  EXPECT_LT((p - Eigen::Matrix2d::Identity()).norm(), 1e-15);
}

TEST(RidgePinv, PushThroughIdentity) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + trial % 12;
    const Mat2X j = random_jacobian(rng, n);
    const double lambda = 1e-3;
    const Eigen::MatrixXd gram = j.transpose() * j + lambda * Eigen::MatrixXd::Identity(n, n);
    const MatX2 left = gram.ldlt().solve(Eigen::MatrixXd(j.transpose()));
    EXPECT_LT((ridge_pinv(j, lambda) - left).cwiseAbs().maxCoeff(), 1e-10) << "n=" << n;
  }
}

TEST(RidgePinv, ShrinksWithLambda) {
  std::mt19937_64 rng(2);
  const Mat2X j = random_jacobian(rng, 5);
  const Vec2 v(0.7, -1.3);
  double prev = std::numeric_limits<double>::infinity();
  for (double lambda : {1e-8, 1e-4, 1e-2, 1e-1, 1.0, 10.0, 100.0}) {
    const double now = (ridge_pinv(j, lambda) * v).norm();
    EXPECT_LE(now, prev + 1e-12);
    prev = now;
  }
}

TEST(RidgePinv, SingularAtZeroLambdaThrows) {
  Mat2X j = Mat2X::Zero(2, 3);
  j(0, 0) = 1.0;  // rank one
  EXPECT_THROW(ridge_pinv(j, 0.0), std::domain_error);
  EXPECT_NO_THROW(ridge_pinv(j, 1e-3));
}

TEST(AggregateInvert, ZeroFlowGivesZeroAction) {
  std::mt19937_64 rng(3);
  auto inst = random_instance(rng, 4, 10, 10, 0.5, nullptr);
  for (auto& v : inst.flow.vectors.data) v = 0.0;
  const auto res = aggregate_invert(inst.field, inst.flow, {1e-3, true, false});
  EXPECT_EQ(res.action.delta_a.norm(), 0.0);
}

TEST(AggregateInvert, ConsistentSystemRecovery) {
  std::mt19937_64 rng(4);
  for (int n : {2, 5, 9}) {
    const VecX truth = VecX::Random(n) * 0.12;
    const auto inst = random_instance(rng, n, 12, 12, 0.4, &truth);
    const auto res = aggregate_invert(inst.field, inst.flow, {1e-10, true, false});
    EXPECT_LT(rel(res.action.delta_a, truth), 1e-8);
    EXPECT_FALSE(res.ill_conditioned);
    EXPECT_LT(res.residual_ratio, 1e-6);
  }
}

TEST(AggregateInvert, MatchesStackedBruteForce) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 2 + trial;
    const auto inst = random_instance(rng, n, 9, 9, 0.6, nullptr);
    const double lambda = 1e-3;
    // [A; sqrt(lambda) I] x = [b; 0] solved by Householder QR
    const auto m = static_cast<Eigen::Index>(inst.field.size());
    Eigen::MatrixXd a(2 * m + n, n);
    VecX b = VecX::Zero(2 * m + n);
    for (Eigen::Index k = 0; k < m; ++k) {
      const Pixel p = inst.field.pixels[static_cast<std::size_t>(k)];
      a.middleRows(2 * k, 2) = inst.field.matrices[static_cast<std::size_t>(k)];
      b.segment(2 * k, 2) = inst.flow.at(p.row, p.col);
    }
    a.bottomRows(n) = std::sqrt(lambda) * Eigen::MatrixXd::Identity(n, n);
    const VecX oracle = a.householderQr().solve(b);
    const auto res = aggregate_invert(inst.field, inst.flow, {lambda, true, false});
    EXPECT_LT(rel(res.action.delta_a, oracle), 1e-8) << "trial " << trial;
  }
}

TEST(AggregateInvert, PermutationInvariantBitwise) {
  std::mt19937_64 rng(6);
  const auto inst = random_instance(rng, 6, 16, 16, 0.7, nullptr);
  const auto base = aggregate_invert(inst.field, inst.flow, {1e-3, true, false});
  std::vector<std::size_t> idx(inst.field.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(idx.begin(), idx.end(), rng);
    JacobianField shuffled;
    shuffled.n = 6;
    for (auto k : idx) shuffled.add(inst.field.pixels[k], inst.field.matrices[k]);
    const auto res = aggregate_invert(shuffled, inst.flow, {1e-3, true, false});
    for (int j = 0; j < 6; ++j) EXPECT_EQ(res.action.delta_a[j], base.action.delta_a[j]);
  }
}

TEST(AggregateInvert, ObjectiveIsMinimal) {
  std::mt19937_64 rng(7);
  const auto inst = random_instance(rng, 5, 10, 10, 0.5, nullptr);
  const double lambda = 1e-3;
  auto objective = [&](const VecX& d) {
    double s = lambda * d.squaredNorm();
    for (std::size_t k = 0; k < inst.field.size(); ++k) {
      const Pixel p = inst.field.pixels[k];
      s += (inst.field.matrices[k] * d - inst.flow.at(p.row, p.col)).squaredNorm();
    }
    return s;
  };
  const VecX best = aggregate_invert(inst.field, inst.flow, {lambda, true, false}).action.delta_a;
  const double f0 = objective(best);
  for (int k = 0; k < 50; ++k) {
    VecX dir = VecX::Random(5);
    dir *= 1e-4 / dir.norm();
    EXPECT_GE(objective(best + dir), f0);
  }
}

TEST(AggregateInvert, LinearInFlow) {
  std::mt19937_64 rng(8);
  auto inst = random_instance(rng, 4, 8, 8, 0.5, nullptr);
  const VecX a = aggregate_invert(inst.field, inst.flow, {1e-3, true, false}).action.delta_a;
  for (auto& v : inst.flow.vectors.data) v *= -2.5;
  const VecX b = aggregate_invert(inst.field, inst.flow, {1e-3, true, false}).action.delta_a;
  EXPECT_LT((b + 2.5 * a).norm(), 1e-12 * (1.0 + a.norm()));
}

TEST(AggregateInvert, MaskAndOcclusionFiltering) {
  std::mt19937_64 rng(9);
  auto inst = random_instance(rng, 3, 8, 8, 1.0, nullptr);
  const auto all = aggregate_invert(inst.field, inst.flow, {1e-3, true, false});
  inst.flow.occluded(0, 0) = 1;
  const auto excl = aggregate_invert(inst.field, inst.flow, {1e-3, true, true});
  EXPECT_EQ(excl.pixels_used + 1, all.pixels_used);
  inst.flow.valid(1, 1) = 0;
  EXPECT_EQ(aggregate_invert(inst.field, inst.flow, {1e-3, true, false}).pixels_used + 1, all.pixels_used);
  EXPECT_EQ(aggregate_invert(inst.field, inst.flow, {1e-3, false, false}).pixels_used, all.pixels_used);
}

TEST(AggregateInvert, NonFiniteInputThrows) {
  std::mt19937_64 rng(10);
  auto inst = random_instance(rng, 3, 6, 6, 1.0, nullptr);
  inst.flow.vectors(2, 2, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(aggregate_invert(inst.field, inst.flow, {}), std::domain_error);
}

TEST(AggregateInvert, InvisibleJointShrinksWithLambda) {
  // joint 2 never moves any observed pixel: its column is zero everywhere
  std::mt19937_64 rng(11);
  auto inst = random_instance(rng, 3, 10, 10, 0.5, nullptr);
  for (auto& m : inst.field.matrices) m.col(2).setZero();
  const auto res = aggregate_invert(inst.field, inst.flow, {1e-3, true, false});
  EXPECT_TRUE(res.ill_conditioned);
  double prev = std::numeric_limits<double>::infinity();
  for (auto& m : inst.field.matrices) m.col(2) = 1e-4 * Vec2(1.0, -1.0);
  for (double lambda : {1e-8, 1e-6, 1e-4, 1e-2, 1.0}) {
    const double now = std::abs(aggregate_invert(inst.field, inst.flow, {lambda, true, false}).action.delta_a[2]);
    EXPECT_LE(now, prev);
    prev = now;
  }
  EXPECT_LT(prev, 1e-3);
}

TEST(TranslateChunk, IdenticalFramesGiveZeroAction) {
  const auto chain = default_chain(3);
  const auto cam = fit_camera(chain, 64, 64);
  const auto style = default_style(3);
  const ChainState s{(VecX(3) << 0.4, -0.3, 0.6).finished()};
  const Frame f{render(chain, cam, style, s), s};
  FieldFn field = [&](const Frame& fr, const std::vector<Pixel>& px) {
    return analytic_field_at(chain, cam, *fr.state, px);
  };
  FlowFn flow = [&](const Frame& a, const Frame& b) { return oracle_flow_between(chain, cam, *a.state, *b.state); };
  const auto out = translate_chunk({f, f}, field, flow, {}, 0.12);
  ASSERT_EQ(out.actions.size(), 1u);
  EXPECT_EQ(out.actions[0].delta_a.norm(), 0.0);
  EXPECT_THROW(translate_chunk({f}, field, flow, {}, 0.12), std::invalid_argument);
}

namespace {

// Rendered trajectory with per-joint steps uniform in [-step, step].
struct Trajectory {
  ChainConfig chain;
  CameraModel camera;
  std::vector<Frame> frames;
  std::vector<VecX> actions;
};

Trajectory make_trajectory(int n, double step, std::uint64_t seed) {
  Trajectory t{default_chain(static_cast<std::size_t>(n)), {}, {}, {}};
  t.camera = fit_camera(t.chain, 128, 128);
  const auto style = default_style(static_cast<std::size_t>(n));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  ChainState s{VecX::Zero(n)};
  for (auto& v : s.q) v = 1.2 * u(rng);
  t.frames.push_back({render(t.chain, t.camera, style, s), s});
  for (int k = 0; k < 4; ++k) {
    VecX da(n);
    for (auto& v : da) v = step * u(rng);
    t.actions.push_back(da);
    s.q += da;
    t.frames.push_back({render(t.chain, t.camera, style, s), s});
  }
  return t;
}

double worst_recovery_error(const Trajectory& t) {
  FieldFn field = [&](const Frame& fr, const std::vector<Pixel>& px) {
    return analytic_field_at(t.chain, t.camera, *fr.state, px);
  };
  FlowFn flow = [&](const Frame& a, const Frame& b) {
    return oracle_flow_between(t.chain, t.camera, *a.state, *b.state);
  };
  const auto out = translate_chunk(t.frames, field, flow, {1e-3, true, false}, 0.12);
  double worst = 0.0;
  for (std::size_t k = 0; k < t.actions.size(); ++k)
    worst = std::max(worst, (out.actions[k].delta_a - t.actions[k]).cwiseAbs().maxCoeff());
  return worst;
}

}  // namespace

TEST(TranslateChunk, RecoversSmallStepTrajectory) {
  for (int n : {2, 3})
    for (std::uint64_t seed : {1u, 2u, 3u}) EXPECT_LT(worst_recovery_error(make_trajectory(n, 0.04, seed)), 5e-3);
}

TEST(TranslateChunk, FullStepErrorIsSecondOrder) {
  // The exact displacement of a rotating point has a radial part quadratic in
  // the step, which a field anchored on the first frame cannot represent.
  EXPECT_LT(worst_recovery_error(make_trajectory(2, 0.12, 4)), 0.02);
  for (int n : {2, 4}) {
    const double full = worst_recovery_error(make_trajectory(n, 0.12, 5));
    const double half = worst_recovery_error(make_trajectory(n, 0.06, 5));
    EXPECT_GT(full / half, 3.0) << "n=" << n;
  }
}
