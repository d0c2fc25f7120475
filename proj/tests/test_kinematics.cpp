#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "jidm/kinematics.hpp"

using namespace jidm;

namespace {

ChainConfig chain_of(std::vector<double> lengths) {
  ChainConfig c;
  c.link_lengths = lengths;
  c.link_radii.assign(lengths.size(), 0.1);
  c.joint_limits.assign(lengths.size(), JointLimit{});
  return c;
}

BodyPoint tip_of(const ChainConfig& c) { return {static_cast<int>(c.n_joints()) - 1, 1.0, 0.0}; }

Mat2X central_difference(const ChainConfig& c, const ChainState& s, const BodyPoint& p, double h) {
  Mat2X out(2, static_cast<Eigen::Index>(c.n_joints()));
  for (Eigen::Index j = 0; j < s.q.size(); ++j) {
    ChainState a = s, b = s;
    a.q[j] += h;
    b.q[j] -= h;
    out.col(j) = (forward_kinematics(c, a, p) - forward_kinematics(c, b, p)) / (2 * h);
  }
  return out;
}

}  // namespace

TEST(ForwardKinematics, StraightChain) {
  const auto c = chain_of({1, 1});
  const Vec2 tip = forward_kinematics(c, {VecX::Zero(2)}, tip_of(c));
  EXPECT_NEAR(tip.x(), 2.0, 1e-15);
  EXPECT_NEAR(tip.y(), 0.0, 1e-15);
}

TEST(ForwardKinematics, RigidRotation) {
  const auto c = chain_of({1, 1});
  VecX q(2);
  q << std::numbers::pi / 2, 0;
  const Vec2 tip = forward_kinematics(c, {q}, tip_of(c));
  EXPECT_NEAR(tip.x(), 0.0, 1e-15);
  EXPECT_NEAR(tip.y(), 2.0, 1e-15);
}

TEST(ForwardKinematics, ThreeLinkTrigValue) {
  // Frozen from a separate step-by-step trig script:
  // cumulative headings 0.3, -0.2, 0.9.
  const auto c = chain_of({1, 0.8, 0.6});
  VecX q(3);
  q << 0.3, -0.5, 1.1;
  const Vec2 tip = forward_kinematics(c, {q}, tip_of(c));
  EXPECT_NEAR(tip.x(), 2.112355732360998, 1e-14);
  EXPECT_NEAR(tip.y(), 0.6065808878017807, 1e-14);
}

TEST(ForwardKinematics, BadLinkIndexThrows) {
  const auto c = chain_of({1, 1});
  EXPECT_THROW(forward_kinematics(c, {VecX::Zero(2)}, {2, 1.0, 0.0}), std::domain_error);
  EXPECT_THROW(forward_kinematics(c, {VecX::Zero(2)}, {-1, 1.0, 0.0}), std::domain_error);
  EXPECT_THROW(forward_kinematics(c, {VecX::Zero(2)}, {0, 1.5, 0.0}), std::domain_error);
}

TEST(AnalyticJacobian, SingleLinkTangent) {
  const auto c = chain_of({1});
  const Mat2X j = analytic_jacobian(c, {VecX::Zero(1)}, tip_of(c));
  EXPECT_NEAR(j(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(j(1, 0), 1.0, 1e-15);
}

TEST(AnalyticJacobian, DistalColumnsVanish) {
  const auto c = default_chain(6);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2, 2);
  VecX q(6);
  for (auto& v : q) v = u(rng);
  for (int link = 0; link < 6; ++link) {
    const Mat2X j = analytic_jacobian(c, {q}, {link, 0.7, 0.3});
    for (int col = link + 1; col < 6; ++col) EXPECT_EQ(j.col(col).norm(), 0.0);
  }
}

TEST(AnalyticJacobian, MatchesFiniteDifferencesOnRandomTriples) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1, 1);
  std::uniform_int_distribution<int> dof(1, 8);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = dof(rng);
    ChainConfig c;
    for (int i = 0; i < n; ++i) {
      c.link_lengths.push_back(0.3 + std::abs(u(rng)));
      c.link_radii.push_back(0.05 + 0.05 * std::abs(u(rng)));
      c.joint_limits.push_back({});
    }
    VecX q(n);
    for (auto& v : q) v = 2.4 * u(rng);
    std::uniform_int_distribution<int> link(0, n - 1);
    const BodyPoint p{link(rng), std::abs(u(rng)), u(rng)};
    const Mat2X a = analytic_jacobian(c, {q}, p);
    const Mat2X fd = central_difference(c, {q}, p, 1e-6);
    const double scale = 1.0 + a.cwiseAbs().maxCoeff();
    EXPECT_LT((a - fd).cwiseAbs().maxCoeff() / scale, 1e-6) << "trial " << trial;
  }
}

TEST(Kinematics, PerturbingDistalJointLeavesProximalPointsBitwise) {
  const auto c = default_chain(5);
  VecX q(5);
  q << 0.2, -0.4, 0.9, -1.2, 0.5;
  for (int j = 1; j < 5; ++j) {
    VecX q2 = q;
    q2[j] += 0.37;
    for (int link = 0; link < j; ++link) {
      const BodyPoint p{link, 0.6, -0.4};
      const Vec2 a = forward_kinematics(c, {q}, p);
      const Vec2 b = forward_kinematics(c, {q2}, p);
      EXPECT_EQ(a.x(), b.x());
      EXPECT_EQ(a.y(), b.y());
    }
  }
}

TEST(Kinematics, ClampIsIdempotent) {
  const auto c = default_chain(4);
  VecX q(4);
  q << 3.0, -5.0, 0.1, 2.4;
  const ChainState once = clamp_to_limits(c, {q});
  const ChainState twice = clamp_to_limits(c, once);
  EXPECT_EQ(once.q, twice.q);
  EXPECT_TRUE(within_limits(c, once));
  EXPECT_EQ(once.q[0], 2.4);
  EXPECT_EQ(once.q[1], -2.4);
  EXPECT_EQ(once.q[2], 0.1);
}

TEST(Camera, ProjectArithmetic) {
  CameraModel id;
  id.scale = 1.0;
  id.offset = Vec2::Zero();
  EXPECT_EQ(project(id, Vec2(0.25, -3.0)), Vec2(0.25, -3.0));

  CameraModel cam;  // scale 32, offset (64, 64)
  const Vec2 p = project(cam, Vec2(1, 0));
  EXPECT_EQ(p, Vec2(96, 64));

  const Vec2 w(0.123456789, -0.987654321);
  EXPECT_LT((unproject(cam, project(cam, w)) - w).norm(), 1e-12);
}

TEST(Camera, PixelJacobianIsScaledWorldJacobian) {
  const auto c = default_chain(3);
  const auto cam = fit_camera(c, 64, 64);
  VecX q(3);
  q << 0.4, 0.2, -0.3;
  const Mat2X world = analytic_jacobian(c, {q}, tip_of(c));
  EXPECT_LT((tip_pixel_jacobian(c, cam, {q}) - cam.scale * world).norm(), 1e-12);
}

TEST(Camera, FitCameraKeepsExtendedChainInside) {
  for (int n : {2, 3, 5, 8, 12, 16}) {
    const auto c = default_chain(static_cast<std::size_t>(n));
    const auto cam = fit_camera(c, 128, 128);
    for (double angle = 0; angle < 6.3; angle += 0.3) {
      VecX q = VecX::Zero(n);
      q[0] = angle;
      const Vec2 tip = tip_pixel(c, cam, {q});
      EXPECT_GE(tip.x(), 0);
      EXPECT_LE(tip.x(), 127);
      EXPECT_GE(tip.y(), 0);
      EXPECT_LE(tip.y(), 127);
    }
  }
}

TEST(ChainConfig, ValidateRejectsBadGeometry) {
  auto c = default_chain(3);
  c.link_radii[1] = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = default_chain(3);
  c.joint_limits[2] = {1.0, 1.0};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  CameraModel cam;
  cam.height = 8;
  EXPECT_THROW(cam.validate(), std::invalid_argument);
}
