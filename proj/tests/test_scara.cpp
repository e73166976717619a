#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "epact/errors.hpp"
#include "epact/random.hpp"
#include "epact/scara.hpp"

using namespace epact;
using std::numbers::pi;

namespace {

// Textbook planar two-link arm, written out independently of the library.
Vec6 fk_oracle(double t1, double t2, double d3, double t4, double L1, double L2) {
  Vec6 v;
  v << L1 * std::cos(t1) + L2 * std::cos(t1 + t2), L1 * std::sin(t1) + L2 * std::sin(t1 + t2), d3, 0.0, 0.0,
      std::remainder(t1 + t2 + t4, 2 * pi);
  return v;
}

double angle_diff(double a, double b) { return std::abs(std::remainder(a - b, 2 * pi)); }

}  // namespace

TEST_SUITE("kinematics") {
  TEST_CASE("forward kinematics closed-form poses") {
    const ScaraParams p;
    CHECK((forward_kinematics({0, 0, 0, 0}, p).vector() - Vec6(0.55, 0, 0, 0, 0, 0)).norm() < 1e-12);

    const EndPose a = forward_kinematics({pi / 2, -pi / 2, 0.10, pi / 4}, p);
    CHECK(a.x == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(a.y == doctest::Approx(0.30).epsilon(1e-12));
    CHECK(a.z == doctest::Approx(0.10));
    CHECK(a.yaw == doctest::Approx(pi / 4));

    const EndPose b = forward_kinematics({pi, pi, 0, -pi / 2}, p);
    CHECK(b.x == doctest::Approx(-0.05));
    CHECK(std::abs(b.y) < 1e-12);
    CHECK(b.yaw == doctest::Approx(-pi / 2));
  }

  TEST_CASE("wrap_angle lands in (-pi, pi]") {
    CHECK(wrap_angle(pi) == doctest::Approx(pi));
    CHECK(wrap_angle(-pi) == doctest::Approx(pi));
    CHECK(wrap_angle(3 * pi / 2) == doctest::Approx(-pi / 2));
    CHECK(wrap_angle(0.3) == doctest::Approx(0.3));
  }

  TEST_CASE("inverse kinematics of the elbow-down example") {
    const ScaraParams p;
    const JointState q = inverse_kinematics({0.30, 0.25, 0, 0, 0, 0}, p, Elbow::Down);
    // Law of cosines: r^2 = L1^2 + L2^2 puts the elbow at a right angle.
    const double expected_t1 = std::atan2(0.25, 0.30) + std::atan2(p.L2, p.L1);
    CHECK(q.theta2 == doctest::Approx(-pi / 2).epsilon(1e-12));
    CHECK(q.theta1 == doctest::Approx(expected_t1).epsilon(1e-12));
    CHECK(q.theta1 == doctest::Approx(1.3895).epsilon(1e-4));
    CHECK(angle_diff(q.theta4, -q.theta1 - q.theta2) < 1e-12);
    const Vec6 back = fk_oracle(q.theta1, q.theta2, q.d3, q.theta4, p.L1, p.L2);
    CHECK((back.head<3>() - Vec3(0.30, 0.25, 0)).norm() < 1e-12);
  }

  TEST_CASE("full extension and unreachable targets") {
    const ScaraParams p;
    const JointState q = inverse_kinematics({0.55, 0, 0, 0, 0, 0}, p, Elbow::Up);
    CHECK(std::abs(q.theta1) < 1e-6);
    CHECK(std::abs(q.theta2) < 1e-6);
    CHECK(std::abs(q.theta4) < 1e-6);

    try {
      inverse_kinematics({1.0, 0, 0, 0, 0, 0}, p, Elbow::Up);
      FAIL("expected Unreachable");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Unreachable);
    }
    try {
      inverse_kinematics({0.4, 0, 0.9, 0, 0, 0}, p, Elbow::Up);
      FAIL("expected Unreachable for z outside the stroke");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::Unreachable);
    }
  }

  TEST_CASE("joint range violations are reported") {
    ScaraParams p;
    p.theta1_range = {-0.5, 0.5};
    try {
      inverse_kinematics({-0.3, 0.1, 0.1, 0, 0, 0}, p, Elbow::Up);
      FAIL("expected LimitViolation");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::LimitViolation);
    }
  }

  TEST_CASE("clamp_to_limits clips and is idempotent") {
    const ScaraParams p;
    const JointState inside{0.1, -0.2, 0.05, 0.3};
    CHECK(clamp_to_limits(inside, p) == inside);
    const JointState c = clamp_to_limits({10, -10, 1.0, 0}, p);
    CHECK(c.theta1 == 2.2);
    CHECK(c.theta2 == -2.6);
    CHECK(c.d3 == 0.40);
    CHECK(clamp_to_limits(c, p) == c);
  }

  TEST_CASE("end_pose_sequence matches per-step forward kinematics") {
    const ScaraParams p;
    CHECK(end_pose_sequence({}, p).empty());
    std::vector<Vec4> zero{Vec4::Zero()};
    CHECK((end_pose_sequence(zero, p).front().vector() - Vec6(0.55, 0, 0, 0, 0, 0)).norm() < 1e-15);

    Rng rng(11);
    std::vector<Vec4> seq;
    for (int i = 0; i < 50; ++i)
      seq.push_back({uniform(rng, -2, 2), uniform(rng, -2.5, 2.5), uniform(rng, 0, 0.4), uniform(rng, -3, 3)});
    const auto poses = end_pose_sequence(seq, p);
    Eigen::MatrixXd qm(50, 4);
    for (int i = 0; i < 50; ++i) qm.row(i) = seq[std::size_t(i)].transpose();
    const auto mat = end_pose_matrix(qm, p);
    REQUIRE(poses.size() == 50);
    for (int i = 0; i < 50; ++i) {
      const Vec4& q = seq[std::size_t(i)];
      const Vec6 o = fk_oracle(q(0), q(1), q(2), q(3), p.L1, p.L2);
      CHECK((poses[std::size_t(i)].position() - o.head<3>()).norm() < 1e-15);
      CHECK(angle_diff(poses[std::size_t(i)].yaw, o(5)) < 1e-12);
      CHECK(mat.row(i) == poses[std::size_t(i)].vector().transpose());
    }
  }

  TEST_CASE("IK roundtrip property over random reachable poses") {
    const ScaraParams p;
    Rng rng(3);
    double worst = 0.0;
    for (int i = 0; i < 2000; ++i) {
      const JointState q{uniform(rng, -2.1, 2.1), uniform(rng, 0.05, 2.5) * (i % 2 ? 1 : -1), uniform(rng, 0, 0.4),
                         uniform(rng, -3, 3)};
      const EndPose pose = forward_kinematics(q, p);
      const JointState s = inverse_kinematics(pose, p, elbow_of(q));
      worst = std::max(worst, (forward_kinematics(s, p).position() - pose.position()).cwiseAbs().maxCoeff());
      worst = std::max(worst, angle_diff(forward_kinematics(s, p).yaw, pose.yaw));
    }
    CHECK(worst < 1e-9);
  }
}
