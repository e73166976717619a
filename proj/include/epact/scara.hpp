#pragma once

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

namespace epact {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec5 = Eigen::Matrix<double, 5, 1>;
using Vec6 = Eigen::Matrix<double, 6, 1>;

struct Range {
  double lo = 0.0;
  double hi = 0.0;

  double clamp(double v) const { return v < lo ? lo : (v > hi ? hi : v); }
  bool contains(double v) const { return v >= lo && v <= hi; }
  double span() const { return hi - lo; }
};

/// Geometry and joint limits of the 4-DoF SCARA arm.
///
/// Two planar revolute joints (shoulder, elbow), a vertical prismatic joint
/// and a wrist yaw. Lengths in meters, angles in radians.
struct ScaraParams {
  double L1 = 0.30;
  double L2 = 0.25;
  Range d3_range{0.0, 0.40};
  Range theta1_range{-2.2, 2.2};
  Range theta2_range{-2.6, 2.6};
  Range theta4_range{-std::numbers::pi, std::numbers::pi};
  Range gripper_range{0.0, 1.0};

  /// Throws InvalidConfig when a length or range is degenerate.
  void validate() const;
};

struct JointState {
  double theta1 = 0.0;
  double theta2 = 0.0;
  double d3 = 0.0;
  double theta4 = 0.0;

  Vec4 vector() const { return {theta1, theta2, d3, theta4}; }
  static JointState from(const Eigen::Ref<const Vec4>& v) { return {v(0), v(1), v(2), v(3)}; }
  bool operator==(const JointState&) const = default;
};

struct Action {
  JointState joints;
  double grip = 1.0;  // 1 = open, 0 = closed

  Vec5 vector() const {
    Vec5 v;
    v << joints.theta1, joints.theta2, joints.d3, joints.theta4, grip;
    return v;
  }
  static Action from(const Eigen::Ref<const Vec5>& v) {
    return {JointState{v(0), v(1), v(2), v(3)}, v(4)};
  }
  bool operator==(const Action&) const = default;
};

/// 6-D end-effector pose. For this arm roll and pitch are always zero.
struct EndPose {
  double x = 0.0, y = 0.0, z = 0.0;
  double roll = 0.0, pitch = 0.0, yaw = 0.0;

  Vec3 position() const { return {x, y, z}; }
  Vec6 vector() const {
    Vec6 v;
    v << x, y, z, roll, pitch, yaw;
    return v;
  }
  static EndPose from(const Eigen::Ref<const Vec6>& v) { return {v(0), v(1), v(2), v(3), v(4), v(5)}; }
  bool operator==(const EndPose&) const = default;
};

enum class Elbow { Up, Down };  // Up: theta2 >= 0, Down: theta2 <= 0

/// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double w = std::fmod(a + std::numbers::pi, two_pi);
  if (w <= 0.0) w += two_pi;
  return w - std::numbers::pi;
}

EndPose forward_kinematics(const JointState& q, const ScaraParams& params);

/// Closed-form inverse kinematics. Roll and pitch of the pose are ignored.
/// Throws Unreachable outside the reach annulus or stroke and LimitViolation
/// when the chosen elbow branch leaves the joint ranges.
JointState inverse_kinematics(const EndPose& pose, const ScaraParams& params, Elbow elbow);

JointState clamp_to_limits(const JointState& q, const ScaraParams& params);

/// Batch forward kinematics; row i of the result is the pose of row i of q_seq.
std::vector<EndPose> end_pose_sequence(std::span<const Vec4> q_seq, const ScaraParams& params);

/// Same, for a T x 4 joint matrix (any scalar), producing a T x 6 pose matrix.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 6> end_pose_matrix(
    const Eigen::MatrixBase<Derived>& q_seq, const ScaraParams& params) {
  using S = typename Derived::Scalar;
  Eigen::Matrix<S, Eigen::Dynamic, 6> out(q_seq.rows(), 6);
  for (Eigen::Index i = 0; i < q_seq.rows(); ++i) {
    const auto pose = forward_kinematics(
        JointState{double(q_seq(i, 0)), double(q_seq(i, 1)), double(q_seq(i, 2)), double(q_seq(i, 3))},
        params);
    out.row(i) = pose.vector().template cast<S>().transpose();
  }
  return out;
}

inline Elbow elbow_of(const JointState& q) { return q.theta2 >= 0.0 ? Elbow::Up : Elbow::Down; }

}  // namespace epact
