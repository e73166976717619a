#include "epact/scara.hpp"

#include <algorithm>
#include <string>

#include "epact/errors.hpp"

namespace epact {

namespace {

constexpr double kReachTolerance = 1e-12;

void check_range(const Range& r, const char* name) {
  if (!(r.lo < r.hi)) throw Error(ErrorCode::InvalidConfig, std::string(name) + " must satisfy lo < hi");
}

}  // namespace

void ScaraParams::validate() const {
  if (!(L1 > 0.0) || !(L2 > 0.0)) throw Error(ErrorCode::InvalidConfig, "link lengths must be positive");
  check_range(d3_range, "d3_range");
  check_range(theta1_range, "theta1_range");
  check_range(theta2_range, "theta2_range");
  check_range(theta4_range, "theta4_range");
  check_range(gripper_range, "gripper_range");
  if (theta4_range.lo < -std::numbers::pi || theta4_range.hi > std::numbers::pi)
    throw Error(ErrorCode::InvalidConfig, "theta4_range must lie within [-pi, pi]");
}

EndPose forward_kinematics(const JointState& q, const ScaraParams& params) {
  const double a12 = q.theta1 + q.theta2;
  EndPose pose;
  pose.x = params.L1 * std::cos(q.theta1) + params.L2 * std::cos(a12);
  pose.y = params.L1 * std::sin(q.theta1) + params.L2 * std::sin(a12);
  pose.z = q.d3;
  pose.yaw = wrap_angle(a12 + q.theta4);
  return pose;
}

JointState inverse_kinematics(const EndPose& pose, const ScaraParams& params, Elbow elbow) {
  const double L1 = params.L1;
  const double L2 = params.L2;
  const double r2 = pose.x * pose.x + pose.y * pose.y;
  const double r = std::sqrt(r2);
  if (!std::isfinite(r) || r > L1 + L2 + kReachTolerance || r < std::abs(L1 - L2) - kReachTolerance)
    throw Error(ErrorCode::Unreachable, "planar target radius " + std::to_string(r) + " outside reach annulus");
  if (!params.d3_range.contains(pose.z))
    throw Error(ErrorCode::Unreachable, "z = " + std::to_string(pose.z) + " outside prismatic stroke");

  const double c2 = std::clamp((r2 - L1 * L1 - L2 * L2) / (2.0 * L1 * L2), -1.0, 1.0);
  double theta2 = std::acos(c2);
  if (elbow == Elbow::Down) theta2 = -theta2;

  JointState q;
  q.theta2 = theta2;
  q.theta1 = wrap_angle(std::atan2(pose.y, pose.x) -
                        std::atan2(L2 * std::sin(theta2), L1 + L2 * std::cos(theta2)));
  q.d3 = pose.z;
  q.theta4 = wrap_angle(pose.yaw - q.theta1 - q.theta2);

  if (!params.theta1_range.contains(q.theta1) || !params.theta2_range.contains(q.theta2) ||
      !params.theta4_range.contains(q.theta4))
    throw Error(ErrorCode::LimitViolation, "IK solution exceeds joint ranges");
  return q;
}

JointState clamp_to_limits(const JointState& q, const ScaraParams& params) {
  return {params.theta1_range.clamp(q.theta1), params.theta2_range.clamp(q.theta2),
          params.d3_range.clamp(q.d3), params.theta4_range.clamp(q.theta4)};
}

std::vector<EndPose> end_pose_sequence(std::span<const Vec4> q_seq, const ScaraParams& params) {
  std::vector<EndPose> out;
  out.reserve(q_seq.size());
  for (const auto& q : q_seq) out.push_back(forward_kinematics(JointState::from(q), params));
  return out;
}

}  // namespace epact
