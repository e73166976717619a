#pragma once

#include <Eigen/Geometry>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "epact/image.hpp"
#include "epact/scara.hpp"

namespace epact {

/// Stem distance above the berry top where the grasp must close.
inline constexpr double kPickAboveTop = 0.01;

struct Berry {
  int id = 0;
  bool ripe = false;
  Vec3 anchor = Vec3::Zero();
  Vec3 rest_pos = Vec3::Zero();
  Vec3 cur_pos = Vec3::Zero();
  bool attached = true;
  double radius = 0.012;
  // Held by a closed gripper; grasp_origin is where it was when the grip closed.
  bool grasped = false;
  Vec3 grasp_origin = Vec3::Zero();

  Vec3 top() const { return cur_pos + Vec3(0, 0, radius); }
  Vec3 picking_point() const { return cur_pos + Vec3(0, 0, radius + kPickAboveTop); }
  bool operator==(const Berry&) const = default;
};

struct Leaf {
  int id = 0;
  Vec3 anchor = Vec3::Zero();
  Vec3 rest_center = Vec3::Zero();
  Vec3 cur_center = Vec3::Zero();
  double axis_a = 0.02;  // semi-axes (m)
  double axis_b = 0.01;
  double orientation = 0.0;  // in-image rotation (rad)
  bool pushable = true;

  double contact_radius() const { return 0.5 * (axis_a + axis_b); }
  bool operator==(const Leaf&) const = default;
};

struct Scene {
  std::vector<Berry> berries;
  std::vector<Leaf> leaves;
  int target_id = 0;
  int state_id = 0;
  std::uint64_t seed = 0;

  const Berry& target() const;
  bool operator==(const Scene&) const = default;
};

struct LeafSpec {
  Vec3 offset = Vec3::Zero();
  double axis_a = 0.022;
  double axis_b = 0.012;
  double orientation = 0.0;
};

/// Arrangement of one cluster state, as offsets from the target berry center.
struct StateLayout {
  std::vector<Vec3> unripe;
  std::vector<LeafSpec> leaves;
};

/// Cluster layouts for states 0-5 plus placement constants. The layouts are
/// an interpretation of photographs, so they are loadable from a config file.
struct SceneTable {
  Vec3 target_center{0.42, 0.0, 0.17};
  double pipe_height = 0.30;
  double cluster_jitter = 0.015;  // whole-cluster translation, uniform +-
  double member_jitter = 0.005;   // per-object, uniform +-
  double berry_radius = 0.012;
  std::array<StateLayout, 6> states;

  static SceneTable defaults();
  /// INI-style file: [scene] keys plus [stateN] sections with
  /// `unripe = x y z | x y z` and `leaf = x y z a b angle | ...`.
  static SceneTable load(const std::filesystem::path& path);
};

enum class CameraLabel { WristUp, WristDown };

std::string camera_name(CameraLabel label);
CameraLabel camera_from_name(const std::string& name);

struct CameraModel {
  int width = 96;
  int height = 96;
  double fx = 120.0, fy = 120.0, cx = 48.0, cy = 48.0;
  /// Camera pose in the end-effector frame. Camera axes: x right, y down,
  /// z along the optical axis.
  Eigen::Isometry3d mount = Eigen::Isometry3d::Identity();
  CameraLabel label = CameraLabel::WristUp;

  /// Wrist camera for the given image size: intrinsics scale with width.
  static CameraModel wrist(CameraLabel label, int width, int height);
  void validate() const;
};

/// Builds a camera mount at `eye` looking at `target`, both in the
/// end-effector frame (x forward, y left, z up).
Eigen::Isometry3d look_at_mount(const Vec3& eye, const Vec3& target);

struct ArmState {
  JointState q;
  double grip = 1.0;
};

struct SimParams {
  ScaraParams arm;
  SceneTable table = SceneTable::defaults();
  double relax = 0.9;              // per-step relaxation factor toward rest
  double capture_radius = 0.008;   // picking point to gripper midpoint at closure
  double detach_distance = 0.015;  // pull needed after closure
  double grip_close = 0.25;        // aperture below which the gripper counts as closed
  double stem_slack = 0.05;
  double rate_revolute = 0.08;     // rad per step
  double rate_prismatic = 0.008;   // m per step
  double rate_grip = 0.25;         // normalized aperture per step
  double gripper_length = 0.05;
  double gripper_radius = 0.006;
  int max_steps = 150;
  double fps = 30.0;
  int image_width = 96;
  int image_height = 96;
  std::vector<CameraLabel> cameras{CameraLabel::WristUp, CameraLabel::WristDown};
  double home_distance_min = 0.10;
  double home_distance_max = 0.14;
  double approach_cone = 0.26;     // rad, half-angle
  double home_height_jitter = 0.02;
};

struct Observation {
  std::map<std::string, ImageRGB> images;  // camera name -> image
  JointState q;
  double grip = 1.0;
  int t = 0;
  bool operator==(const Observation&) const = default;
};

enum class Outcome { Ongoing, Success, WrongTarget, MultiPick, Timeout };

std::string outcome_name(Outcome o);
Outcome outcome_from_name(const std::string& name);

enum class ObjectKind { Berry, Leaf };

struct Contact {
  ObjectKind kind;
  int id;
  bool operator==(const Contact&) const = default;
};

struct StepInfo {
  std::vector<int> detached_ids;
  std::vector<Contact> contacts;
  bool terminal = false;
  Outcome outcome = Outcome::Ongoing;
};

/// Deterministic scene for a cluster state; throws InvalidState outside 0-5.
Scene make_scene(int state_id, std::uint64_t seed, const SceneTable& table = SceneTable::defaults());

/// World pose of the end effector (x forward along yaw, z up).
Eigen::Isometry3d tool_frame(const JointState& q, const ScaraParams& params);
Eigen::Isometry3d camera_pose(const CameraModel& cam, const JointState& q, const ScaraParams& params);

/// Pinhole projection of a camera-frame point; nullopt when Z <= 0.
std::optional<Eigen::Vector2d> project_camera_point(const CameraModel& cam, const Vec3& p_cam);
std::optional<Eigen::Vector2d> project_point(const CameraModel& cam, const JointState& q, const ScaraParams& params,
                                             const Vec3& world_point);

ImageRGB render_camera(const Scene& scene, const ArmState& arm, const CameraModel& cam, const SimParams& params);

inline constexpr Rgb kBackground{92, 76, 60};
inline constexpr Rgb kRipe{200, 30, 35};
inline constexpr Rgb kUnripe{236, 234, 222};
inline constexpr Rgb kStem{70, 160, 70};
inline constexpr Rgb kLeaf{40, 112, 44};
inline constexpr Rgb kFinger{128, 128, 128};

/// Simulated tabletop picking scene with the arm, quasi-static contacts and
/// two wrist cameras. Single-threaded; independent instances share nothing.
class Env {
 public:
  explicit Env(SimParams params = {});

  Observation reset(int state_id, std::uint64_t seed);
  std::pair<Observation, StepInfo> step(const Action& action);
  Observation observe() const;

  /// Throws NotTerminal while the episode is still running.
  Outcome episode_outcome() const;

  const Scene& scene() const { return scene_; }
  Scene& mutable_scene() { return scene_; }
  const JointState& q() const { return q_; }
  double grip() const { return grip_; }
  int t() const { return t_; }
  bool terminal() const { return terminal_; }
  EndPose tool_pose() const { return forward_kinematics(q_, params_.arm); }
  const SimParams& params() const { return params_; }
  const std::vector<CameraModel>& cameras() const { return cameras_; }
  std::vector<int> detached_ids() const;

  /// Places the arm directly; used by tests and teleop resets.
  void set_arm(const JointState& q, double grip);

 private:
  void resolve_contacts(StepInfo& info);

  SimParams params_;
  std::vector<CameraModel> cameras_;
  Scene scene_;
  JointState q_;
  double grip_ = 1.0;
  int t_ = 0;
  bool terminal_ = false;
  bool reset_done_ = false;
  Outcome outcome_ = Outcome::Ongoing;
};

}  // namespace epact
