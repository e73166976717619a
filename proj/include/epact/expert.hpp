#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "epact/dataset.hpp"
#include "epact/sim_env.hpp"

namespace epact {

enum class Strategy { Direct, DetourLeft, DetourRight, PushThrough };

std::string strategy_name(Strategy s);

struct Waypoint {
  EndPose pose;
  double grip = 1.0;
  int dwell_steps = 0;  // hold steps after arriving
};

struct DemoPlan {
  std::vector<Waypoint> waypoints;  // waypoints[0] is the start pose
  Strategy strategy = Strategy::Direct;
  std::uint64_t noise_seed = 0;
  Elbow elbow = Elbow::Up;
};

struct ExpertParams {
  double pregrasp_distance = 0.02;
  double detour_distance = 0.05;
  std::vector<double> detour_angles{0.61, 0.87, 1.13};  // rad from the direct approach
  double push_threshold = 0.01;   // both detours below this clearance -> push through
  double waypoint_noise = 0.005;  // Gaussian sigma on intermediate waypoints
  double seconds_per_meter = 5.0;
  double min_segment_seconds = 0.2;
  double max_yaw_rate = 0.05;     // rad per step, keeps yaw inside the arm's rate limit
  int settle_steps = 6;
  int close_steps = 6;
  double pull_distance = 0.03;
};

/// Obstacles an approach must avoid: every object except the target berry.
struct Obstacle {
  Vec3 center;
  double radius;
};
std::vector<Obstacle> obstacles_of(const Scene& scene);

/// Minimum clearance between the gripper body (a capsule trailing the tip
/// along -yaw) and the obstacles, sampled every `resolution` meters along
/// the straight segments between consecutive poses.
double path_clearance(const std::vector<EndPose>& poses, const std::vector<Obstacle>& obstacles, const SimParams& sim,
                      double resolution = 0.001);

/// Plans an approach from `start` to the target's picking point: direct when
/// the straight approach is clear, otherwise a detour on the clearer side,
/// pushing through when neither side is clear. Throws Unplannable when the
/// target cannot be reached.
DemoPlan plan_demo(const Scene& scene, const JointState& start, const SimParams& sim, std::uint64_t noise_seed,
                   const ExpertParams& ex = {});

/// Minimum-jerk, 30 Hz joint targets for the plan (one Action per step).
std::vector<Action> interpolate_plan(const DemoPlan& plan, const SimParams& sim, const ExpertParams& ex = {});

/// Runs the plan in a freshly reset env and records it. Unsuccessful picks
/// are recorded with their outcome rather than raised.
EpisodeRecord execute_plan(Env& env, const DemoPlan& plan, const ExpertParams& ex = {});

struct CollectSummary {
  int episodes = 0;
  int attempts = 0;
  int retries = 0;
  std::map<int, int> per_state;
  std::map<std::string, int> per_strategy;
  std::vector<int> episode_ids;

  nlohmann::json to_json() const;
};

/// Writes n successful expert episodes round-robin over `states`; failed
/// attempts are retried with fresh seeds. Throws ExhaustedRetries after 10n
/// attempts.
CollectSummary collect_demos(int n, const std::vector<int>& states, std::uint64_t seed,
                             const std::filesystem::path& out, const SimParams& sim = {},
                             const ExpertParams& ex = {},
                             const std::function<void(const std::string&)>& log = {});

}  // namespace epact
