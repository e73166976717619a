#include "epact/expert.hpp"

#include <algorithm>
#include <cmath>

#include "epact/errors.hpp"
#include "epact/random.hpp"

namespace epact {

namespace {

double segment_distance(const Vec3& a, const Vec3& b, const Vec3& p) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (a + t * ab - p).norm();
}

EndPose make_pose(const Vec3& p, double yaw) {
  EndPose e;
  e.x = p.x();
  e.y = p.y();
  e.z = p.z();
  e.yaw = wrap_angle(yaw);
  return e;
}

EndPose lerp_pose(const EndPose& a, const EndPose& b, double s) {
  const Vec3 p = a.position() + s * (b.position() - a.position());
  return make_pose(p, a.yaw + s * wrap_angle(b.yaw - a.yaw));
}

double min_jerk(double tau) { return tau * tau * tau * (10.0 + tau * (-15.0 + 6.0 * tau)); }

Vec3 rotate_z(const Vec3& v, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * v.x() - s * v.y(), s * v.x() + c * v.y(), v.z()};
}

bool reachable(const std::vector<EndPose>& poses, const SimParams& sim, Elbow elbow) {
  try {
    for (std::size_t i = 0; i + 1 < poses.size(); ++i) {
      const double len = (poses[i + 1].position() - poses[i].position()).norm();
      const int n = std::max(1, int(std::ceil(len / 0.005)));
      for (int j = 0; j <= n; ++j) inverse_kinematics(lerp_pose(poses[i], poses[i + 1], double(j) / n), sim.arm, elbow);
    }
    return true;
  } catch (const Error&) {
    return false;
  }
}

}  // namespace

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Direct: return "direct";
    case Strategy::DetourLeft: return "detour_left";
    case Strategy::DetourRight: return "detour_right";
    case Strategy::PushThrough: return "push_through";
  }
  return "direct";
}

std::vector<Obstacle> obstacles_of(const Scene& scene) {
  std::vector<Obstacle> out;
  for (const auto& b : scene.berries)
    if (b.id != scene.target_id && b.attached) out.push_back({b.cur_pos, b.radius});
  for (const auto& l : scene.leaves) out.push_back({l.cur_center, l.contact_radius()});
  return out;
}

double path_clearance(const std::vector<EndPose>& poses, const std::vector<Obstacle>& obstacles, const SimParams& sim,
                      double resolution) {
  double best = std::numeric_limits<double>::infinity();
  if (obstacles.empty() || poses.empty()) return best;
  auto probe = [&](const EndPose& pose) {
    const Vec3 tip = pose.position();
    const Vec3 tail = tip - sim.gripper_length * Vec3(std::cos(pose.yaw), std::sin(pose.yaw), 0.0);
    for (const auto& o : obstacles)
      best = std::min(best, segment_distance(tip, tail, o.center) - o.radius - sim.gripper_radius);
  };
  probe(poses.front());
  for (std::size_t i = 0; i + 1 < poses.size(); ++i) {
    const double len = (poses[i + 1].position() - poses[i].position()).norm();
    // Rotation sweeps the tail, so sample rotations at the same arc resolution.
    const double arc = std::abs(wrap_angle(poses[i + 1].yaw - poses[i].yaw)) * sim.gripper_length;
    const int n = std::max(1, int(std::ceil(std::max(len, arc) / resolution)));
    for (int j = 1; j <= n; ++j) probe(lerp_pose(poses[i], poses[i + 1], double(j) / n));
  }
  return best;
}

DemoPlan plan_demo(const Scene& scene, const JointState& start, const SimParams& sim, std::uint64_t noise_seed,
                   const ExpertParams& ex) {
  const Berry& target = scene.target();
  const Vec3 pick = target.picking_point();
  const EndPose start_pose = forward_kinematics(start, sim.arm);
  const Elbow elbow = elbow_of(start);
  try {
    inverse_kinematics(make_pose(pick, 0.0), sim.arm, elbow);
  } catch (const Error& e) {
    throw Error(ErrorCode::Unplannable, std::string("picking point unreachable: ") + e.what());
  }

  Vec3 d0 = pick - start_pose.position();
  d0.z() = 0.0;
  if (d0.norm() < 1e-6) d0 = Vec3(pick.x(), pick.y(), 0.0);
  d0.normalize();
  const auto obstacles = obstacles_of(scene);

  auto approach_from = [&](const Vec3& dir, bool detour) {
    const double yaw = std::atan2(dir.y(), dir.x());
    std::vector<EndPose> poses{start_pose};
    if (detour) poses.push_back(make_pose(pick - ex.detour_distance * dir, yaw));
    poses.push_back(make_pose(pick - ex.pregrasp_distance * dir, yaw));
    poses.push_back(make_pose(pick, yaw));
    return poses;
  };

  DemoPlan plan;
  plan.noise_seed = noise_seed;
  plan.elbow = elbow;
  std::vector<EndPose> chosen = approach_from(d0, false);
  const double direct_clear = path_clearance(chosen, obstacles, sim);
  if (direct_clear > target.radius) {
    plan.strategy = Strategy::Direct;
  } else {
    // side +1: come in from the left of the direct line, -1: from the right.
    double side_clear[2] = {-1e9, -1e9};
    std::vector<EndPose> side_path[2];
    for (int si = 0; si < 2; ++si) {
      const double side = si == 0 ? 1.0 : -1.0;
      for (double angle : ex.detour_angles) {
        auto poses = approach_from(rotate_z(d0, -side * angle), true);
        if (!reachable(poses, sim, elbow)) continue;
        const double c = path_clearance(poses, obstacles, sim);
        if (c > side_clear[si]) {
          side_clear[si] = c;
          side_path[si] = std::move(poses);
        }
      }
    }
    if (std::max(side_clear[0], side_clear[1]) < ex.push_threshold) {
      plan.strategy = Strategy::PushThrough;
    } else {
      const int si = side_clear[0] >= side_clear[1] ? 0 : 1;
      plan.strategy = si == 0 ? Strategy::DetourLeft : Strategy::DetourRight;
      chosen = side_path[si];
    }
  }

  // Jitter intermediate waypoints only; the grasp and pull must stay exact.
  Rng rng(derive_seed(noise_seed, {0xe8}));
  std::vector<EndPose> jittered = chosen;
  for (std::size_t i = 1; i + 1 < jittered.size(); ++i) {
    jittered[i].x += gaussian(rng, ex.waypoint_noise);
    jittered[i].y += gaussian(rng, ex.waypoint_noise);
    jittered[i].z += gaussian(rng, ex.waypoint_noise);
  }
  const bool detour = plan.strategy == Strategy::DetourLeft || plan.strategy == Strategy::DetourRight;
  const bool keep_jitter = reachable(jittered, sim, elbow) && (!detour || path_clearance(jittered, obstacles, sim) > 0.0);
  if (keep_jitter) chosen = jittered;

  for (std::size_t i = 0; i + 1 < chosen.size(); ++i) plan.waypoints.push_back({chosen[i], 1.0, 0});
  const EndPose grasp = chosen.back();
  plan.waypoints.push_back({grasp, 1.0, ex.settle_steps});
  plan.waypoints.push_back({grasp, 0.0, ex.close_steps});
  EndPose pull = grasp;
  pull.z -= ex.pull_distance;
  plan.waypoints.push_back({pull, 0.0, 0});
  return plan;
}

std::vector<Action> interpolate_plan(const DemoPlan& plan, const SimParams& sim, const ExpertParams& ex) {
  std::vector<Action> out;
  if (plan.waypoints.empty()) return out;
  JointState last = inverse_kinematics(plan.waypoints.front().pose, sim.arm, plan.elbow);
  // Largest per-step joint change of a segment relative to the rate limits;
  // above 1 the arm would lag behind the commanded targets.
  auto rate_ratio = [&](const std::vector<JointState>& seg) {
    double worst = 0.0;
    JointState prev = last;
    for (const JointState& q : seg) {
      worst = std::max({worst, std::abs(q.theta1 - prev.theta1) / sim.rate_revolute,
                        std::abs(q.theta2 - prev.theta2) / sim.rate_revolute,
                        std::abs(q.d3 - prev.d3) / sim.rate_prismatic,
                        std::abs(wrap_angle(q.theta4 - prev.theta4)) / sim.rate_revolute});
      prev = q;
    }
    return worst;
  };
  for (std::size_t i = 1; i < plan.waypoints.size(); ++i) {
    const Waypoint& a = plan.waypoints[i - 1];
    const Waypoint& b = plan.waypoints[i];
    const double dist = (b.pose.position() - a.pose.position()).norm();
    const double dyaw = std::abs(wrap_angle(b.pose.yaw - a.pose.yaw));
    if (dist > 1e-9 || dyaw > 1e-9) {
      const double seconds = std::max(dist * ex.seconds_per_meter, ex.min_segment_seconds);
      int n = std::max({1, int(std::ceil(seconds * sim.fps)), int(std::ceil(dyaw / ex.max_yaw_rate))});
      std::vector<JointState> seg;
      for (int attempt = 0; attempt < 20; ++attempt) {
        seg.clear();
        for (int j = 1; j <= n; ++j)
          seg.push_back(inverse_kinematics(lerp_pose(a.pose, b.pose, min_jerk(double(j) / n)), sim.arm, plan.elbow));
        const double ratio = rate_ratio(seg);
        if (ratio <= 1.0) break;
        n = std::max(n + 1, int(std::ceil(n * ratio)));
      }
      for (const JointState& q : seg) out.push_back(Action{q, b.grip});
      last = seg.back();
    }
    for (int j = 0; j < b.dwell_steps; ++j) out.push_back(Action{inverse_kinematics(b.pose, sim.arm, plan.elbow), b.grip});
    if (b.dwell_steps > 0) last = out.back().joints;
  }
  return out;
}

EpisodeRecord execute_plan(Env& env, const DemoPlan& plan, const ExpertParams& ex) {
  const auto actions = interpolate_plan(plan, env.params(), ex);
  EpisodeRecord record;
  record.meta.state_id = env.scene().state_id;
  record.meta.seed = env.scene().seed;
  record.meta.source = EpisodeSource::Expert;
  record.meta.fps = env.params().fps;
  record.meta.extra = {{"strategy", strategy_name(plan.strategy)}, {"noise_seed", plan.noise_seed}};

  Observation obs = env.observe();
  std::size_t i = 0;
  while (!env.terminal()) {
    const Action a = quantize(actions.empty() ? Action{env.q(), env.grip()} : actions[std::min(i, actions.size() - 1)]);
    record.append(obs, a);
    obs = env.step(a).first;
    ++i;
  }
  record.meta.outcome = env.episode_outcome();
  return record;
}

nlohmann::json CollectSummary::to_json() const {
  nlohmann::json states = nlohmann::json::object();
  for (const auto& [s, c] : per_state) states[std::to_string(s)] = c;
  return {{"episodes", episodes}, {"attempts", attempts},          {"retries", retries},
          {"per_state", states},  {"per_strategy", per_strategy}, {"episode_ids", episode_ids}};
}

CollectSummary collect_demos(int n, const std::vector<int>& states, std::uint64_t seed, const std::filesystem::path& out,
                             const SimParams& sim, const ExpertParams& ex,
                             const std::function<void(const std::string&)>& log) {
  if (n <= 0) throw Error(ErrorCode::InvalidConfig, "episode count must be positive");
  if (states.empty()) throw Error(ErrorCode::InvalidState, "no states requested");
  for (int s : states)
    if (s < 0 || s > 5) throw Error(ErrorCode::InvalidState, "state " + std::to_string(s) + " not in 0..5");

  CollectSummary summary;
  Env env(sim);
  for (int i = 0; i < n; ++i) {
    const int state = states[std::size_t(i) % states.size()];
    for (int attempt = 0;; ++attempt) {
      if (summary.attempts >= 10 * n)
        throw Error(ErrorCode::ExhaustedRetries, std::to_string(summary.attempts) + " attempts for " + std::to_string(n) + " episodes");
      ++summary.attempts;
      const std::uint64_t episode_seed = derive_seed(seed, {std::uint64_t(i), std::uint64_t(attempt)});
      env.reset(state, episode_seed);
      EpisodeRecord record;
      try {
        const DemoPlan plan = plan_demo(env.scene(), env.q(), sim, derive_seed(episode_seed, {7}), ex);
        record = execute_plan(env, plan, ex);
      } catch (const Error& e) {
        if (log) log("episode " + std::to_string(i) + " attempt " + std::to_string(attempt) + ": " + e.what());
        ++summary.retries;
        continue;
      }
      if (record.meta.outcome != Outcome::Success) {
        if (log)
          log("episode " + std::to_string(i) + " attempt " + std::to_string(attempt) + " (state " +
              std::to_string(state) + "): " + outcome_name(record.meta.outcome) + ", retrying");
        ++summary.retries;
        continue;
      }
      summary.episode_ids.push_back(write_episode(record, out));
      ++summary.episodes;
      ++summary.per_state[state];
      ++summary.per_strategy[record.meta.extra.value("strategy", std::string("direct"))];
      break;
    }
  }
  return summary;
}

}  // namespace epact
