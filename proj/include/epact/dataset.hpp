#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "epact/scara.hpp"
#include "epact/sim_env.hpp"

namespace epact {

inline constexpr int kFormatVersion = 1;

enum class EpisodeSource { Expert, Teleop, Rollout };

std::string source_name(EpisodeSource s);
EpisodeSource source_from_name(const std::string& name);

struct EpisodeMeta {
  int state_id = 0;
  std::uint64_t seed = 0;
  EpisodeSource source = EpisodeSource::Expert;
  Outcome outcome = Outcome::Ongoing;
  double fps = 30.0;
  std::vector<std::string> cameras;
  int image_width = 0;
  int image_height = 0;
  nlohmann::json extra = nlohmann::json::object();  // e.g. expert strategy

  bool operator==(const EpisodeMeta&) const = default;
};

using RowMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One demonstration: per-step observations and commanded actions.
/// Arrays share length T; images are T x H x W x 3 bytes per camera.
struct EpisodeRecord {
  EpisodeMeta meta;
  std::map<std::string, std::vector<std::uint8_t>> images;
  RowMatrixXf q;        // T x 4
  Eigen::VectorXf grip;  // T
  RowMatrixXf actions;  // T x 5

  int length() const { return int(q.rows()); }
  std::size_t frame_bytes() const { return std::size_t(meta.image_width) * meta.image_height * 3; }
  ImageRGB image(const std::string& camera, int t) const;
  JointState joint_state(int t) const;
  Action action(int t) const;

  /// Appends one (observation, action) pair. The first call fixes the camera
  /// set and image size from the observation.
  void append(const Observation& obs, const Action& action);

  /// Throws SchemaViolation when the record breaks an invariant.
  void validate() const;

  bool operator==(const EpisodeRecord&) const = default;
};

/// Rounds an action to the float precision the store keeps, so a recorded
/// episode replays exactly.
Action quantize(const Action& a);

std::filesystem::path episode_dir(const std::filesystem::path& root, int episode_id);
std::vector<int> list_episodes(const std::filesystem::path& root);

/// Appends an episode; the write goes to a temp directory and is renamed
/// into place. Returns the new id (one past the largest existing id).
int write_episode(const EpisodeRecord& record, const std::filesystem::path& root);
EpisodeRecord read_episode(const std::filesystem::path& root, int episode_id);

enum class EndPoseSource { Action, State };

struct NormStats {
  Eigen::VectorXd q_mean = Eigen::VectorXd::Zero(4), q_std = Eigen::VectorXd::Ones(4);
  Eigen::VectorXd action_mean = Eigen::VectorXd::Zero(5), action_std = Eigen::VectorXd::Ones(5);
  Eigen::VectorXd ep_mean = Eigen::VectorXd::Zero(6), ep_std = Eigen::VectorXd::Ones(6);

  static constexpr double kStdFloor = 1e-6;

  // Row-wise affine maps; the gripper channel of actions is passed through.
  Eigen::MatrixXd normalize_q(const Eigen::MatrixXd& q) const;
  Eigen::MatrixXd denormalize_q(const Eigen::MatrixXd& q) const;
  Eigen::MatrixXd normalize_actions(const Eigen::MatrixXd& a) const;
  Eigen::MatrixXd denormalize_actions(const Eigen::MatrixXd& a) const;
  Eigen::MatrixXd normalize_end_poses(const Eigen::MatrixXd& e) const;
  Eigen::MatrixXd denormalize_end_poses(const Eigen::MatrixXd& e) const;

  nlohmann::json to_json() const;
  static NormStats from_json(const nlohmann::json& j);
  bool operator==(const NormStats&) const = default;
};

NormStats compute_norm_stats(const std::vector<const EpisodeRecord*>& episodes, const ScaraParams& arm,
                             EndPoseSource source = EndPoseSource::Action);
/// Throws EmptySplit when `ids` is empty.
NormStats compute_norm_stats(const std::filesystem::path& root, const std::vector<int>& ids, const ScaraParams& arm,
                             EndPoseSource source = EndPoseSource::Action);

struct ChunkSample {
  std::map<std::string, ImageRGB> images;  // selected cameras only
  Eigen::VectorXd q;                       // normalized, 4
  Eigen::MatrixXd action_chunk;            // k x 5, normalized
  Eigen::MatrixXd end_pose_chunk;          // k x 6, normalized
  std::vector<bool> pad_mask;              // true = padded step
  int t = 0;
};

/// Training sample at step t: the next k actions, tail-padded by repeating
/// the final action. End poses are forward kinematics of the unnormalized
/// action joint targets (or of measured joints with EndPoseSource::State).
ChunkSample sample_chunk(const EpisodeRecord& record, int t, int k, const std::vector<std::string>& cameras,
                         const NormStats& stats, const ScaraParams& arm,
                         EndPoseSource source = EndPoseSource::Action);

struct Split {
  std::vector<int> train;
  std::vector<int> val;
};

/// Seeded split; throws TooFewEpisodes unless n_val < number of episodes.
Split split_train_val(const std::vector<int>& ids, int n_val, std::uint64_t seed);
Split split_train_val(const std::filesystem::path& root, int n_val, std::uint64_t seed);

}  // namespace epact
