#pragma once

#include <deque>
#include <filesystem>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "epact/dataset.hpp"
#include "epact/sim_env.hpp"
#include "epact/train.hpp"

namespace epact {

/// Overlapping chunk predictions, oldest first.
class EnsembleBuffer {
 public:
  struct Entry {
    int birth = 0;
    Eigen::MatrixXd chunk;  // rows cover steps birth, birth+1, ...
  };

  /// `m` is the decay constant of w_j = exp(-m j), j = 0 for the oldest chunk.
  explicit EnsembleBuffer(int capacity, double m = 0.01);

  /// Inserts `chunk` born at step t, returns the weighted average of every
  /// retained prediction for t, then evicts chunks that no longer cover t+1.
  /// Throws ShapeMismatch when the chunk is empty or has the wrong width.
  Eigen::VectorXd step(const Eigen::MatrixXd& chunk, int t);

  const std::deque<Entry>& entries() const { return entries_; }
  int capacity() const { return capacity_; }
  double decay() const { return m_; }
  void clear() { entries_.clear(); }

 private:
  std::deque<Entry> entries_;
  int capacity_;
  double m_;
};

inline Eigen::VectorXd ensemble_step(EnsembleBuffer& buffer, const Eigen::MatrixXd& new_chunk, int t) {
  return buffer.step(new_chunk, t);
}

struct RolloutOptions {
  bool ensemble = true;
  double ensemble_decay = 0.01;
  bool keep_images = true;  // store observations in the log's EpisodeRecord
};

struct RolloutLog {
  EpisodeRecord record;                          // observations and emitted actions
  std::vector<Eigen::MatrixXd> end_pose_chunks;  // per step, k x 6 (FK of joints for act)
  std::vector<double> latency_ms;                // prediction + ensembling per step
  Outcome outcome = Outcome::Ongoing;
  int steps = 0;

  nlohmann::json sidecar() const;
};

/// Closed-loop rollout of `policy` in `env` reset to (state, seed). Model and
/// environment errors are rethrown with the step index in the message.
RolloutLog run_episode(Env& env, const Policy& policy, int state, std::uint64_t seed,
                       const RolloutOptions& opts = {});

/// Writes the record as a dataset episode plus rollout.json; returns its id.
int save_rollout(const RolloutLog& log, const std::filesystem::path& root);

/// Predicted end poses for a prediction: the end-pose head when present,
/// otherwise forward kinematics of the predicted joints.
Eigen::MatrixXd predicted_end_poses(const Policy::Prediction& pred, const ScaraParams& arm);

/// Draws the predicted tool positions as a 1-px polyline graded from yellow
/// (first step) to blue (last). Points behind the camera break the line.
ImageRGB overlay_trajectory(const ImageRGB& image, const Eigen::MatrixXd& end_pose_chunk, const CameraModel& cam,
                            const JointState& arm_state, const ScaraParams& arm);

struct OpenLoopResult {
  Eigen::MatrixXd actions;    // T x 5, first step of each predicted chunk
  double position_rms = 0.0;  // meters, FK of predicted vs demonstrated joints
};

/// Predicts on every recorded observation of `record` without ensembling and
/// compares the first action of each chunk with the demonstration.
OpenLoopResult replay_open_loop(const Policy& policy, const EpisodeRecord& record, const ScaraParams& arm);

/// Writes frame_NNNN_<camera>.png for every step of `record`, each with the
/// policy's predicted trajectory drawn over the recorded image. Returns the
/// number of frames written.
int render_replay(const Policy& policy, const EpisodeRecord& record, const std::filesystem::path& out,
                  const SimParams& sim);

}  // namespace epact
