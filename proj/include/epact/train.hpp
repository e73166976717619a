#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "epact/dataset.hpp"
#include "epact/policy.hpp"

namespace epact {

/// Decoupled-weight-decay Adam over a float ParamSet.
class AdamW {
 public:
  AdamW(const nn::ParamSet<float>& like, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);
  void step(nn::ParamSet<float>& params, const nn::ParamSet<float>& grad);
  void set_lr(double lr) { lr_ = lr; }
  int steps_taken() const { return t_; }

 private:
  nn::ParamSet<float> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  int t_ = 0;
};

/// Learning rate at 1-based `step`: linear warm-up, then constant or cosine
/// annealing to zero at `config.steps`.
double scheduled_lr(const PolicyConfig& config, int step);

/// Scales `grad` down to `max_norm` (no-op when max_norm <= 0); returns the
/// norm before clipping.
double clip_grad_norm(nn::ParamSet<float>& grad, double max_norm);

struct LossRow {
  int step = 0;
  LossBreakdown train;
  double val_total = 0.0;
};

/// A trained policy: configuration, normalization statistics and weights.
struct Checkpoint {
  PolicyConfig config;
  NormStats stats;
  nn::ParamSet<float> params;
  std::vector<LossRow> history;
  nlohmann::json meta = nlohmann::json::object();  // dataset path, split, ...
};

/// Directory layout: weights.bin (float32 little-endian, concatenated),
/// weights.json (name, shape, offset per tensor), config.json,
/// norm_stats.json, loss_log.csv, meta.json.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
/// Throws IOFailure or SchemaViolation.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

void write_loss_log(const std::vector<LossRow>& rows, const std::filesystem::path& path);
std::vector<LossRow> read_loss_log(const std::filesystem::path& path);

struct TrainOptions {
  std::vector<int> states;  // empty = every state in the dataset
  ScaraParams arm;
  std::function<void(const LossRow&)> on_log;
};

/// In-memory training split with fixed validation samples.
struct TrainingData {
  std::vector<EpisodeRecord> train;
  std::vector<EpisodeRecord> val;  // falls back to the training episodes when empty
  std::vector<int> train_ids, val_ids;
  NormStats stats;
};

TrainingData load_training_data(const PolicyConfig& config, const std::filesystem::path& dataset,
                                const TrainOptions& opts = {});

/// Mean validation loss with z = mu (no sampling noise) at t = 0, T/4, T/2
/// and 3T/4 of each validation episode.
LossBreakdown validation_loss(const PolicyNet& net, const nn::ParamSet<float>& params, const TrainingData& data,
                              const ScaraParams& arm);

/// Trains from scratch and returns the checkpoint (not saved). Throws
/// NonFiniteLoss with the offending step.
Checkpoint train_policy(const PolicyConfig& config, const std::filesystem::path& dataset,
                        const TrainOptions& opts = {});
Checkpoint train_policy(const PolicyConfig& config, const TrainingData& data, const TrainOptions& opts = {});

/// Immutable inference wrapper around a checkpoint; const methods are safe
/// to call concurrently.
class Policy {
 public:
  explicit Policy(Checkpoint ckpt);
  static Policy load(const std::filesystem::path& dir) { return Policy(load_checkpoint(dir)); }

  struct Prediction {
    Eigen::MatrixXd actions;                   // k x 5, physical units
    std::optional<Eigen::MatrixXd> end_poses;  // k x 6, physical units
  };

  /// Predicts with z = 0 from the observation's images and joints.
  Prediction predict(const Observation& obs) const;
  Prediction predict(const std::map<std::string, ImageRGB>& images, const JointState& q) const;

  const PolicyConfig& config() const { return ckpt_.config; }
  const NormStats& stats() const { return ckpt_.stats; }
  const PolicyNet& net() const { return net_; }
  const nn::ParamSet<float>& params() const { return ckpt_.params; }
  const Checkpoint& checkpoint() const { return ckpt_; }

 private:
  Checkpoint ckpt_;
  PolicyNet net_;
};

/// Mean wall-clock milliseconds of single-observation predictions after
/// `n_warm` warm-up calls.
double measure_inference_ms(const Policy& policy, int n_warm, int n_meas);

}  // namespace epact
