#include "epact/runtime.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "epact/errors.hpp"

namespace epact {

namespace fs = std::filesystem;

EnsembleBuffer::EnsembleBuffer(int capacity, double m) : capacity_(capacity), m_(m) {
  if (capacity < 1) throw Error(ErrorCode::InvalidConfig, "ensemble capacity must be >= 1");
  if (!(m >= 0.0)) throw Error(ErrorCode::InvalidConfig, "ensemble decay must be >= 0");
}

Eigen::VectorXd EnsembleBuffer::step(const Eigen::MatrixXd& chunk, int t) {
  if (chunk.rows() < 1) throw Error(ErrorCode::ShapeMismatch, "empty chunk");
  if (!entries_.empty() && chunk.cols() != entries_.front().chunk.cols())
    throw Error(ErrorCode::ShapeMismatch, "chunk width differs from buffered chunks");
  entries_.push_back({t, chunk});
  while (int(entries_.size()) > capacity_) entries_.pop_front();

  Eigen::VectorXd sum = Eigen::VectorXd::Zero(chunk.cols());
  double wsum = 0.0;
  int j = 0;
  for (const auto& e : entries_) {
    const int offset = t - e.birth;
    if (offset < 0 || offset >= e.chunk.rows()) continue;
    const double w = std::exp(-m_ * j);
    sum += w * e.chunk.row(offset).transpose();
    wsum += w;
    ++j;
  }
  if (wsum <= 0.0) throw Error(ErrorCode::EmptyBuffer, "no buffered chunk covers step " + std::to_string(t));

  while (!entries_.empty() && t + 1 - entries_.front().birth >= entries_.front().chunk.rows()) entries_.pop_front();
  return sum / wsum;
}

nlohmann::json RolloutLog::sidecar() const {
  nlohmann::json chunks = nlohmann::json::array();
  for (const auto& c : end_pose_chunks) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < c.rows(); ++r) {
      std::vector<double> row(c.cols());
      for (Eigen::Index k = 0; k < c.cols(); ++k) row[std::size_t(k)] = c(r, k);
      rows.push_back(row);
    }
    chunks.push_back(std::move(rows));
  }
  return {{"outcome", outcome_name(outcome)},
          {"steps", steps},
          {"latency_ms", latency_ms},
          {"state_id", record.meta.state_id},
          {"seed", record.meta.seed},
          {"policy", record.meta.extra},
          {"end_pose_chunks", chunks}};
}

Eigen::MatrixXd predicted_end_poses(const Policy::Prediction& pred, const ScaraParams& arm) {
  if (pred.end_poses) return *pred.end_poses;
  const Eigen::MatrixXd joints = pred.actions.leftCols(4);
  return end_pose_matrix(joints, arm);
}

RolloutLog run_episode(Env& env, const Policy& policy, int state, std::uint64_t seed, const RolloutOptions& opts) {
  const PolicyConfig& cfg = policy.config();
  const SimParams& sim = env.params();
  for (const auto& cam : cfg.cameras) {
    bool found = false;
    for (auto label : sim.cameras) found = found || camera_name(label) == cam;
    if (!found) throw Error(ErrorCode::ShapeMismatch, "environment does not render camera " + cam);
  }

  RolloutLog log;
  log.record.meta.state_id = state;
  log.record.meta.seed = seed;
  log.record.meta.source = EpisodeSource::Rollout;
  log.record.meta.fps = sim.fps;
  log.record.meta.extra = {{"variant", variant_name(cfg.variant)},
                           {"cameras", cfg.cameras},
                           {"ensemble", opts.ensemble},
                           {"ensemble_decay", opts.ensemble_decay}};

  Observation obs = env.reset(state, seed);
  EnsembleBuffer buffer(cfg.chunk, opts.ensemble_decay);
  while (!env.terminal()) {
    const int t = env.t();
    Action action;
    try {
      const auto start = std::chrono::steady_clock::now();
      const Policy::Prediction pred = policy.predict(obs);
      const Eigen::VectorXd a = opts.ensemble ? buffer.step(pred.actions, t) : Eigen::VectorXd(pred.actions.row(0).transpose());
      const std::chrono::duration<double, std::milli> elapsed = std::chrono::steady_clock::now() - start;
      log.latency_ms.push_back(elapsed.count());
      log.end_pose_chunks.push_back(predicted_end_poses(pred, sim.arm));
      action.joints = clamp_to_limits(JointState::from(a.head<4>()), sim.arm);
      action.grip = sim.arm.gripper_range.clamp(a(4));
      action = quantize(action);
      if (opts.keep_images) {
        log.record.append(obs, action);
      } else {
        Observation bare = obs;
        bare.images.clear();
        log.record.append(bare, action);
      }
      obs = env.step(action).first;
    } catch (const Error& e) {
      throw Error(e.code(), "step " + std::to_string(t) + ": " + e.what());
    }
  }
  log.outcome = env.episode_outcome();
  log.record.meta.outcome = log.outcome;
  log.steps = env.t();
  return log;
}

int save_rollout(const RolloutLog& log, const fs::path& root) {
  const int id = write_episode(log.record, root);
  std::ofstream out(episode_dir(root, id) / "rollout.json");
  if (!out) throw Error(ErrorCode::IOFailure, "cannot write rollout.json");
  out << log.sidecar().dump() << "\n";
  return id;
}

namespace {

Rgb graded_color(int i, int n) {
  const double s = n > 1 ? double(i) / (n - 1) : 0.0;
  return {std::uint8_t(std::lround(255 * (1.0 - s))), std::uint8_t(std::lround(255 * (1.0 - s) + 128 * s)),
          std::uint8_t(std::lround(255 * s))};
}

}  // namespace

ImageRGB overlay_trajectory(const ImageRGB& image, const Eigen::MatrixXd& end_pose_chunk, const CameraModel& cam,
                            const JointState& arm_state, const ScaraParams& arm) {
  ImageRGB out = image;
  const int n = int(end_pose_chunk.rows());
  std::optional<Eigen::Vector2i> prev;
  for (int i = 0; i < n; ++i) {
    const Vec3 p = end_pose_chunk.row(i).head<3>().transpose();
    const auto uv = project_point(cam, arm_state, arm, p);
    if (!uv) {
      prev.reset();
      continue;
    }
    const Eigen::Vector2i px(int(std::floor(uv->x())), int(std::floor(uv->y())));
    const Rgb color = graded_color(i, n);
    if (prev)
      draw_line(out, prev->x(), prev->y(), px.x(), px.y(), color);
    else
      out.set(px.x(), px.y(), color);
    prev = px;
  }
  return out;
}

OpenLoopResult replay_open_loop(const Policy& policy, const EpisodeRecord& record, const ScaraParams& arm) {
  const int T = record.length();
  OpenLoopResult result;
  result.actions.resize(T, 5);
  double sq = 0.0;
  for (int t = 0; t < T; ++t) {
    std::map<std::string, ImageRGB> images;
    for (const auto& cam : policy.config().cameras) images.emplace(cam, record.image(cam, t));
    const auto pred = policy.predict(images, record.joint_state(t));
    result.actions.row(t) = pred.actions.row(0);
    const Vec3 predicted = forward_kinematics(JointState::from(pred.actions.row(0).head<4>().transpose()), arm).position();
    const Vec3 demo = forward_kinematics(record.action(t).joints, arm).position();
    sq += (predicted - demo).squaredNorm();
  }
  result.position_rms = T > 0 ? std::sqrt(sq / T) : 0.0;
  return result;
}

int render_replay(const Policy& policy, const EpisodeRecord& record, const fs::path& out, const SimParams& sim) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error(ErrorCode::IOFailure, "cannot create " + out.string() + ": " + ec.message());
  const auto& cfg = policy.config();
  int frames = 0;
  for (int t = 0; t < record.length(); ++t) {
    std::map<std::string, ImageRGB> images;
    for (const auto& cam : cfg.cameras) images.emplace(cam, record.image(cam, t));
    const auto pred = policy.predict(images, record.joint_state(t));
    const Eigen::MatrixXd poses = predicted_end_poses(pred, sim.arm);
    for (const auto& cam : record.meta.cameras) {
      const CameraModel model = CameraModel::wrist(camera_from_name(cam), record.meta.image_width, record.meta.image_height);
      const ImageRGB annotated = overlay_trajectory(record.image(cam, t), poses, model, record.joint_state(t), sim.arm);
      char name[64];
      std::snprintf(name, sizeof(name), "frame_%04d_%s.png", t, cam.c_str());
      write_png(annotated, out / name);
    }
    ++frames;
  }
  return frames;
}

}  // namespace epact
