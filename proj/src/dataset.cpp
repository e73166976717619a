#include "epact/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <unistd.h>

#include "epact/errors.hpp"
#include "epact/random.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace epact {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void to_little_endian(std::vector<char>& bytes) {
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    for (std::size_t i = 0; i < bytes.size(); i += sizeof(T)) std::reverse(bytes.begin() + i, bytes.begin() + i + sizeof(T));
  }
}

void write_file(const fs::path& path, const char* data, std::size_t size) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::IOFailure, "cannot open " + path.string());
  f.write(data, std::streamsize(size));
  if (!f) throw Error(ErrorCode::IOFailure, "write failed: " + path.string());
}

std::vector<char> read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::IOFailure, "cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(f), {});
}

json read_json(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaViolation, path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  const std::string s = j.dump(2) + "\n";
  write_file(path, s.data(), s.size());
}

template <typename T>
void write_array(const fs::path& dir, const std::string& name, const T* data, std::size_t count,
                 std::vector<std::int64_t> shape, const char* dtype) {
  std::vector<char> bytes(count * sizeof(T));
  std::memcpy(bytes.data(), data, bytes.size());
  to_little_endian<T>(bytes);
  write_file(dir / (name + ".bin"), bytes.data(), bytes.size());
  write_json(dir / (name + ".json"), json{{"shape", shape}, {"dtype", dtype}, {"byte_order", "little"}});
}

template <typename T>
std::vector<T> read_array(const fs::path& dir, const std::string& name, const char* dtype,
                          std::vector<std::int64_t>& shape) {
  const json side = read_json(dir / (name + ".json"));
  try {
    if (side.at("dtype").get<std::string>() != dtype)
      throw Error(ErrorCode::SchemaViolation, name + ": expected dtype " + dtype);
    shape = side.at("shape").get<std::vector<std::int64_t>>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaViolation, name + " sidecar: " + e.what());
  }
  std::size_t count = 1;
  for (auto d : shape) {
    if (d < 0) throw Error(ErrorCode::SchemaViolation, name + ": negative dimension");
    count *= std::size_t(d);
  }
  auto bytes = read_file(dir / (name + ".bin"));
  if (bytes.size() != count * sizeof(T))
    throw Error(ErrorCode::SchemaViolation, name + ".bin holds " + std::to_string(bytes.size()) + " bytes, sidecar declares " +
                                                std::to_string(count * sizeof(T)));
  to_little_endian<T>(bytes);
  std::vector<T> out(count);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

json meta_to_json(const EpisodeMeta& m, int length) {
  return json{{"format_version", kFormatVersion},
              {"state_id", m.state_id},
              {"seed", m.seed},
              {"source", source_name(m.source)},
              {"outcome", outcome_name(m.outcome)},
              {"fps", m.fps},
              {"cameras", m.cameras},
              {"image_width", m.image_width},
              {"image_height", m.image_height},
              {"length", length},
              {"extra", m.extra}};
}

EpisodeMeta meta_from_json(const json& j) {
  try {
    if (j.at("format_version").get<int>() != kFormatVersion)
      throw Error(ErrorCode::SchemaViolation, "unsupported format_version");
    EpisodeMeta m;
    m.state_id = j.at("state_id").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.source = source_from_name(j.at("source").get<std::string>());
    m.outcome = outcome_from_name(j.at("outcome").get<std::string>());
    m.fps = j.at("fps").get<double>();
    m.cameras = j.at("cameras").get<std::vector<std::string>>();
    m.image_width = j.at("image_width").get<int>();
    m.image_height = j.at("image_height").get<int>();
    m.extra = j.value("extra", json::object());
    return m;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaViolation, std::string("meta.json: ") + e.what());
  }
}

Eigen::VectorXd floored_std(const Eigen::MatrixXd& x, const Eigen::VectorXd& mean) {
  Eigen::VectorXd var = (x.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();
  return var.array().sqrt().max(NormStats::kStdFloor).matrix();
}

}  // namespace

std::string source_name(EpisodeSource s) {
  switch (s) {
    case EpisodeSource::Expert: return "expert";
    case EpisodeSource::Teleop: return "teleop";
    case EpisodeSource::Rollout: return "rollout";
  }
  return "expert";
}

EpisodeSource source_from_name(const std::string& name) {
  if (name == "expert") return EpisodeSource::Expert;
  if (name == "teleop") return EpisodeSource::Teleop;
  if (name == "rollout") return EpisodeSource::Rollout;
  throw Error(ErrorCode::SchemaViolation, "unknown source '" + name + "'");
}

ImageRGB EpisodeRecord::image(const std::string& camera, int t) const {
  const auto it = images.find(camera);
  if (it == images.end()) throw Error(ErrorCode::BadIndex, "episode has no camera " + camera);
  if (t < 0 || t >= length()) throw Error(ErrorCode::BadIndex, "frame index out of range");
  ImageRGB img(meta.image_width, meta.image_height);
  std::memcpy(img.data.data(), it->second.data() + frame_bytes() * t, frame_bytes());
  return img;
}

JointState EpisodeRecord::joint_state(int t) const { return {q(t, 0), q(t, 1), q(t, 2), q(t, 3)}; }

Action EpisodeRecord::action(int t) const {
  return {JointState{actions(t, 0), actions(t, 1), actions(t, 2), actions(t, 3)}, actions(t, 4)};
}

Action quantize(const Action& a) {
  return Action::from(a.vector().cast<float>().cast<double>());
}

void EpisodeRecord::append(const Observation& obs, const Action& action) {
  if (length() == 0 && images.empty()) {
    meta.cameras.clear();
    for (const auto& [name, img] : obs.images) {
      meta.cameras.push_back(name);
      meta.image_width = img.width;
      meta.image_height = img.height;
      images[name];
    }
  }
  if (obs.images.size() != images.size()) throw Error(ErrorCode::ShapeMismatch, "observation camera set changed");
  for (const auto& [name, img] : obs.images) {
    auto it = images.find(name);
    if (it == images.end() || img.width != meta.image_width || img.height != meta.image_height)
      throw Error(ErrorCode::ShapeMismatch, "observation image does not match episode layout");
    it->second.insert(it->second.end(), img.data.begin(), img.data.end());
  }
  const int T = length();
  q.conservativeResize(T + 1, 4);
  grip.conservativeResize(T + 1);
  actions.conservativeResize(T + 1, 5);
  q.row(T) = obs.q.vector().cast<float>().transpose();
  grip(T) = float(obs.grip);
  actions.row(T) = action.vector().cast<float>().transpose();
}

void EpisodeRecord::validate() const {
  const int T = length();
  if (T < 2) throw Error(ErrorCode::SchemaViolation, "episode must have at least 2 steps");
  if (q.cols() != 4 || actions.cols() != 5) throw Error(ErrorCode::SchemaViolation, "bad state/action width");
  if (grip.size() != T || actions.rows() != T) throw Error(ErrorCode::SchemaViolation, "per-step arrays disagree on length");
  if (!actions.allFinite() || !q.allFinite() || !grip.allFinite())
    throw Error(ErrorCode::SchemaViolation, "non-finite values in episode");
  if ((actions.col(4).array() < 0.0f).any() || (actions.col(4).array() > 1.0f).any())
    throw Error(ErrorCode::SchemaViolation, "gripper command outside [0, 1]");
  if (meta.cameras.empty() || meta.cameras.size() != images.size())
    throw Error(ErrorCode::SchemaViolation, "camera list does not match stored images");
  for (const auto& cam : meta.cameras) {
    const auto it = images.find(cam);
    if (it == images.end()) throw Error(ErrorCode::SchemaViolation, "missing images for camera " + cam);
    if (it->second.size() != frame_bytes() * std::size_t(T))
      throw Error(ErrorCode::SchemaViolation, "image array for " + cam + " has wrong size");
  }
  if (!(meta.fps > 0.0)) throw Error(ErrorCode::SchemaViolation, "fps must be positive");
}

fs::path episode_dir(const fs::path& root, int episode_id) {
  char name[32];
  std::snprintf(name, sizeof name, "episode_%06d", episode_id);
  return root / name;
}

std::vector<int> list_episodes(const fs::path& root) {
  std::vector<int> ids;
  if (!fs::exists(root)) return ids;
  for (const auto& entry : fs::directory_iterator(root)) {
    const std::string name = entry.path().filename().string();
    if (!entry.is_directory() || name.rfind("episode_", 0) != 0) continue;
    try {
      ids.push_back(std::stoi(name.substr(8)));
    } catch (const std::exception&) {
    }
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

int write_episode(const EpisodeRecord& record, const fs::path& root) {
  record.validate();
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw Error(ErrorCode::IOFailure, "cannot create " + root.string() + ": " + ec.message());
  const auto existing = list_episodes(root);
  const int id = existing.empty() ? 0 : existing.back() + 1;
  const fs::path tmp = root / (".tmp_" + episode_dir(root, id).filename().string() + "_" + std::to_string(::getpid()));
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp, ec);
  if (ec) throw Error(ErrorCode::IOFailure, "cannot create " + tmp.string());

  const std::int64_t T = record.length();
  write_json(tmp / "meta.json", meta_to_json(record.meta, int(T)));
  write_array(tmp, "q", record.q.data(), record.q.size(), {T, 4}, "float32");
  write_array(tmp, "grip", record.grip.data(), record.grip.size(), {T}, "float32");
  write_array(tmp, "actions", record.actions.data(), record.actions.size(), {T, 5}, "float32");
  for (const auto& cam : record.meta.cameras) {
    const auto& bytes = record.images.at(cam);
    write_array(tmp, "images_" + cam, bytes.data(), bytes.size(),
                {T, record.meta.image_height, record.meta.image_width, 3}, "uint8");
  }
  fs::rename(tmp, episode_dir(root, id), ec);
  if (ec) throw Error(ErrorCode::IOFailure, "cannot publish episode: " + ec.message());
  return id;
}

EpisodeRecord read_episode(const fs::path& root, int episode_id) {
  const fs::path dir = episode_dir(root, episode_id);
  if (!fs::is_directory(dir)) throw Error(ErrorCode::IOFailure, "no episode at " + dir.string());
  EpisodeRecord r;
  const json meta = read_json(dir / "meta.json");
  r.meta = meta_from_json(meta);
  const std::int64_t T = meta.value("length", -1);

  std::vector<std::int64_t> shape;
  auto q = read_array<float>(dir, "q", "float32", shape);
  if (shape != std::vector<std::int64_t>{T, 4}) throw Error(ErrorCode::SchemaViolation, "q shape mismatch");
  r.q = Eigen::Map<RowMatrixXf>(q.data(), T, 4);
  auto grip = read_array<float>(dir, "grip", "float32", shape);
  if (shape != std::vector<std::int64_t>{T}) throw Error(ErrorCode::SchemaViolation, "grip shape mismatch");
  r.grip = Eigen::Map<Eigen::VectorXf>(grip.data(), T);
  auto actions = read_array<float>(dir, "actions", "float32", shape);
  if (shape != std::vector<std::int64_t>{T, 5}) throw Error(ErrorCode::SchemaViolation, "actions shape mismatch");
  r.actions = Eigen::Map<RowMatrixXf>(actions.data(), T, 5);
  for (const auto& cam : r.meta.cameras) {
    r.images[cam] = read_array<std::uint8_t>(dir, "images_" + cam, "uint8", shape);
    if (shape != std::vector<std::int64_t>{T, r.meta.image_height, r.meta.image_width, 3})
      throw Error(ErrorCode::SchemaViolation, "image shape mismatch for " + cam);
  }
  r.validate();
  return r;
}

Eigen::MatrixXd NormStats::normalize_q(const Eigen::MatrixXd& q) const {
  return (q.rowwise() - q_mean.transpose()).array().rowwise() / q_std.transpose().array();
}
Eigen::MatrixXd NormStats::denormalize_q(const Eigen::MatrixXd& q) const {
  return (q.array().rowwise() * q_std.transpose().array()).matrix().rowwise() + q_mean.transpose();
}
Eigen::MatrixXd NormStats::normalize_actions(const Eigen::MatrixXd& a) const {
  return (a.rowwise() - action_mean.transpose()).array().rowwise() / action_std.transpose().array();
}
Eigen::MatrixXd NormStats::denormalize_actions(const Eigen::MatrixXd& a) const {
  return (a.array().rowwise() * action_std.transpose().array()).matrix().rowwise() + action_mean.transpose();
}
Eigen::MatrixXd NormStats::normalize_end_poses(const Eigen::MatrixXd& e) const {
  return (e.rowwise() - ep_mean.transpose()).array().rowwise() / ep_std.transpose().array();
}
Eigen::MatrixXd NormStats::denormalize_end_poses(const Eigen::MatrixXd& e) const {
  return (e.array().rowwise() * ep_std.transpose().array()).matrix().rowwise() + ep_mean.transpose();
}

json NormStats::to_json() const {
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return json{{"q_mean", vec(q_mean)},   {"q_std", vec(q_std)},   {"action_mean", vec(action_mean)},
              {"action_std", vec(action_std)}, {"ep_mean", vec(ep_mean)}, {"ep_std", vec(ep_std)}};
}

NormStats NormStats::from_json(const json& j) {
  auto vec = [&](const char* key, int n) {
    const auto v = j.at(key).get<std::vector<double>>();
    if (int(v.size()) != n) throw Error(ErrorCode::SchemaViolation, std::string("norm stats ") + key + " has wrong size");
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), n));
  };
  try {
    NormStats s;
    s.q_mean = vec("q_mean", 4);
    s.q_std = vec("q_std", 4);
    s.action_mean = vec("action_mean", 5);
    s.action_std = vec("action_std", 5);
    s.ep_mean = vec("ep_mean", 6);
    s.ep_std = vec("ep_std", 6);
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SchemaViolation, std::string("norm stats: ") + e.what());
  }
}

NormStats compute_norm_stats(const std::vector<const EpisodeRecord*>& episodes, const ScaraParams& arm,
                             EndPoseSource source) {
  if (episodes.empty()) throw Error(ErrorCode::EmptySplit, "no episodes to compute statistics over");
  Eigen::Index total = 0;
  for (const auto* e : episodes) total += e->length();
  Eigen::MatrixXd q(total, 4), a(total, 5), ep(total, 6);
  Eigen::Index row = 0;
  for (const auto* e : episodes) {
    const Eigen::Index T = e->length();
    q.middleRows(row, T) = e->q.cast<double>();
    a.middleRows(row, T) = e->actions.cast<double>();
    const Eigen::MatrixXd joints =
        source == EndPoseSource::Action ? Eigen::MatrixXd(e->actions.leftCols(4).cast<double>()) : Eigen::MatrixXd(e->q.cast<double>());
    ep.middleRows(row, T) = end_pose_matrix(joints, arm);
    row += T;
  }
  NormStats s;
  s.q_mean = q.colwise().mean().transpose();
  s.q_std = floored_std(q, s.q_mean);
  s.action_mean = a.colwise().mean().transpose();
  s.action_std = floored_std(a, s.action_mean);
  // The gripper keeps its [0, 1] open/close meaning.
  s.action_mean(4) = 0.0;
  s.action_std(4) = 1.0;
  s.ep_mean = ep.colwise().mean().transpose();
  s.ep_std = floored_std(ep, s.ep_mean);
  return s;
}

NormStats compute_norm_stats(const fs::path& root, const std::vector<int>& ids, const ScaraParams& arm,
                             EndPoseSource source) {
  if (ids.empty()) throw Error(ErrorCode::EmptySplit, "split is empty");
  std::vector<EpisodeRecord> records;
  records.reserve(ids.size());
  for (int id : ids) records.push_back(read_episode(root, id));
  std::vector<const EpisodeRecord*> ptrs;
  for (const auto& r : records) ptrs.push_back(&r);
  return compute_norm_stats(ptrs, arm, source);
}

ChunkSample sample_chunk(const EpisodeRecord& record, int t, int k, const std::vector<std::string>& cameras,
                         const NormStats& stats, const ScaraParams& arm, EndPoseSource source) {
  const int T = record.length();
  if (t < 0 || t >= T) throw Error(ErrorCode::BadIndex, "t = " + std::to_string(t) + " outside [0, " + std::to_string(T) + ")");
  if (k < 1) throw Error(ErrorCode::BadIndex, "chunk size must be >= 1");
  ChunkSample s;
  s.t = t;
  for (const auto& cam : cameras) s.images.emplace(cam, record.image(cam, t));
  s.q = stats.normalize_q(record.q.row(t).cast<double>()).transpose();

  Eigen::MatrixXd raw(k, 5), joints_for_pose(k, 4);
  s.pad_mask.assign(k, false);
  for (int i = 0; i < k; ++i) {
    const int src = std::min(t + i, T - 1);
    s.pad_mask[i] = t + i >= T;
    raw.row(i) = record.actions.row(src).cast<double>();
    joints_for_pose.row(i) = source == EndPoseSource::Action ? Eigen::RowVector4d(record.actions.row(src).leftCols(4).cast<double>())
                                                             : Eigen::RowVector4d(record.q.row(src).cast<double>());
  }
  s.action_chunk = stats.normalize_actions(raw);
  s.end_pose_chunk = stats.normalize_end_poses(end_pose_matrix(joints_for_pose, arm));
  return s;
}

Split split_train_val(const std::vector<int>& ids, int n_val, std::uint64_t seed) {
  if (n_val < 0 || std::size_t(n_val) >= ids.size())
    throw Error(ErrorCode::TooFewEpisodes, "need more than " + std::to_string(n_val) + " episodes, have " + std::to_string(ids.size()));
  std::vector<int> order(ids);
  std::sort(order.begin(), order.end());
  Rng rng(derive_seed(seed, {0x5911}));
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    const std::size_t j = std::size_t(rng() % (i + 1));
    std::swap(order[i], order[j]);
  }
  Split split;
  split.val.assign(order.begin(), order.begin() + n_val);
  split.train.assign(order.begin() + n_val, order.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

Split split_train_val(const fs::path& root, int n_val, std::uint64_t seed) {
  return split_train_val(list_episodes(root), n_val, seed);
}

}  // namespace epact
