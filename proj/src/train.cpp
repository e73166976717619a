#include "epact/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "epact/errors.hpp"
#include "epact/random.hpp"

namespace epact {

namespace fs = std::filesystem;
using nn::Mat;
using nn::ParamSet;
using nn::RowVec;

AdamW::AdamW(const ParamSet<float>& like, double lr, double weight_decay, double beta1, double beta2, double eps)
    : m_(like.zeros_like()), v_(like.zeros_like()), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(ParamSet<float>& params, const ParamSet<float>& grad) {
  ++t_;
  const float b1 = float(b1_), b2 = float(b2_);
  const float c1 = float(1.0 - std::pow(b1_, t_)), c2 = float(1.0 - std::pow(b2_, t_));
  const float lr = float(lr_), decay = float(1.0 - lr_ * wd_), eps = float(eps_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto m = m_[i].array();
    auto v = v_[i].array();
    const auto g = grad[i].array();
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.square();
    params[i].array() = params[i].array() * decay - lr * (m / c1) / ((v / c2).sqrt() + eps);
  }
}

double scheduled_lr(const PolicyConfig& config, int step) {
  double lr = config.lr;
  if (config.warmup_steps > 0 && step <= config.warmup_steps) return lr * step / config.warmup_steps;
  if (config.cosine_decay && config.steps > config.warmup_steps) {
    const double progress = double(step - config.warmup_steps) / double(config.steps - config.warmup_steps);
    lr *= 0.5 * (1.0 + std::cos(M_PI * std::min(progress, 1.0)));
  }
  return lr;
}

double clip_grad_norm(ParamSet<float>& grad, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) sq += grad[i].cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) grad.scale(float(max_norm / norm));
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IOFailure, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IOFailure, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SchemaViolation, path.string() + ": " + e.what());
  }
}

}  // namespace

void write_loss_log(const std::vector<LossRow>& rows, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IOFailure, "cannot write " + path.string());
  out << "step,rec_action,reg,rec_end_pose,total,val_total\n";
  out << std::setprecision(9);
  for (const auto& r : rows)
    out << r.step << ',' << r.train.rec_action << ',' << r.train.reg << ',' << r.train.rec_end_pose << ','
        << r.train.total << ',' << r.val_total << '\n';
}

std::vector<LossRow> read_loss_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IOFailure, "cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<LossRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    LossRow r;
    if (!(ss >> r.step >> r.train.rec_action >> r.train.reg >> r.train.rec_end_pose >> r.train.total >> r.val_total))
      throw Error(ErrorCode::SchemaViolation, "malformed loss log row in " + path.string());
    rows.push_back(r);
  }
  return rows;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IOFailure, "cannot create " + dir.string() + ": " + ec.message());

  nlohmann::json index = nlohmann::json::array();
  std::ofstream bin(dir / "weights.bin", std::ios::binary);
  if (!bin) throw Error(ErrorCode::IOFailure, "cannot write " + (dir / "weights.bin").string());
  std::size_t offset = 0;
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    // Row-major on disk so the blob reads naturally as out x in matrices.
    const nn::Mat<float>& m = ckpt.params[i];
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    bin.write(reinterpret_cast<const char*>(rm.data()), std::streamsize(rm.size() * sizeof(float)));
    index.push_back({{"name", ckpt.params.name(i)}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
    offset += std::size_t(m.size());
  }
  if (!bin) throw Error(ErrorCode::IOFailure, "short write to weights.bin");
  write_json({{"dtype", "float32"}, {"byte_order", "little"}, {"numel", offset}, {"tensors", index}},
             dir / "weights.json");
  write_json(ckpt.config.to_json(), dir / "config.json");
  write_json(ckpt.stats.to_json(), dir / "norm_stats.json");
  write_json(ckpt.meta, dir / "meta.json");
  write_loss_log(ckpt.history, dir / "loss_log.csv");
}

Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::IOFailure, "checkpoint directory " + dir.string() + " not found");
  Checkpoint ckpt;
  ckpt.config = PolicyConfig::from_json(read_json(dir / "config.json"));
  ckpt.stats = NormStats::from_json(read_json(dir / "norm_stats.json"));
  if (fs::exists(dir / "meta.json")) ckpt.meta = read_json(dir / "meta.json");
  if (fs::exists(dir / "loss_log.csv")) ckpt.history = read_loss_log(dir / "loss_log.csv");

  ParamSet<double> layout;
  PolicyNet::create(ckpt.config, 0, layout);
  const nlohmann::json index = read_json(dir / "weights.json");
  const auto& tensors = index.at("tensors");
  if (tensors.size() != layout.size())
    throw Error(ErrorCode::SchemaViolation, "weights.json lists " + std::to_string(tensors.size()) +
                                                " tensors, config expects " + std::to_string(layout.size()));
  std::ifstream bin(dir / "weights.bin", std::ios::binary);
  if (!bin) throw Error(ErrorCode::IOFailure, "cannot read weights.bin");
  std::vector<float> blob(layout.numel());
  bin.read(reinterpret_cast<char*>(blob.data()), std::streamsize(blob.size() * sizeof(float)));
  if (std::size_t(bin.gcount()) != blob.size() * sizeof(float) || bin.peek() != EOF)
    throw Error(ErrorCode::SchemaViolation, "weights.bin size does not match the configuration");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& t = tensors[i];
    const auto rows = t.at("shape")[0].get<Eigen::Index>(), cols = t.at("shape")[1].get<Eigen::Index>();
    const auto off = t.at("offset").get<std::size_t>();
    if (t.at("name").get<std::string>() != layout.name(i) || rows != layout[i].rows() || cols != layout[i].cols() ||
        off + std::size_t(rows * cols) > blob.size())
      throw Error(ErrorCode::SchemaViolation, "tensor " + layout.name(i) + " does not match the configuration");
    nn::Mat<float> m = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        blob.data() + off, rows, cols);
    ckpt.params.add(layout.name(i), std::move(m));
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Training

namespace {

ChunkTarget<float> make_target(const ChunkSample& s) {
  return {s.action_chunk.cast<float>(), s.end_pose_chunk.cast<float>(), s.pad_mask};
}

std::vector<int> val_times(int T) { return {0, T / 4, T / 2, 3 * T / 4}; }

}  // namespace

TrainingData load_training_data(const PolicyConfig& config, const fs::path& dataset, const TrainOptions& opts) {
  config.validate();
  std::vector<int> ids;
  for (int id : list_episodes(dataset)) {
    if (!opts.states.empty()) {
      const auto meta = read_json(episode_dir(dataset, id) / "meta.json");
      if (std::find(opts.states.begin(), opts.states.end(), meta.value("state_id", -1)) == opts.states.end()) continue;
    }
    ids.push_back(id);
  }
  if (ids.empty()) throw Error(ErrorCode::EmptySplit, "no training episodes in " + dataset.string());
  TrainingData data;
  const Split split = split_train_val(ids, config.n_val, derive_seed(config.seed, {0x5b1}));
  data.train_ids = split.train;
  data.val_ids = split.val;
  for (int id : split.train) data.train.push_back(read_episode(dataset, id));
  for (int id : split.val) data.val.push_back(read_episode(dataset, id));
  for (const auto* group : {&data.train, &data.val})
    for (const auto& ep : *group) {
      for (const auto& cam : config.cameras)
        if (!ep.images.count(cam))
          throw Error(ErrorCode::ShapeMismatch, "episode lacks camera " + cam);
      if (ep.meta.image_width != config.image_width || ep.meta.image_height != config.image_height)
        throw Error(ErrorCode::ShapeMismatch, "episode images are " + std::to_string(ep.meta.image_width) + "x" +
                                                  std::to_string(ep.meta.image_height) + ", policy expects " +
                                                  std::to_string(config.image_width) + "x" +
                                                  std::to_string(config.image_height));
    }
  std::vector<const EpisodeRecord*> ptrs;
  for (const auto& ep : data.train) ptrs.push_back(&ep);
  data.stats = compute_norm_stats(ptrs, opts.arm);
  return data;
}

LossBreakdown validation_loss(const PolicyNet& net, const ParamSet<float>& params, const TrainingData& data,
                              const ScaraParams& arm) {
  const PolicyConfig& cfg = net.config();
  const auto& episodes = data.val.empty() ? data.train : data.val;
  const RowVec<float> zero = RowVec<float>::Zero(cfg.latent_dim);
  LossBreakdown sum;
  int n = 0;
  for (const auto& ep : episodes)
    for (int t : val_times(ep.length())) {
      const ChunkSample s = sample_chunk(ep, t, cfg.chunk, cfg.cameras, data.stats, arm);
      sum += net.loss_and_grad<float>(params, make_input<float>(s.images, s.q, cfg), make_target(s), zero, nullptr);
      ++n;
    }
  return sum.scaled(1.0 / std::max(n, 1));
}

Checkpoint train_policy(const PolicyConfig& config, const fs::path& dataset, const TrainOptions& opts) {
  const TrainingData data = load_training_data(config, dataset, opts);
  Checkpoint ckpt = train_policy(config, data, opts);
  ckpt.meta["dataset"] = fs::absolute(dataset).lexically_normal().string();
  return ckpt;
}

Checkpoint train_policy(const PolicyConfig& config, const TrainingData& data, const TrainOptions& opts) {
  config.validate();
  if (data.train.empty()) throw Error(ErrorCode::EmptySplit, "no training episodes");
  ParamSet<double> init;
  const PolicyNet net = PolicyNet::create(config, config.seed, init);
  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.stats = data.stats;
  ckpt.params = init.cast<float>();
  ckpt.meta = {{"train_episodes", data.train_ids}, {"val_episodes", data.val_ids}, {"states", opts.states}};

  AdamW opt(ckpt.params, config.lr, config.weight_decay);
  ParamSet<float> grad = ckpt.params.zeros_like();
  Rng rng(derive_seed(config.seed, {0x7a1}));
  std::normal_distribution<float> normal(0.0f, 1.0f);
  LossBreakdown window;
  int window_n = 0;

  for (int step = 1; step <= config.steps; ++step) {
    grad.set_zero();
    LossBreakdown batch;
    for (int b = 0; b < config.batch; ++b) {
      const EpisodeRecord& ep = data.train[std::size_t(rng() % data.train.size())];
      const int t = int(rng() % std::uint64_t(ep.length()));
      const ChunkSample s = sample_chunk(ep, t, config.chunk, config.cameras, data.stats, opts.arm);
      RowVec<float> eps(config.latent_dim);
      for (int i = 0; i < config.latent_dim; ++i) eps(i) = normal(rng);
      batch += net.loss_and_grad<float>(ckpt.params, make_input<float>(s.images, s.q, config), make_target(s), eps,
                                        &grad, 1.0f / float(config.batch));
    }
    batch = batch.scaled(1.0 / config.batch);
    if (!std::isfinite(batch.total) || !grad.all_finite()) {
      std::ostringstream msg;
      msg << "step " << step << ": rec_action=" << batch.rec_action << " reg=" << batch.reg
          << " rec_end_pose=" << batch.rec_end_pose << " total=" << batch.total
          << (grad.all_finite() ? "" : " (non-finite gradient)");
      throw Error(ErrorCode::NonFiniteLoss, msg.str());
    }
    clip_grad_norm(grad, config.grad_clip);
    opt.set_lr(scheduled_lr(config, step));
    opt.step(ckpt.params, grad);
    window += batch;
    ++window_n;

    if (step % config.log_every == 0 || step == config.steps) {
      LossRow row;
      row.step = step;
      row.train = window.scaled(1.0 / window_n);
      // Recompute the total so the logged columns satisfy the objective exactly.
      row.train.total = row.train.rec_action + config.beta * row.train.reg + config.gamma * row.train.rec_end_pose;
      row.val_total = validation_loss(net, ckpt.params, data, opts.arm).total;
      ckpt.history.push_back(row);
      if (opts.on_log) opts.on_log(row);
      window = {};
      window_n = 0;
    }
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Inference

Policy::Policy(Checkpoint ckpt) : ckpt_(std::move(ckpt)), net_(ckpt_.config) {
  ParamSet<double> layout;
  PolicyNet::create(ckpt_.config, 0, layout);
  if (!ckpt_.params.cast<double>().same_layout(layout))
    throw Error(ErrorCode::SchemaViolation, "checkpoint weights do not match the policy configuration");
}

Policy::Prediction Policy::predict(const Observation& obs) const { return predict(obs.images, obs.q); }

Policy::Prediction Policy::predict(const std::map<std::string, ImageRGB>& images, const JointState& q) const {
  const Eigen::VectorXd qn = ckpt_.stats.normalize_q(q.vector().transpose()).transpose();
  const auto in = make_input<float>(images, qn, ckpt_.config);
  const RowVec<float> z = RowVec<float>::Zero(ckpt_.config.latent_dim);
  const auto bundle = net_.predict<float>(ckpt_.params, in, z);
  Prediction out;
  out.actions = ckpt_.stats.denormalize_actions(bundle.actions.cast<double>());
  if (bundle.end_poses) out.end_poses = ckpt_.stats.denormalize_end_poses(bundle.end_poses->cast<double>());
  return out;
}

double measure_inference_ms(const Policy& policy, int n_warm, int n_meas) {
  const PolicyConfig& cfg = policy.config();
  std::map<std::string, ImageRGB> images;
  for (const auto& cam : cfg.cameras) images.emplace(cam, ImageRGB(cfg.image_width, cfg.image_height, {92, 76, 60}));
  const JointState q{};
  for (int i = 0; i < n_warm; ++i) policy.predict(images, q);
  if (n_meas <= 0) return 0.0;
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < n_meas; ++i) policy.predict(images, q);
  const std::chrono::duration<double, std::milli> elapsed = std::chrono::steady_clock::now() - start;
  return elapsed.count() / n_meas;
}

}  // namespace epact
