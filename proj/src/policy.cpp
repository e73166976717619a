#include "epact/policy.hpp"

#include <algorithm>
#include <cmath>

#include "epact/errors.hpp"
#include "epact/random.hpp"

namespace epact {

using nn::Mat;
using nn::ParamSet;
using nn::RowVec;

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Act: return "act";
    case Variant::EpactL: return "epact_l";
    case Variant::EpactEE: return "epact_ee";
  }
  return "act";
}

Variant variant_from_name(const std::string& name) {
  std::string n = name;
  std::replace(n.begin(), n.end(), '-', '_');
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  if (n == "act") return Variant::Act;
  if (n == "epact_l") return Variant::EpactL;
  if (n == "epact_ee") return Variant::EpactEE;
  throw Error(ErrorCode::UnknownVariant, "unknown variant '" + name + "'");
}

std::string fusion_name(Fusion f) { return f == Fusion::Add ? "add" : "concat"; }

Fusion fusion_from_name(const std::string& name) {
  if (name == "concat") return Fusion::Concat;
  if (name == "add") return Fusion::Add;
  throw Error(ErrorCode::InvalidConfig, "unknown fusion '" + name + "'");
}

void PolicyConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidConfig, msg); };
  if (chunk < 1) fail("chunk must be >= 1");
  if (latent_dim < 1) fail("latent_dim must be >= 1");
  if (beta < 0.0 || gamma < 0.0) fail("beta and gamma must be >= 0");
  if (cameras.empty()) fail("at least one camera is required");
  for (const auto& c : cameras) {
    if (c != "wrist_up" && c != "wrist_down") fail("unknown camera '" + c + "'");
    if (std::count(cameras.begin(), cameras.end(), c) > 1) fail("duplicate camera '" + c + "'");
  }
  if (width < 2 || heads < 1 || width % heads != 0) fail("width must be a positive multiple of heads");
  if (encoder_layers < 1 || decoder_layers < 1 || cvae_layers < 1) fail("layer counts must be >= 1");
  if (ffn_dim < 1 || ik_hidden < 1) fail("hidden sizes must be >= 1");
  if (backbone.empty()) fail("backbone needs at least one block");
  for (int c : backbone)
    if (c < 1) fail("backbone channels must be >= 1");
  if (image_width < 1 || image_height < 1) fail("image size must be positive");
  if (lr <= 0.0 || weight_decay < 0.0 || grad_clip < 0.0) fail("invalid optimizer settings");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (steps < 0 || batch < 1 || n_val < 0 || log_every < 1) fail("invalid training schedule");
}

nlohmann::json PolicyConfig::to_json() const {
  return {{"variant", variant_name(variant)},
          {"cameras", cameras},
          {"chunk", chunk},
          {"latent_dim", latent_dim},
          {"width", width},
          {"encoder_layers", encoder_layers},
          {"decoder_layers", decoder_layers},
          {"cvae_layers", cvae_layers},
          {"heads", heads},
          {"ffn_dim", ffn_dim},
          {"backbone", backbone},
          {"image_width", image_width},
          {"image_height", image_height},
          {"ik_hidden", ik_hidden},
          {"fusion", fusion_name(fusion)},
          {"stop_end_pose_grad", stop_end_pose_grad},
          {"beta", beta},
          {"gamma", gamma},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"grad_clip", grad_clip},
          {"warmup_steps", warmup_steps},
          {"cosine_decay", cosine_decay},
          {"steps", steps},
          {"batch", batch},
          {"n_val", n_val},
          {"log_every", log_every},
          {"seed", seed}};
}

PolicyConfig PolicyConfig::from_json(const nlohmann::json& j) {
  PolicyConfig c;
  try {
    c.variant = variant_from_name(j.value("variant", variant_name(c.variant)));
    c.cameras = j.value("cameras", c.cameras);
    c.chunk = j.value("chunk", c.chunk);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.width = j.value("width", c.width);
    c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
    c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
    c.cvae_layers = j.value("cvae_layers", c.cvae_layers);
    c.heads = j.value("heads", c.heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.backbone = j.value("backbone", c.backbone);
    c.image_width = j.value("image_width", c.image_width);
    c.image_height = j.value("image_height", c.image_height);
    c.ik_hidden = j.value("ik_hidden", c.ik_hidden);
    c.fusion = fusion_from_name(j.value("fusion", fusion_name(c.fusion)));
    c.stop_end_pose_grad = j.value("stop_end_pose_grad", c.stop_end_pose_grad);
    c.beta = j.value("beta", c.beta);
    c.gamma = j.value("gamma", c.gamma);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.cosine_decay = j.value("cosine_decay", c.cosine_decay);
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.n_val = j.value("n_val", c.n_val);
    c.log_every = j.value("log_every", c.log_every);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, std::string("policy config: ") + e.what());
  }
  c.validate();
  return c;
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  rec_action += o.rec_action;
  reg += o.reg;
  rec_end_pose += o.rec_end_pose;
  total += o.total;
  return *this;
}

LossBreakdown LossBreakdown::scaled(double s) const { return {rec_action * s, reg * s, rec_end_pose * s, total * s}; }

template <typename S>
PolicyInput<S> make_input(const std::map<std::string, ImageRGB>& images, const Eigen::VectorXd& q_norm,
                          const PolicyConfig& config) {
  if (q_norm.size() != 4) throw Error(ErrorCode::ShapeMismatch, "joint state must have 4 entries");
  PolicyInput<S> in;
  in.q = q_norm.transpose().cast<S>();
  for (const auto& cam : config.cameras) {
    const auto it = images.find(cam);
    if (it == images.end()) throw Error(ErrorCode::ShapeMismatch, "observation lacks camera " + cam);
    const ImageRGB& img = it->second;
    if (img.width != config.image_width || img.height != config.image_height)
      throw Error(ErrorCode::ShapeMismatch, "camera " + cam + " resolution " + std::to_string(img.width) + "x" +
                                                std::to_string(img.height) + " does not match the policy");
    Mat<S> m(img.width * img.height, 3);
    for (int i = 0; i < img.width * img.height; ++i)
      for (int c = 0; c < 3; ++c) m(i, c) = S(img.data[std::size_t(i) * 3 + c]) / S(255) - S(0.5);
    in.images.push_back(std::move(m));
  }
  return in;
}

template <typename S>
double kl_divergence(const RowVec<S>& mu, const RowVec<S>& logvar) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    const double m = mu(i), lv = logvar(i);
    kl += -0.5 * (1.0 + lv - m * m - std::exp(lv));
  }
  return kl;
}

namespace {

int valid_steps(const std::vector<bool>& pad) {
  return int(std::count(pad.begin(), pad.end(), false));
}

template <typename S>
void check_target(const ChunkTarget<S>& t, int k, bool needs_end_pose) {
  if (t.actions.rows() != k || t.actions.cols() != 5 || int(t.pad.size()) != k)
    throw Error(ErrorCode::ShapeMismatch, "target chunk must be " + std::to_string(k) + "x5 with a matching mask");
  if (needs_end_pose && (t.end_poses.rows() != k || t.end_poses.cols() != 6))
    throw Error(ErrorCode::ShapeMismatch, "target end poses must be " + std::to_string(k) + "x6");
  if (valid_steps(t.pad) == 0) throw Error(ErrorCode::ShapeMismatch, "target chunk is fully padded");
}

/// Masked mean absolute error and its gradient with respect to `pred`.
template <typename S>
double masked_l1(const Mat<S>& pred, const Mat<S>& target, const std::vector<bool>& pad, Mat<S>* grad) {
  const int n = valid_steps(pad);
  const double denom = double(n) * double(pred.cols());
  double sum = 0.0;
  if (grad) grad->setZero(pred.rows(), pred.cols());
  for (Eigen::Index r = 0; r < pred.rows(); ++r) {
    if (pad[std::size_t(r)]) continue;
    for (Eigen::Index c = 0; c < pred.cols(); ++c) {
      const double d = double(pred(r, c)) - double(target(r, c));
      sum += std::abs(d);
      if (grad) (*grad)(r, c) = S((d > 0.0) - (d < 0.0)) / S(denom);
    }
  }
  return sum / denom;
}

template <typename S>
Mat<S> broadcast_row(const Mat<S>& row, Eigen::Index rows) {
  return row.replicate(rows, 1);
}

template <typename S>
struct ObsCache {
  std::vector<typename nn::ConvBackbone::template Cache<S>> backbone;
  std::vector<Mat<S>> features;
  Mat<S> q, z;
  std::vector<typename nn::EncoderLayer::template Cache<S>> encoder;
  typename nn::LayerNorm::template Cache<S> encoder_norm;
  Mat<S> memory;
  std::vector<typename nn::DecoderLayer::template Cache<S>> decoder;
  typename nn::LayerNorm::template Cache<S> decoder_norm;
};

template <typename S>
struct HeadCache {
  Mat<S> hidden, gripper_hidden, end_pose, fusion_in;
  typename nn::Mlp::template Cache<S> mlp;
};

template <typename S>
struct CvaeCache {
  Mat<S> q, actions;
  std::vector<typename nn::EncoderLayer::template Cache<S>> layers;
  Mat<S> cls_out;
};

}  // namespace

template <typename S>
LossBreakdown compute_loss(const PredictionBundle<S>& pred, const ChunkTarget<S>& target, const LatentCode<S>* latent,
                           const PolicyConfig& config) {
  check_target(target, int(pred.actions.rows()), config.has_end_pose());
  if (pred.actions.cols() != 5) throw Error(ErrorCode::ShapeMismatch, "predicted actions must have 5 columns");
  LossBreakdown l;
  l.rec_action = masked_l1<S>(pred.actions, target.actions, target.pad, nullptr);
  if (config.has_end_pose()) {
    if (!pred.end_poses || pred.end_poses->rows() != pred.actions.rows() || pred.end_poses->cols() != 6)
      throw Error(ErrorCode::ShapeMismatch, "prediction lacks a k x 6 end-pose chunk");
    l.rec_end_pose = masked_l1<S>(*pred.end_poses, target.end_poses, target.pad, nullptr);
  }
  if (latent) l.reg = kl_divergence<S>(latent->mu, latent->logvar);
  l.total = l.rec_action + config.beta * l.reg + config.gamma * l.rec_end_pose;
  return l;
}

// ---------------------------------------------------------------------------
// Construction

PolicyNet::PolicyNet(const PolicyConfig& config) {
  ParamSet<double> scratch;
  std::mt19937_64 rng(0);
  nn::ParamBuilder pb(scratch, rng);
  build(config, pb);
}

PolicyNet PolicyNet::create(const PolicyConfig& config, std::uint64_t seed, ParamSet<double>& params) {
  params = ParamSet<double>();
  std::mt19937_64 rng(derive_seed(seed, {0x90}));
  nn::ParamBuilder pb(params, rng);
  PolicyNet net;
  net.build(config, pb);
  return net;
}

void PolicyNet::build(const PolicyConfig& config, nn::ParamBuilder& pb) {
  config.validate();
  config_ = config;
  const int w = config.width;
  const int k = config.chunk;
  const double embed_sigma = 0.02;

  const auto [fh, fw] = nn::ConvBackbone::output_size(config.backbone.size(), config.image_height, config.image_width);
  feature_h = fh;
  feature_w = fw;
  image_pos = nn::sinusoid_2d<double>(fh, fw, w);
  cvae_pos = nn::sinusoid_1d<double>(k + 2, w);

  for (const auto& cam : config.cameras) {
    nn::ParamBuilder::Scope scope(pb, cam);
    backbones.push_back(nn::ConvBackbone::make(pb, "backbone", 3, config.backbone));
    feature_proj.push_back(nn::Linear::make(pb, "proj", config.backbone.back(), w));
    camera_embed.push_back(pb.normal("embed", 1, w, embed_sigma));
  }
  {
    nn::ParamBuilder::Scope scope(pb, "obs");
    q_proj = nn::Linear::make(pb, "q_proj", 4, w);
    z_proj = nn::Linear::make(pb, "z_proj", config.latent_dim, w);
    q_pos = pb.normal("q_pos", 1, w, embed_sigma);
    z_pos = pb.normal("z_pos", 1, w, embed_sigma);
    for (int i = 0; i < config.encoder_layers; ++i)
      encoder.push_back(nn::EncoderLayer::make(pb, "enc" + std::to_string(i), w, config.heads, config.ffn_dim));
    encoder_norm = nn::LayerNorm::make(pb, "enc_norm", w);
    queries = pb.normal("queries", k, w, 1.0);
    for (int i = 0; i < config.decoder_layers; ++i)
      decoder.push_back(nn::DecoderLayer::make(pb, "dec" + std::to_string(i), w, config.heads, config.ffn_dim));
    decoder_norm = nn::LayerNorm::make(pb, "dec_norm", w);
  }
  {
    nn::ParamBuilder::Scope scope(pb, "cvae");
    cvae_cls = pb.normal("cls", 1, w, embed_sigma);
    cvae_q_proj = nn::Linear::make(pb, "q_proj", 4, w);
    cvae_action_proj = nn::Linear::make(pb, "action_proj", 5, w);
    for (int i = 0; i < config.cvae_layers; ++i)
      cvae_encoder.push_back(nn::EncoderLayer::make(pb, "enc" + std::to_string(i), w, config.heads, config.ffn_dim));
    cvae_out = nn::Linear::make(pb, "out", w, 2 * config.latent_dim);
  }
  {
    nn::ParamBuilder::Scope scope(pb, "head");
    switch (config.variant) {
      case Variant::Act:
        action_head = nn::Linear::make(pb, "action", w, 5);
        break;
      case Variant::EpactL:
        end_pose_head = nn::Linear::make(pb, "end_pose", w, 6);
        if (config.fusion == Fusion::Concat) {
          fusion = nn::Mlp::make(pb, "fusion", {6 + w, w, 5});
        } else {
          end_pose_embed = nn::Linear::make(pb, "end_pose_embed", 6, w);
          fusion = nn::Mlp::make(pb, "fusion", {w, w, 5});
        }
        break;
      case Variant::EpactEE:
        end_pose_head = nn::Linear::make(pb, "end_pose", w, 6);
        ik = nn::Mlp::make(pb, "ik", {6, config.ik_hidden, config.ik_hidden, 4});
        grip_head = nn::Linear::make(pb, "grip", w, 1);
        break;
    }
  }
}

std::vector<std::size_t> PolicyNet::gripper_branch_parameters() const {
  std::vector<std::size_t> out;
  auto add_linear = [&](const nn::Linear& l) {
    out.push_back(l.w);
    out.push_back(l.b);
  };
  switch (config_.variant) {
    case Variant::Act:
      add_linear(action_head);
      break;
    case Variant::EpactL:
      // The fused head emits the gripper channel from [ê, h].
      add_linear(end_pose_head);
      if (config_.fusion == Fusion::Add) add_linear(end_pose_embed);
      for (const auto& l : fusion.layers) add_linear(l);
      break;
    case Variant::EpactEE:
      add_linear(grip_head);
      break;
  }
  return out;
}

std::size_t count_parameters(const PolicyConfig& config) {
  ParamSet<double> params;
  PolicyNet::create(config, 0, params);
  return params.numel();
}

// ---------------------------------------------------------------------------
// Forward / backward helpers

namespace {

template <typename S>
Mat<S> cvae_forward(const PolicyNet& net, const ParamSet<S>& p, const Mat<S>& actions, const RowVec<S>& q,
                    CvaeCache<S>* c) {
  const int k = net.config().chunk;
  if (actions.rows() != k || actions.cols() != 5)
    throw Error(ErrorCode::ShapeMismatch, "CVAE input chunk must be " + std::to_string(k) + "x5");
  const Mat<S> qm = q;
  Mat<S> tokens(k + 2, net.config().width);
  tokens.row(0) = p[net.cvae_cls];
  tokens.row(1) = net.cvae_q_proj.forward(p, qm);
  tokens.bottomRows(k) = net.cvae_action_proj.forward(p, actions);
  tokens += net.cvae_pos.cast<S>();
  if (c) {
    c->q = qm;
    c->actions = actions;
    c->layers.resize(net.cvae_encoder.size());
  }
  for (std::size_t i = 0; i < net.cvae_encoder.size(); ++i)
    tokens = net.cvae_encoder[i].forward(p, tokens, c ? &c->layers[i] : nullptr);
  Mat<S> cls = tokens.row(0);
  if (c) c->cls_out = cls;
  return net.cvae_out.forward(p, cls);  // 1 x 2 d_z
}

template <typename S>
void cvae_backward(const PolicyNet& net, const ParamSet<S>& p, const CvaeCache<S>& c, const Mat<S>& dstats,
                   ParamSet<S>& g) {
  const int k = net.config().chunk;
  Mat<S> dtokens = Mat<S>::Zero(k + 2, net.config().width);
  dtokens.row(0) = net.cvae_out.backward(p, c.cls_out, dstats, g);
  for (std::size_t i = net.cvae_encoder.size(); i-- > 0;) dtokens = net.cvae_encoder[i].backward(p, c.layers[i], dtokens, g);
  g[net.cvae_cls] += dtokens.row(0);
  net.cvae_q_proj.backward_params<S>(c.q, dtokens.row(1), g);
  net.cvae_action_proj.backward_params<S>(c.actions, dtokens.bottomRows(k), g);
}

template <typename S>
Mat<S> observation_forward(const PolicyNet& net, const ParamSet<S>& p, const PolicyInput<S>& in, const RowVec<S>& z,
                           ObsCache<S>* c) {
  const PolicyConfig& cfg = net.config();
  if (in.images.size() != cfg.cameras.size())
    throw Error(ErrorCode::ShapeMismatch, "expected " + std::to_string(cfg.cameras.size()) + " camera images");
  if (in.q.size() != 4) throw Error(ErrorCode::ShapeMismatch, "joint state must have 4 entries");
  if (z.size() != cfg.latent_dim) throw Error(ErrorCode::ShapeMismatch, "latent has the wrong dimension");
  const int n_img = net.feature_h * net.feature_w;
  const int n_tokens = 2 + int(cfg.cameras.size()) * n_img;
  Mat<S> tokens(n_tokens, cfg.width);
  const Mat<S> qm = in.q, zm = z;
  tokens.row(0) = net.q_proj.forward(p, qm) + p[net.q_pos];
  tokens.row(1) = net.z_proj.forward(p, zm) + p[net.z_pos];
  const Mat<S> pos = net.image_pos.cast<S>();
  if (c) {
    c->q = qm;
    c->z = zm;
    c->backbone.resize(cfg.cameras.size());
    c->features.resize(cfg.cameras.size());
  }
  for (std::size_t ci = 0; ci < cfg.cameras.size(); ++ci) {
    if (in.images[ci].rows() != cfg.image_width * cfg.image_height || in.images[ci].cols() != 3)
      throw Error(ErrorCode::ShapeMismatch, "image for camera " + cfg.cameras[ci] + " has the wrong size");
    Mat<S> feat = net.backbones[ci].forward(p, in.images[ci], cfg.image_height, cfg.image_width,
                                            c ? &c->backbone[ci] : nullptr);
    Mat<S> t = net.feature_proj[ci].forward(p, feat) + pos;
    t.rowwise() += p[net.camera_embed[ci]].row(0);
    tokens.middleRows(2 + Eigen::Index(ci) * n_img, n_img) = t;
    if (c) c->features[ci] = std::move(feat);
  }
  if (c) c->encoder.resize(net.encoder.size());
  for (std::size_t i = 0; i < net.encoder.size(); ++i)
    tokens = net.encoder[i].forward(p, tokens, c ? &c->encoder[i] : nullptr);
  Mat<S> memory = net.encoder_norm.forward(p, tokens, c ? &c->encoder_norm : nullptr);

  Mat<S> x = p[net.queries];
  if (c) c->decoder.resize(net.decoder.size());
  for (std::size_t i = 0; i < net.decoder.size(); ++i)
    x = net.decoder[i].forward(p, x, memory, c ? &c->decoder[i] : nullptr);
  if (c) c->memory = std::move(memory);
  return net.decoder_norm.forward(p, x, c ? &c->decoder_norm : nullptr);
}

/// Returns the gradient with respect to z.
template <typename S>
Mat<S> observation_backward(const PolicyNet& net, const ParamSet<S>& p, const ObsCache<S>& c, const Mat<S>& dhidden,
                            ParamSet<S>& g) {
  const PolicyConfig& cfg = net.config();
  Mat<S> dx = net.decoder_norm.backward(p, c.decoder_norm, dhidden, g);
  Mat<S> dmemory = Mat<S>::Zero(c.memory.rows(), c.memory.cols());
  for (std::size_t i = net.decoder.size(); i-- > 0;) dx = net.decoder[i].backward(p, c.decoder[i], dx, dmemory, g);
  g[net.queries] += dx;

  Mat<S> dtokens = net.encoder_norm.backward(p, c.encoder_norm, dmemory, g);
  for (std::size_t i = net.encoder.size(); i-- > 0;) dtokens = net.encoder[i].backward(p, c.encoder[i], dtokens, g);

  net.q_proj.backward_params<S>(c.q, dtokens.row(0), g);
  g[net.q_pos] += dtokens.row(0);
  g[net.z_pos] += dtokens.row(1);
  Mat<S> dz = net.z_proj.backward<S>(p, c.z, dtokens.row(1), g);

  const int n_img = net.feature_h * net.feature_w;
  for (std::size_t ci = 0; ci < cfg.cameras.size(); ++ci) {
    const Mat<S> dt = dtokens.middleRows(2 + Eigen::Index(ci) * n_img, n_img);
    g[net.camera_embed[ci]] += dt.colwise().sum();
    const Mat<S> dfeat = net.feature_proj[ci].backward(p, c.features[ci], dt, g);
    net.backbones[ci].backward(p, c.backbone[ci], dfeat, g);
  }
  return dz;
}

template <typename S>
PredictionBundle<S> heads_forward(const PolicyNet& net, const ParamSet<S>& p, const Mat<S>& hidden,
                                  const Mat<S>& gripper_hidden, HeadCache<S>* c) {
  const PolicyConfig& cfg = net.config();
  PredictionBundle<S> out;
  out.hidden = hidden;
  if (c) {
    c->hidden = hidden;
    c->gripper_hidden = gripper_hidden;
  }
  switch (cfg.variant) {
    case Variant::Act:
      out.actions = net.action_head.forward(p, hidden);
      break;
    case Variant::EpactL: {
      Mat<S> ep = net.end_pose_head.forward(p, hidden);
      Mat<S> fin;
      if (cfg.fusion == Fusion::Concat) {
        fin.resize(hidden.rows(), 6 + hidden.cols());
        fin << ep, hidden;
      } else {
        fin = hidden + net.end_pose_embed.forward(p, ep);
      }
      out.actions = net.fusion.forward(p, fin, c ? &c->mlp : nullptr);
      if (c) {
        c->end_pose = ep;
        c->fusion_in = std::move(fin);
      }
      out.end_poses = std::move(ep);
      break;
    }
    case Variant::EpactEE: {
      Mat<S> ep = net.end_pose_head.forward(p, hidden);
      const Mat<S> joints = net.ik.forward(p, ep, c ? &c->mlp : nullptr);
      const Mat<S> grip = net.grip_head.forward(p, gripper_hidden);
      out.actions.resize(hidden.rows(), 5);
      out.actions << joints, grip;
      if (c) c->end_pose = ep;
      out.end_poses = std::move(ep);
      break;
    }
  }
  return out;
}

/// Returns (d hidden, d gripper_hidden).
template <typename S>
std::pair<Mat<S>, Mat<S>> heads_backward(const PolicyNet& net, const ParamSet<S>& p, const HeadCache<S>& c,
                                         const Mat<S>& dactions, const Mat<S>& dend_pose, ParamSet<S>& g) {
  const PolicyConfig& cfg = net.config();
  const Eigen::Index k = c.hidden.rows(), w = c.hidden.cols();
  Mat<S> dgrip_hidden = Mat<S>::Zero(k, w);
  switch (cfg.variant) {
    case Variant::Act:
      return {net.action_head.backward(p, c.hidden, dactions, g), dgrip_hidden};
    case Variant::EpactL: {
      const Mat<S> dfin = net.fusion.backward(p, c.mlp, dactions, g);
      Mat<S> dh, dep = dend_pose;
      if (cfg.fusion == Fusion::Concat) {
        dh = dfin.rightCols(w);
        if (!cfg.stop_end_pose_grad) dep += dfin.leftCols(6);
      } else {
        dh = dfin;
        const Mat<S> d = net.end_pose_embed.backward(p, c.end_pose, dfin, g);
        if (!cfg.stop_end_pose_grad) dep += d;
      }
      dh += net.end_pose_head.backward(p, c.hidden, dep, g);
      return {dh, dgrip_hidden};
    }
    case Variant::EpactEE: {
      const Mat<S> dep = dend_pose + net.ik.backward<S>(p, c.mlp, dactions.leftCols(4), g);
      Mat<S> dh = net.end_pose_head.backward(p, c.hidden, dep, g);
      dgrip_hidden = net.grip_head.backward<S>(p, c.gripper_hidden, dactions.rightCols(1), g);
      return {dh, dgrip_hidden};
    }
  }
  return {Mat<S>::Zero(k, w), dgrip_hidden};
}

template <typename S>
LatentCode<S> split_latent(const Mat<S>& stats, int dz, const RowVec<S>& eps) {
  LatentCode<S> code;
  code.mu = stats.leftCols(dz);
  code.logvar = stats.rightCols(dz);
  code.z = code.mu.array() + (code.logvar.array() * S(0.5)).exp() * eps.array();
  return code;
}

}  // namespace

template <typename S>
LatentCode<S> PolicyNet::encode_latent(const ParamSet<S>& p, const Mat<S>& action_chunk, const RowVec<S>& q,
                                       const RowVec<S>& eps) const {
  if (eps.size() != config_.latent_dim) throw Error(ErrorCode::ShapeMismatch, "noise has the wrong dimension");
  return split_latent<S>(cvae_forward<S>(*this, p, action_chunk, q, nullptr), config_.latent_dim, eps);
}

template <typename S>
PredictionBundle<S> PolicyNet::predict(const ParamSet<S>& p, const PolicyInput<S>& in, const RowVec<S>& z) const {
  const Mat<S> hidden = observation_forward<S>(*this, p, in, z, nullptr);
  return heads_forward<S>(*this, p, hidden, hidden, nullptr);
}

template <typename S>
PredictionBundle<S> PolicyNet::apply_heads(const ParamSet<S>& p, const Mat<S>& hidden,
                                           const Mat<S>& gripper_hidden) const {
  if (hidden.cols() != config_.width || gripper_hidden.rows() != hidden.rows() ||
      gripper_hidden.cols() != hidden.cols())
    throw Error(ErrorCode::ShapeMismatch, "hidden states must be k x width");
  return heads_forward<S>(*this, p, hidden, gripper_hidden, nullptr);
}

template <typename S>
LossBreakdown PolicyNet::loss_and_grad(const ParamSet<S>& p, const PolicyInput<S>& in, const ChunkTarget<S>& target,
                                       const RowVec<S>& eps, ParamSet<S>* grad, S scale, LossTerms terms) const {
  const int dz = config_.latent_dim;
  if (eps.size() != dz) throw Error(ErrorCode::ShapeMismatch, "noise has the wrong dimension");
  check_target(target, config_.chunk, config_.has_end_pose());

  CvaeCache<S> cvae_cache;
  ObsCache<S> obs_cache;
  HeadCache<S> head_cache;
  const bool train = grad != nullptr;
  const Mat<S> stats = cvae_forward<S>(*this, p, target.actions, in.q, train ? &cvae_cache : nullptr);
  const LatentCode<S> latent = split_latent<S>(stats, dz, eps);
  const Mat<S> hidden = observation_forward<S>(*this, p, in, latent.z, train ? &obs_cache : nullptr);
  const PredictionBundle<S> pred = heads_forward<S>(*this, p, hidden, hidden, train ? &head_cache : nullptr);
  const LossBreakdown loss = compute_loss<S>(pred, target, &latent, config_);
  if (!train) return loss;

  Mat<S> dactions, dend_pose = Mat<S>::Zero(config_.chunk, 6);
  masked_l1<S>(pred.actions, target.actions, target.pad, &dactions);
  dactions *= terms.action ? scale : S(0);
  if (config_.has_end_pose()) {
    masked_l1<S>(*pred.end_poses, target.end_poses, target.pad, &dend_pose);
    dend_pose *= terms.end_pose ? scale * S(config_.gamma) : S(0);
  }

  auto [dh, dgh] = heads_backward<S>(*this, p, head_cache, dactions, dend_pose, *grad);
  dh += dgh;
  const Mat<S> dz_obs = observation_backward<S>(*this, p, obs_cache, dh, *grad);

  // z = mu + exp(logvar / 2) * eps, plus the KL gradient.
  const S reg_scale = terms.reg ? scale * S(config_.beta) : S(0);
  const RowVec<S> std_dev = (latent.logvar.array() * S(0.5)).exp();
  Mat<S> dstats(1, 2 * dz);
  dstats.leftCols(dz) = dz_obs + reg_scale * latent.mu;
  dstats.rightCols(dz) = (dz_obs.array() * eps.array() * std_dev.array() * S(0.5) +
                          reg_scale * S(0.5) * (latent.logvar.array().exp() - S(1)))
                             .matrix();
  cvae_backward<S>(*this, p, cvae_cache, dstats, *grad);
  return loss;
}

#define EPACT_INSTANTIATE(S)                                                                                         \
  template PolicyInput<S> make_input<S>(const std::map<std::string, ImageRGB>&, const Eigen::VectorXd&,           \
                                        const PolicyConfig&);                                                      \
  template double kl_divergence<S>(const RowVec<S>&, const RowVec<S>&);                                            \
  template LossBreakdown compute_loss<S>(const PredictionBundle<S>&, const ChunkTarget<S>&, const LatentCode<S>*, \
                                         const PolicyConfig&);                                                     \
  template LatentCode<S> PolicyNet::encode_latent<S>(const ParamSet<S>&, const Mat<S>&, const RowVec<S>&,         \
                                                     const RowVec<S>&) const;                                      \
  template PredictionBundle<S> PolicyNet::predict<S>(const ParamSet<S>&, const PolicyInput<S>&, const RowVec<S>&) \
      const;                                                                                                        \
  template PredictionBundle<S> PolicyNet::apply_heads<S>(const ParamSet<S>&, const Mat<S>&, const Mat<S>&) const; \
  template LossBreakdown PolicyNet::loss_and_grad<S>(const ParamSet<S>&, const PolicyInput<S>&,                   \
                                                     const ChunkTarget<S>&, const RowVec<S>&, ParamSet<S>*, S,     \
                                                     LossTerms) const;

EPACT_INSTANTIATE(float)
EPACT_INSTANTIATE(double)

}  // namespace epact
