#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epact/image.hpp"
#include "epact/nn/layers.hpp"

namespace epact {

enum class Variant { Act, EpactL, EpactEE };
enum class Fusion { Concat, Add };

std::string variant_name(Variant v);
/// Accepts "act", "epact_l"/"epact-l", "epact_ee"/"epact-ee"; throws UnknownVariant.
Variant variant_from_name(const std::string& name);
std::string fusion_name(Fusion f);
Fusion fusion_from_name(const std::string& name);

struct PolicyConfig {
  Variant variant = Variant::EpactEE;
  std::vector<std::string> cameras{"wrist_up", "wrist_down"};
  int chunk = 50;
  int latent_dim = 32;
  int width = 128;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int cvae_layers = 2;
  int heads = 4;
  int ffn_dim = 256;
  std::vector<int> backbone{16, 32, 64, 64};
  int image_width = 96;
  int image_height = 96;
  int ik_hidden = 128;
  Fusion fusion = Fusion::Concat;
  bool stop_end_pose_grad = false;  // EPACT-L: block the action loss from reaching the end-pose head

  double beta = 10.0;
  double gamma = 1.0;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double grad_clip = 10.0;
  int warmup_steps = 100;
  bool cosine_decay = true;  // anneal the learning rate to zero over `steps`
  int steps = 20000;
  int batch = 8;
  int n_val = 1;
  int log_every = 100;
  std::uint64_t seed = 0;

  /// Throws InvalidConfig.
  void validate() const;
  nlohmann::json to_json() const;
  static PolicyConfig from_json(const nlohmann::json& j);
  bool has_end_pose() const { return variant != Variant::Act; }
};

template <typename S>
struct PolicyInput {
  std::vector<nn::Mat<S>> images;  // one (H*W) x 3 matrix per configured camera
  nn::RowVec<S> q;                 // normalized joints, 1 x 4
};

/// Converts uint8 images to centered [-0.5, 0.5] features in config camera
/// order. Throws ShapeMismatch on a missing camera or wrong resolution.
template <typename S>
PolicyInput<S> make_input(const std::map<std::string, ImageRGB>& images, const Eigen::VectorXd& q_norm,
                          const PolicyConfig& config);

template <typename S>
struct LatentCode {
  nn::RowVec<S> mu, logvar, z;
};

template <typename S>
struct PredictionBundle {
  nn::Mat<S> actions;                   // k x 5
  std::optional<nn::Mat<S>> end_poses;  // k x 6, EPACT variants only
  nn::Mat<S> hidden;                    // k x width
};

struct LossBreakdown {
  double rec_action = 0.0;
  double reg = 0.0;
  double rec_end_pose = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown scaled(double s) const;
};

template <typename S>
struct ChunkTarget {
  nn::Mat<S> actions;    // k x 5, normalized
  nn::Mat<S> end_poses;  // k x 6, normalized (ignored by act)
  std::vector<bool> pad;  // true = padded step
};

/// Standard Gaussian KL summed over latent dimensions.
template <typename S>
double kl_divergence(const nn::RowVec<S>& mu, const nn::RowVec<S>& logvar);

/// L1 reconstruction terms, KL and the weighted total. `latent` may be null
/// (no CVAE), in which case reg = 0.
template <typename S>
LossBreakdown compute_loss(const PredictionBundle<S>& pred, const ChunkTarget<S>& target, const LatentCode<S>* latent,
                           const PolicyConfig& config);

/// Selects which loss terms contribute to the gradient.
struct LossTerms {
  bool action = true;
  bool reg = true;
  bool end_pose = true;
};

/// Network layout. Parameters live in a separate ParamSet so the same net
/// serves float training, double gradient checks and loaded checkpoints.
class PolicyNet {
 public:
  /// Builds the layout and freshly initialized parameters.
  static PolicyNet create(const PolicyConfig& config, std::uint64_t seed, nn::ParamSet<double>& params);
  /// Layout only (parameter values are discarded).
  explicit PolicyNet(const PolicyConfig& config);

  const PolicyConfig& config() const { return config_; }

  template <typename S>
  LatentCode<S> encode_latent(const nn::ParamSet<S>& p, const nn::Mat<S>& action_chunk, const nn::RowVec<S>& q,
                              const nn::RowVec<S>& eps) const;

  template <typename S>
  PredictionBundle<S> predict(const nn::ParamSet<S>& p, const PolicyInput<S>& in, const nn::RowVec<S>& z) const;

  /// Runs only the output heads. For epact_ee the gripper branch reads
  /// `gripper_hidden`; other variants ignore it.
  template <typename S>
  PredictionBundle<S> apply_heads(const nn::ParamSet<S>& p, const nn::Mat<S>& hidden,
                                  const nn::Mat<S>& gripper_hidden) const;

  /// Full training pass: CVAE encoder with noise `eps`, prediction, loss and
  /// backward. Gradients of the selected terms, multiplied by `scale`, are
  /// added to `grad` when it is non-null.
  template <typename S>
  LossBreakdown loss_and_grad(const nn::ParamSet<S>& p, const PolicyInput<S>& in, const ChunkTarget<S>& target,
                              const nn::RowVec<S>& eps, nn::ParamSet<S>* grad, S scale = S(1),
                              LossTerms terms = {}) const;

  /// Indices of parameters that feed the gripper output without passing
  /// through the shared decoder.
  std::vector<std::size_t> gripper_branch_parameters() const;

  // Layout (public so tests can address individual blocks).
  std::vector<nn::ConvBackbone> backbones;
  std::vector<nn::Linear> feature_proj;
  std::vector<std::size_t> camera_embed;
  nn::Linear q_proj, z_proj;
  std::size_t q_pos = 0, z_pos = 0;
  std::vector<nn::EncoderLayer> encoder;
  nn::LayerNorm encoder_norm;
  std::size_t queries = 0;
  std::vector<nn::DecoderLayer> decoder;
  nn::LayerNorm decoder_norm;

  std::size_t cvae_cls = 0;
  nn::Linear cvae_q_proj, cvae_action_proj;
  std::vector<nn::EncoderLayer> cvae_encoder;
  nn::Linear cvae_out;

  nn::Linear action_head;  // act
  nn::Linear end_pose_head;
  nn::Linear end_pose_embed;  // epact_l, additive fusion
  nn::Mlp fusion;             // epact_l
  nn::Mlp ik;                 // epact_ee
  nn::Linear grip_head;       // epact_ee

  int feature_h = 0, feature_w = 0;
  nn::Mat<double> image_pos;  // feature_h*feature_w x width
  nn::Mat<double> cvae_pos;   // (k + 2) x width

 private:
  PolicyNet() = default;
  void build(const PolicyConfig& config, nn::ParamBuilder& pb);

  PolicyConfig config_;
};

/// Exact trainable parameter count for a configuration.
std::size_t count_parameters(const PolicyConfig& config);

}  // namespace epact
